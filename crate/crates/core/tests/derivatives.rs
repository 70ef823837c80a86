//! Inner-objective gradients and Hessian-vector products against central
//! differences, for every model family.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use bilevel_coreset::data::make_gmm_synthetic;
use bilevel_coreset::{Family, InnerProblem, Labels, ModelSpec, OuterObjective, WeightedDataset};

fn dataset(family: Family, seed: u64) -> WeightedDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if let Family::Gmm { .. } = family {
        return make_gmm_synthetic(3, 40, seed).unwrap();
    }
    let n = 25;
    let x = DMatrix::from_fn(n, 3, |_, _| rng.sample(StandardNormal));
    let labels = match family {
        Family::Ridge => Labels::Real((0..n).map(|_| rng.sample(StandardNormal)).collect()),
        Family::BinaryLogistic => Labels::Class((0..n).map(|_| rng.random_range(0..2)).collect()),
        Family::MulticlassLogistic { classes } => Labels::Class((0..n).map(|_| rng.random_range(0..classes)).collect()),
        Family::Gmm { .. } => unreachable!(),
    };
    WeightedDataset::unweighted(x, labels).unwrap()
}

fn families() -> Vec<(ModelSpec, &'static str)> {
    vec![
        (ModelSpec::new(Family::Ridge, 0.1), "ridge"),
        (ModelSpec::new(Family::BinaryLogistic, 0.1).with_intercept(), "binary"),
        (ModelSpec::new(Family::MulticlassLogistic { classes: 4 }, 0.1).with_intercept(), "multiclass"),
        (ModelSpec::new(Family::Gmm { components: 3 }, 0.0), "gmm"),
    ]
}

fn central<F: Fn(&DVector<f64>) -> DVector<f64>>(f: F, theta: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = (0..theta.len())
        .map(|j| {
            let mut up = theta.clone();
            let mut down = theta.clone();
            up[j] += h;
            down[j] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect();
    DMatrix::from_columns(&cols)
}

fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-12)
}

#[test]
fn gradient_and_hvp_match_central_differences() {
    for (k, (spec, name)) in families().into_iter().enumerate() {
        let ds = dataset(spec.family, k as u64);
        let inner = InnerProblem::new(&ds, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(50 + k as u64);
        let w: Vec<f64> = (0..inner.len()).map(|_| rng.random_range(0.2..2.0)).collect();
        let theta = DVector::from_fn(inner.dim(), |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
        let grad = inner.gradient(&theta, &w);
        let fd = central(|t| DVector::from_element(1, inner.objective(t, &w)), &theta, 1e-6).transpose();
        let fd = DVector::from_column_slice(fd.as_slice());
        assert!(rel(&grad, &fd) < 1e-6, "{name}: gradient off by {}", rel(&grad, &fd));

        let v = DVector::from_fn(inner.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        let hv = inner.hvp(&theta, &w, &v);
        let jac = central(|t| inner.gradient(t, &w), &theta, 1e-6);
        let fd_hv = &jac * &v;
        assert!(rel(&hv, &fd_hv) < 1e-5, "{name}: hvp off by {}", rel(&hv, &fd_hv));
    }
}

#[test]
fn outer_gradient_matches_central_differences() {
    for (k, (spec, name)) in families().into_iter().enumerate() {
        let ds = dataset(spec.family, 10 + k as u64);
        let outer = OuterObjective::new(&ds, &spec).unwrap();
        let inner = InnerProblem::new(&ds, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let theta = DVector::from_fn(inner.dim(), |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
        let grad = outer.gradient(&theta);
        let fd = central(|t| DVector::from_element(1, outer.value(t)), &theta, 1e-6).transpose();
        let fd = DVector::from_column_slice(fd.as_slice());
        assert!(rel(&grad, &fd) < 1e-6, "{name}: outer gradient off by {}", rel(&grad, &fd));
    }
}

#[test]
fn solved_inner_problem_is_stationary() {
    for (k, (spec, name)) in families().into_iter().enumerate() {
        let ds = dataset(spec.family, 20 + k as u64);
        let inner = InnerProblem::new(&ds, &spec).unwrap();
        let w = vec![1.0; inner.len()];
        let sol = inner.solve(&w, None, &Default::default()).unwrap();
        let g = inner.gradient(&sol.theta, &w).norm();
        assert!(g < 1e-4 * inner.len() as f64, "{name}: gradient norm {g} at the solution");
    }
}
