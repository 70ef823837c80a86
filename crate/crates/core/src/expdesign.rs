//! Closed-form experimental-design objectives over nonnegative weights:
//! frequentist A- and V-design and Bayesian V-design, with analytic
//! derivatives and a Monte-Carlo estimate of the gap between the
//! summarization loss and the V-design loss as the data set grows.
//!
//! All kinds share `F(w) = XᵀD(w)X + λσ²I`:
//! - A: `(σ²/2) Tr(F⁻¹)`
//! - V: `(σ²/2n) Tr(X F⁻¹ Xᵀ)`
//! - Bayesian V: same as V with `λ > 0`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Labels, WeightedDataset};
use crate::error::{invalid, Result};
use crate::linalg::cholesky;
use crate::models::{Family, InnerProblem, Model, ModelSpec, OuterObjective};
use crate::objective::WeightObjective;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    A,
    V,
    BayesV,
}

#[derive(Debug, Clone)]
pub struct ExpDesignProblem {
    design: DMatrix<f64>,
    gram: DMatrix<f64>,
    noise_var: f64,
    prior_precision: f64,
    kind: DesignKind,
}

/// Per-size Monte-Carlo estimate of `g − g_V`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub n: usize,
    pub mean: f64,
    pub std_err: f64,
}

impl ExpDesignProblem {
    /// `prior_precision` must be positive for Bayesian V-design and zero for
    /// the frequentist kinds.
    pub fn new(design: DMatrix<f64>, noise_var: f64, prior_precision: f64, kind: DesignKind) -> Result<Self> {
        if design.nrows() == 0 || design.ncols() == 0 {
            return invalid("design matrix must be nonempty");
        }
        if design.iter().any(|v| !v.is_finite()) {
            return invalid("design matrix contains non-finite entries");
        }
        if !(noise_var > 0.0) {
            return invalid("noise variance must be positive");
        }
        match kind {
            DesignKind::BayesV if !(prior_precision > 0.0) => {
                return invalid("Bayesian design needs a positive prior precision")
            }
            DesignKind::A | DesignKind::V if prior_precision != 0.0 => {
                return invalid("frequentist designs take prior precision 0")
            }
            _ => {}
        }
        let gram = design.transpose() * &design;
        Ok(Self {
            design,
            gram,
            noise_var,
            prior_precision,
            kind,
        })
    }

    pub fn len(&self) -> usize {
        self.design.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.design.ncols()
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.design
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn prior_precision(&self) -> f64 {
        self.prior_precision
    }

    pub fn kind(&self) -> DesignKind {
        self.kind
    }

    fn scale(&self) -> f64 {
        match self.kind {
            DesignKind::A => self.noise_var / 2.0,
            DesignKind::V | DesignKind::BayesV => self.noise_var / (2.0 * self.len() as f64),
        }
    }

    fn check(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.len() {
            return invalid(format!("{} weights for {} design points", w.len(), self.len()));
        }
        if w.iter().any(|&v| !(v >= 0.0)) {
            return invalid("design weights must be nonnegative");
        }
        Ok(())
    }

    /// `XᵀD(w)X + λσ²I`.
    pub fn information(&self, w: &[f64]) -> Result<DMatrix<f64>> {
        self.check(w)?;
        let d = self.dim();
        let mut f = DMatrix::identity(d, d) * (self.prior_precision * self.noise_var);
        for (i, &wi) in w.iter().enumerate() {
            if wi != 0.0 {
                let x = self.design.row(i);
                f += x.transpose() * x * wi;
            }
        }
        Ok(f)
    }

    fn factor(&self, w: &[f64]) -> Result<Cholesky<f64, Dyn>> {
        cholesky(self.information(w)?, "design information matrix")
    }

    /// `M` in `Tr(F⁻¹M)`.
    fn target(&self) -> DMatrix<f64> {
        match self.kind {
            DesignKind::A => DMatrix::identity(self.dim(), self.dim()),
            DesignKind::V | DesignKind::BayesV => self.gram.clone(),
        }
    }

    pub fn objective(&self, w: &[f64]) -> Result<f64> {
        let chol = self.factor(w)?;
        Ok(self.scale() * chol.solve(&self.target()).trace())
    }

    /// `∂G/∂w_i = −c · x_iᵀ F⁻¹ M F⁻¹ x_i`.
    pub fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        let chol = self.factor(w)?;
        let b = chol.solve(&chol.solve(&self.target()).transpose());
        let xb = &self.design * &b;
        let c = self.scale();
        Ok((0..self.len()).map(|i| -c * xb.row(i).dot(&self.design.row(i))).collect())
    }

    /// `2c · (X F⁻¹ Xᵀ) ∘ (X F⁻¹ M F⁻¹ Xᵀ)`.
    pub fn hessian(&self, w: &[f64]) -> Result<DMatrix<f64>> {
        let chol = self.factor(w)?;
        let xt = self.design.transpose();
        let finv_xt = chol.solve(&xt);
        let p = &self.design * &finv_xt;
        let q = finv_xt.transpose() * self.target() * &finv_xt;
        let c = 2.0 * self.scale();
        let mut h = p.component_mul(&q) * c;
        h = (&h + h.transpose()) * 0.5;
        Ok(h)
    }

    /// Bilevel ridge problems whose outer values sum to
    /// `G(w) − Tr(XᵀX)/(2nλ)` for every `w ≥ 0`. Problem `m` fits the
    /// noiseless targets `X e_m` with regularization `λσ²`; its outer loss is
    /// the linear function `−(1/2nλ)(XᵀX e_m)ᵀθ`, written as differences of
    /// squared losses on paired copies of the design points.
    pub fn ridge_terms(&self) -> Result<Vec<(InnerProblem, OuterObjective)>> {
        if self.kind != DesignKind::BayesV {
            return invalid("the ridge decomposition applies to Bayesian V-design");
        }
        let (n, d) = (self.len(), self.dim());
        let spec = ModelSpec::new(Family::Ridge, self.prior_precision * self.noise_var);
        let paired = DMatrix::from_fn(2 * n, d, |i, j| self.design[(i % n, j)]);
        let half: Vec<f64> = (0..2 * n).map(|i| if i < n { 0.5 } else { -0.5 }).collect();
        let outer_model = Model::new(&WeightedDataset::unweighted(paired, Labels::Real(half))?, Family::Ridge, false)?;
        let scale = 1.0 / (4.0 * n as f64 * self.prior_precision);
        let mut terms = Vec::with_capacity(d);
        for m in 0..d {
            let y: Vec<f64> = self.design.column(m).iter().copied().collect();
            let inner = InnerProblem::new(&WeightedDataset::unweighted(self.design.clone(), Labels::Real(y.clone()))?, &spec)?;
            let v: Vec<f64> = (0..2 * n)
                .map(|i| if i < n { y[i] * scale } else { -y[i - n] * scale })
                .collect();
            terms.push((inner, OuterObjective::from_model(outer_model.clone(), v)?));
        }
        Ok(terms)
    }

    /// Constant separating [`Self::ridge_terms`] from the objective.
    pub fn ridge_offset(&self) -> f64 {
        self.gram.trace() / (2.0 * self.len() as f64 * self.prior_precision)
    }

    /// Monte-Carlo estimates of `g(θ̂_S) − g_V(θ̂_S)` for growing data sets.
    /// The design of size `n` is the first `n` rows of `X` followed by
    /// i.i.d. standard normal rows. Each sample draws `θ` from the prior
    /// (standard normal when the precision is 0) and `ε ~ N(0, σ²I)`.
    pub fn limit_gap_estimate(&self, subset: &[usize], n_grid: &[usize], mc_samples: usize, seed: u64) -> Result<Vec<GapEstimate>> {
        limit_gap(&self.design, self.noise_var, self.prior_precision, subset, n_grid, mc_samples, seed)
    }
}

/// Same as [`ExpDesignProblem::limit_gap_estimate`], allowing `σ² = 0`.
pub fn limit_gap(
    design: &DMatrix<f64>,
    noise_var: f64,
    prior_precision: f64,
    subset: &[usize],
    n_grid: &[usize],
    mc_samples: usize,
    seed: u64,
) -> Result<Vec<GapEstimate>> {
    if subset.is_empty() {
        return invalid("subset must be nonempty");
    }
    if !(noise_var >= 0.0) || !(prior_precision >= 0.0) {
        return invalid("variances must be nonnegative");
    }
    if mc_samples < 2 {
        return invalid("at least two Monte-Carlo samples are required");
    }
    let d = design.ncols();
    let max_n = n_grid.iter().copied().max().unwrap_or(0);
    let min_n = n_grid.iter().copied().min().unwrap_or(0);
    if subset.iter().any(|&i| i >= min_n.min(design.nrows())) {
        return invalid("subset indices must lie in the fixed design rows for every n");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = max_n.max(design.nrows());
    let mut full = DMatrix::zeros(rows, d);
    full.rows_mut(0, design.nrows()).copy_from(design);
    for i in design.nrows()..rows {
        for j in 0..d {
            full[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let xs = full.select_rows(subset);
    let f = xs.transpose() * &xs + DMatrix::identity(d, d) * (prior_precision * noise_var);
    let chol = cholesky(f, "subset information matrix")?;
    let prior_sd = if prior_precision > 0.0 { prior_precision.recip().sqrt() } else { 1.0 };
    let noise_sd = noise_var.sqrt();
    let mut out = Vec::with_capacity(n_grid.len());
    for &n in n_grid {
        let x = full.rows(0, n);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..mc_samples {
            let theta = DVector::from_fn(d, |_, _| prior_sd * rng.sample::<f64, _>(StandardNormal));
            let eps = DVector::from_fn(n, |_, _| noise_sd * rng.sample::<f64, _>(StandardNormal));
            let signal = x * &theta;
            let ys = DVector::from_fn(subset.len(), |r, _| signal[subset[r]] + eps[subset[r]]);
            let fit = chol.solve(&(xs.transpose() * ys));
            let pred = x * fit;
            let diff = &pred - &signal;
            let g = (&diff - &eps).norm_squared() / (2.0 * n as f64);
            let gv = diff.norm_squared() / (2.0 * n as f64);
            let gap = g - gv;
            sum += gap;
            sum_sq += gap * gap;
        }
        let m = mc_samples as f64;
        let mean = sum / m;
        let var = ((sum_sq - m * mean * mean) / (m - 1.0)).max(0.0);
        out.push(GapEstimate {
            n,
            mean,
            std_err: (var / m).sqrt(),
        });
    }
    Ok(out)
}

impl WeightObjective for ExpDesignProblem {
    fn len(&self) -> usize {
        self.design.nrows()
    }

    fn value(&mut self, w: &[f64]) -> Result<f64> {
        self.objective(w)
    }

    fn value_and_gradient(&mut self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.objective(w)?, self.gradient(w)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_design(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn identity_examples() {
        let p = ExpDesignProblem::new(DMatrix::identity(2, 2), 1.0, 1.0, DesignKind::BayesV).unwrap();
        assert!((p.objective(&[0.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
        let p = ExpDesignProblem::new(DMatrix::identity(3, 3), 2.0, 0.5, DesignKind::BayesV).unwrap();
        let w = [0.3, 1.5, 4.0];
        let expected: f64 = w.iter().map(|wi| 1.0 / (wi / 2.0 + 0.5)).sum::<f64>() / 6.0;
        assert!((p.objective(&w).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn frequentist_singular_errors() {
        let p = ExpDesignProblem::new(random_design(5, 3, 1), 1.0, 0.0, DesignKind::A).unwrap();
        assert!(p.objective(&[1.0, 1.0, 0.0, 0.0, 0.0]).is_err());
        assert!(p.objective(&[1.0; 5]).is_ok());
        assert!(ExpDesignProblem::new(random_design(5, 3, 1), 1.0, 1.0, DesignKind::V).is_err());
        assert!(ExpDesignProblem::new(random_design(5, 3, 1), 1.0, 0.0, DesignKind::BayesV).is_err());
    }

    #[test]
    fn matches_dense_inverse() {
        let x = random_design(10, 3, 2);
        let w: Vec<f64> = (0..10).map(|i| 0.1 * i as f64 + 0.05).collect();
        let dw = DMatrix::from_diagonal(&DVector::from_vec(w.clone()));
        for (kind, lambda) in [(DesignKind::A, 0.0), (DesignKind::V, 0.0), (DesignKind::BayesV, 0.7)] {
            let p = ExpDesignProblem::new(x.clone(), 1.3, lambda, kind).unwrap();
            let finv = (x.transpose() * &dw * &x + DMatrix::identity(3, 3) * (lambda * 1.3)).try_inverse().unwrap();
            let expected = match kind {
                DesignKind::A => 1.3 / 2.0 * finv.trace(),
                _ => 1.3 / 20.0 * (&x * finv * x.transpose()).trace(),
            };
            assert!((p.objective(&w).unwrap() - expected).abs() <= 1e-10 * expected.abs());
        }
    }

    #[test]
    fn gradient_and_hessian_match_differences() {
        let x = random_design(10, 3, 3);
        let w: Vec<f64> = (0..10).map(|i| 0.2 + 0.1 * (i % 4) as f64).collect();
        for (kind, lambda) in [(DesignKind::A, 0.0), (DesignKind::V, 0.0), (DesignKind::BayesV, 0.5)] {
            let p = ExpDesignProblem::new(x.clone(), 0.8, lambda, kind).unwrap();
            let g = p.gradient(&w).unwrap();
            let h = p.hessian(&w).unwrap();
            let step = 1e-5;
            for i in 0..10 {
                let mut a = w.clone();
                let mut b = w.clone();
                a[i] += step;
                b[i] -= step;
                let fd = (p.objective(&a).unwrap() - p.objective(&b).unwrap()) / (2.0 * step);
                assert!((fd - g[i]).abs() <= 1e-6 * g[i].abs().max(1e-8));
                let ga = p.gradient(&a).unwrap();
                let gb = p.gradient(&b).unwrap();
                for j in 0..10 {
                    let fd2 = (ga[j] - gb[j]) / (2.0 * step);
                    assert!((fd2 - h[(i, j)]).abs() <= 1e-5 * h.amax());
                }
            }
        }
    }

    #[test]
    fn ridge_terms_sum_to_objective() {
        let x = random_design(6, 2, 4);
        let p = ExpDesignProblem::new(x, 0.6, 1.5, DesignKind::BayesV).unwrap();
        let budget = crate::models::InnerBudget::default();
        for w in [[0.5, 1.0, 0.0, 2.0, 0.3, 0.0], [0.0; 6], [1.0, 0.0, 1.0, 1.0, 0.0, 0.0]] {
            let mut total = 0.0;
            for (inner, outer) in p.ridge_terms().unwrap() {
                let theta = inner.solve(&w, None, &budget).unwrap().theta;
                total += outer.value(&theta);
            }
            let g = p.objective(&w).unwrap();
            assert!((total + p.ridge_offset() - g).abs() <= 1e-10 * p.ridge_offset());
        }
    }

    #[test]
    fn noiseless_gap_is_zero() {
        let x = random_design(8, 2, 5);
        let est = limit_gap(&x, 0.0, 1.0, &[0, 1], &[8, 50], 20, 0).unwrap();
        for e in est {
            assert!(e.mean.abs() < 1e-12);
        }
    }

    #[test]
    fn full_subset_gap_is_finite() {
        let x = random_design(6, 2, 6);
        let p = ExpDesignProblem::new(x, 1.0, 1.0, DesignKind::BayesV).unwrap();
        let est = p.limit_gap_estimate(&[0, 1, 2, 3, 4, 5], &[6], 50, 1).unwrap();
        assert!(est[0].mean.is_finite() && est[0].std_err.is_finite());
    }
}
