//! Measurement selection for compressed sensing. Each signal is recovered
//! from the selected linear measurements by L2-regularized least squares,
//! and atoms are chosen greedily to shrink a log-mean-exp relaxation of the
//! worst reconstruction error over a representative signal set.

use std::io::Read;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::seq::index::sample;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};
use crate::hypergrad::{inverse_hvp, HypergradConfig};
use crate::linalg::cholesky;
use crate::objective::WeightObjective;
use crate::select::{greedy_select, Restriction, SelectionConfig, Variant};

#[derive(Debug, Clone)]
pub struct CompressedSensingProblem {
    signals: DMatrix<f64>,
    dictionary: DMatrix<f64>,
    recovery_reg: f64,
    temperature: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl CompressedSensingProblem {
    /// `signals` is `n × d`, `dictionary` is `m × d` with one candidate
    /// measurement per row. The temperature defaults to 5% of the median
    /// signal energy.
    pub fn new(signals: DMatrix<f64>, dictionary: DMatrix<f64>, recovery_reg: f64, temperature: Option<f64>) -> Result<Self> {
        if signals.nrows() == 0 || dictionary.nrows() == 0 {
            return invalid("signals and dictionary must be nonempty");
        }
        if signals.ncols() != dictionary.ncols() {
            return invalid(format!(
                "signal dimension {} differs from dictionary dimension {}",
                signals.ncols(),
                dictionary.ncols()
            ));
        }
        if !(recovery_reg > 0.0) {
            return invalid("recovery regularizer must be positive");
        }
        if let Some(j) = (0..dictionary.nrows()).find(|&j| dictionary.row(j).norm() == 0.0) {
            return invalid(format!("dictionary row {j} is zero"));
        }
        let temperature = match temperature {
            Some(t) => t,
            None => 0.05 * median(signals.row_iter().map(|r| r.norm_squared()).collect()),
        };
        if !(temperature > 0.0) {
            return invalid("softmax temperature must be positive");
        }
        Ok(Self {
            signals,
            dictionary,
            recovery_reg,
            temperature,
        })
    }

    pub fn signals(&self) -> &DMatrix<f64> {
        &self.signals
    }

    pub fn dictionary(&self) -> &DMatrix<f64> {
        &self.dictionary
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn dict_size(&self) -> usize {
        self.dictionary.nrows()
    }

    /// `Σ_j w_j a_j a_jᵀ + λI`.
    fn system(&self, w: &[f64]) -> DMatrix<f64> {
        let d = self.dictionary.ncols();
        let mut h = DMatrix::identity(d, d) * self.recovery_reg;
        for (j, &wj) in w.iter().enumerate() {
            if wj != 0.0 {
                let a = self.dictionary.row(j);
                h += a.transpose() * a * wj;
            }
        }
        h
    }

    fn factor(&self, w: &[f64]) -> Result<Cholesky<f64, Dyn>> {
        if w.len() != self.dict_size() {
            return invalid(format!("{} weights for {} atoms", w.len(), self.dict_size()));
        }
        if w.iter().any(|&v| !(v >= 0.0)) {
            return invalid("measurement weights must be nonnegative");
        }
        cholesky(self.system(w), "recovery system")
    }

    fn indicator(&self, selected: &[usize]) -> Result<Vec<f64>> {
        if selected.is_empty() {
            return invalid("at least one measurement must be selected");
        }
        let mut w = vec![0.0; self.dict_size()];
        for &j in selected {
            if j >= w.len() {
                return invalid(format!("atom {j} out of range"));
            }
            w[j] = 1.0;
        }
        Ok(w)
    }

    /// `argmin_y Σ_{j∈S} (a_j·(x − y))² + λ‖y‖²`.
    pub fn recover_l2(&self, selected: &[usize], x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dictionary.ncols() {
            return invalid("signal dimension mismatch");
        }
        let chol = self.factor(&self.indicator(selected)?)?;
        Ok(x - chol.solve(x) * self.recovery_reg)
    }

    /// Residuals `x_i − x̂_i = λ H(w)⁻¹ x_i` as rows.
    fn residuals(&self, chol: &Cholesky<f64, Dyn>) -> DMatrix<f64> {
        (chol.solve(&self.signals.transpose()) * self.recovery_reg).transpose()
    }

    /// Squared reconstruction error of every signal under weights `w`.
    pub fn errors(&self, w: &[f64]) -> Result<Vec<f64>> {
        let r = self.residuals(&self.factor(w)?);
        Ok(r.row_iter().map(|row| row.norm_squared()).collect())
    }

    pub fn sup_error(&self, selected: &[usize]) -> Result<f64> {
        Ok(self.errors(&self.indicator(selected)?)?.into_iter().fold(0.0, f64::max))
    }

    /// `τ log((1/n) Σ exp(e_i/τ))`, between the mean and the maximum error.
    pub fn relaxed_sup(&self, errors: &[f64]) -> f64 {
        let t = self.temperature;
        let scaled: Vec<f64> = errors.iter().map(|e| e / t).collect();
        t * (crate::linalg::log_sum_exp(&scaled) - (errors.len() as f64).ln())
    }
}

/// Relaxed worst-case error as a function of measurement weights.
pub struct SensingObjective<'a> {
    problem: &'a CompressedSensingProblem,
    hypergrad: HypergradConfig,
}

impl<'a> SensingObjective<'a> {
    pub fn new(problem: &'a CompressedSensingProblem, hypergrad: HypergradConfig) -> Self {
        Self { problem, hypergrad }
    }
}

impl WeightObjective for SensingObjective<'_> {
    fn len(&self) -> usize {
        self.problem.dict_size()
    }

    fn value(&mut self, w: &[f64]) -> Result<f64> {
        Ok(self.problem.relaxed_sup(&self.problem.errors(w)?))
    }

    /// `∂e_i/∂w_j = −2 (a_j·H⁻¹r_i)(a_j·r_i)`, combined with softmax weights.
    fn value_and_gradient(&mut self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        let p = self.problem;
        let chol = p.factor(w)?;
        let h = p.system(w);
        let r = p.residuals(&chol);
        let errors: Vec<f64> = r.row_iter().map(|row| row.norm_squared()).collect();
        let value = p.relaxed_sup(&errors);
        let scaled: Vec<f64> = errors.iter().map(|e| e / p.temperature).collect();
        let lse = crate::linalg::log_sum_exp(&scaled);
        let probs: Vec<f64> = scaled.iter().map(|s| (s - lse).exp()).collect();
        let mut v = DMatrix::zeros(r.nrows(), r.ncols());
        for i in 0..r.nrows() {
            let ri = r.row(i).transpose();
            let vi = inverse_hvp(|u: &DVector<f64>| &h * u, &ri, &self.hypergrad)?;
            v.set_row(i, &vi.transpose());
        }
        let va = &v * p.dictionary.transpose();
        let ra = &r * p.dictionary.transpose();
        let grad = (0..p.dict_size())
            .map(|j| -2.0 * (0..r.nrows()).map(|i| probs[i] * va[(i, j)] * ra[(i, j)]).sum::<f64>())
            .collect();
        Ok((value, grad))
    }
}

/// `k` atoms chosen by unweighted greedy selection on the relaxed worst-case
/// error, in selection order. Batch and plain forward variants are honored;
/// other variants fall back to batch-forward.
pub fn dict_select(
    p: &CompressedSensingProblem,
    k: usize,
    cfg: &SelectionConfig,
    hcfg: &HypergradConfig,
) -> Result<Vec<usize>> {
    if k == 0 || k > p.dict_size() {
        return invalid(format!("budget {k} must be in 1..={}", p.dict_size()));
    }
    let variant = match cfg.variant {
        Variant::Forward => Variant::Forward,
        _ => Variant::ForwardBatch,
    };
    let cfg = SelectionConfig {
        variant,
        budget: k,
        weighted: false,
        initial_size: Some(cfg.initial_size.unwrap_or(0)),
        ..cfg.clone()
    };
    let mut obj = SensingObjective::new(p, *hcfg);
    Ok(greedy_select(&mut obj, &cfg, &Restriction::default())?.selected)
}

/// Top-`k` atoms by mean `|a_j·x_i|` over the signals.
pub fn approx_greedy_baseline(p: &CompressedSensingProblem, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > p.dict_size() {
        return invalid(format!("budget {k} must be in 1..={}", p.dict_size()));
    }
    let scores = (&p.signals * p.dictionary.transpose()).abs().row_mean();
    let mut idx: Vec<usize> = (0..p.dict_size()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// `k × d` matrix of i.i.d. standard normal rows scaled to unit norm.
pub fn random_gaussian_baseline(d: usize, k: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = DMatrix::from_fn(k, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    for mut row in m.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    m
}

/// Squared L2-recovery errors of `signals` measured by every row of
/// `measurements`.
pub fn measurement_errors(signals: &DMatrix<f64>, measurements: &DMatrix<f64>, recovery_reg: f64) -> Result<Vec<f64>> {
    let p = CompressedSensingProblem::new(signals.clone(), measurements.clone(), recovery_reg, Some(1.0))?;
    p.errors(&vec![1.0; measurements.nrows()])
}

/// `n` signals in `d` dimensions with `sparsity` standard normal entries on
/// a uniformly random support.
pub fn make_sparse_signals(n: usize, d: usize, sparsity: usize, seed: u64) -> Result<DMatrix<f64>> {
    if sparsity == 0 || sparsity > d {
        return invalid(format!("sparsity {sparsity} must be in 1..={d}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in sample(&mut rng, d, sparsity) {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    Ok(m)
}

/// Matrix from CSV rows of numbers without a header.
pub fn read_matrix_csv<R: Read>(input: R) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| crate::error::Error::Parse {
                line: line + 1,
                msg: e.to_string(),
            })?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(crate::error::Error::Parse {
                    line: line + 1,
                    msg: format!("expected {} columns, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return invalid("matrix file has no rows");
    }
    let cols = rows[0].len();
    Ok(DMatrix::from_row_iterator(rows.len(), cols, rows.into_iter().flatten()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_measurement_example() {
        let p = CompressedSensingProblem::new(DMatrix::zeros(1, 2), DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), 1.0, Some(1.0)).unwrap();
        let x = p.recover_l2(&[0], &DVector::from_vec(vec![2.0, 3.0])).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && x[1].abs() < 1e-15);
        assert!(p.recover_l2(&[], &DVector::from_vec(vec![2.0, 3.0])).is_err());
    }

    #[test]
    fn full_identity_recovers_signal() {
        let x = DVector::from_vec(vec![0.3, -1.2, 2.0]);
        let p = CompressedSensingProblem::new(DMatrix::zeros(1, 3), DMatrix::identity(3, 3), 1e-9, Some(1.0)).unwrap();
        assert!((p.recover_l2(&[0, 1, 2], &x).unwrap() - &x).amax() < 1e-8);
    }

    #[test]
    fn recovery_is_linear() {
        let dict = random_gaussian_baseline(5, 4, 1);
        let p = CompressedSensingProblem::new(DMatrix::zeros(1, 5), dict, 0.1, Some(1.0)).unwrap();
        let a = DVector::from_fn(5, |i, _| i as f64 - 2.0);
        let b = DVector::from_fn(5, |i, _| (i * i) as f64 * 0.3);
        let s = [0, 2, 3];
        let lhs = p.recover_l2(&s, &(&a * 2.0 + &b)).unwrap();
        let rhs = p.recover_l2(&s, &a).unwrap() * 2.0 + p.recover_l2(&s, &b).unwrap();
        assert!((lhs - rhs).amax() < 1e-12);
    }

    #[test]
    fn relaxed_sup_is_sandwiched() {
        let p = CompressedSensingProblem::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2), 1.0, Some(0.3)).unwrap();
        let e = [0.1, 0.5, 2.0, 0.7];
        let mean = e.iter().sum::<f64>() / 4.0;
        let r = p.relaxed_sup(&e);
        assert!(mean <= r && r <= 2.0 + 0.3 * 4f64.ln());
    }

    #[test]
    fn gradient_matches_differences() {
        let signals = make_sparse_signals(6, 4, 2, 3).unwrap();
        let dict = random_gaussian_baseline(4, 7, 4);
        let p = CompressedSensingProblem::new(signals, dict, 0.05, None).unwrap();
        let mut obj = SensingObjective::new(&p, HypergradConfig::default());
        let w = vec![0.4, 0.0, 1.0, 0.2, 0.0, 0.7, 0.1];
        let (_, g) = obj.value_and_gradient(&w).unwrap();
        let h = 1e-6;
        for j in 0..7 {
            let mut a = w.clone();
            let mut b = w.clone();
            a[j] += h;
            b[j] = (b[j] - h).max(0.0);
            let fd = (obj.value(&a).unwrap() - obj.value(&b).unwrap()) / (a[j] - b[j]);
            assert!((fd - g[j]).abs() <= 1e-5 * g[j].abs().max(1e-6));
        }
    }

    #[test]
    fn approx_greedy_prefers_dominant_atom() {
        let dict = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.6, 0.8]);
        let signals = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 0.0, 2.0]);
        let p = CompressedSensingProblem::new(signals, dict, 0.1, None).unwrap();
        assert_eq!(approx_greedy_baseline(&p, 1).unwrap(), vec![1]);
        assert_eq!(approx_greedy_baseline(&p, 3).unwrap(), vec![1, 2, 0]);
    }

    #[test]
    fn random_baseline_is_seeded_and_unit() {
        let a = random_gaussian_baseline(8, 3, 11);
        assert_eq!(a, random_gaussian_baseline(8, 3, 11));
        assert_ne!(a, random_gaussian_baseline(8, 3, 12));
        for row in a.row_iter() {
            assert!((row.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_matrix() {
        let m = read_matrix_csv("1,2\n3,4.5\n".as_bytes()).unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.5]));
        assert!(read_matrix_csv("1,2\n3\n".as_bytes()).is_err());
        assert!(read_matrix_csv("1,x\n".as_bytes()).is_err());
    }
}
