//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Cholesky factor of a symmetric positive-definite matrix, or a
/// [`Error::Singular`] naming the context and the first failing pivot.
pub fn cholesky(a: DMatrix<f64>, context: &str) -> Result<Cholesky<f64, Dyn>> {
    let n = a.nrows();
    let scale = a.diagonal().amax().max(f64::MIN_POSITIVE);
    match Cholesky::new(a.clone()) {
        Some(c) => {
            let l = c.l_dirty();
            if let Some(j) = (0..n).find(|&j| l[(j, j)] * l[(j, j)] <= 1e-13 * scale) {
                return Err(Error::Singular(format!(
                    "{context}: matrix of order {n} is numerically rank deficient (pivot {j} vanishes)"
                )));
            }
            Ok(c)
        }
        None => Err(Error::Singular(format!(
            "{context}: matrix of order {n} is not positive definite (rank deficient)"
        ))),
    }
}

pub fn spd_solve(a: DMatrix<f64>, b: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    Ok(cholesky(a, context)?.solve(b))
}

pub fn spd_inverse(a: DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    Ok(cholesky(a, context)?.inverse())
}

/// `Xᵀ diag(w) X` for row-major data given as the transposed `p × n` matrix.
pub fn weighted_gram(xt: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut scaled = xt.clone();
    for (mut col, &wi) in scaled.column_iter_mut().zip(w) {
        col *= wi;
    }
    &scaled * xt.transpose()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Stable `log(Σ exp(v))`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Index of the smallest value; ties go to the lowest index.
pub fn argmin(values: impl IntoIterator<Item = (usize, f64)>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values {
        match best {
            Some((bi, b)) if v > b || (v == b && i > bi) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|b| b.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singular_matrix_is_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(cholesky(a, "test"), Err(Error::Singular(_))));
    }

    #[test]
    fn solve_matches_inverse() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = DVector::from_vec(vec![1.0, 2.0]);
        let x = spd_solve(a.clone(), &b, "t").unwrap();
        assert!((&a * x - b).norm() < 1e-12);
    }

    #[test]
    fn weighted_gram_matches_direct() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.0, 1.0, 3.0, -1.0]);
        let w = [1.0, 2.0, 0.5];
        let direct = x.transpose() * DMatrix::from_diagonal(&DVector::from_row_slice(&w)) * &x;
        assert!((weighted_gram(&x.transpose(), &w) - direct).amax() < 1e-12);
    }

    #[test]
    fn argmin_ties_go_low() {
        assert_eq!(argmin([(3, 1.0), (1, 0.5), (2, 0.5)]), Some(1));
        assert_eq!(argmin([(4, 0.5), (1, 0.5)]), Some(1));
        assert_eq!(argmin(std::iter::empty()), None);
    }

    #[test]
    fn lse_is_stable() {
        assert!((log_sum_exp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }
}
