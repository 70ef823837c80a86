//! Implicit gradients of `G(w) = g(θ*(w))`: inverse Hessian-vector products
//! (conjugate gradients or a truncated Neumann series), per-point selection
//! scores, and perturbation-based oracles for both.

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::models::{InnerBudget, InnerProblem, OuterObjective};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Cg,
    Neumann,
    /// Treats the Hessian as the identity (gradient-alignment scores).
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HypergradConfig {
    pub solver: Solver,
    pub max_iters: usize,
    /// Relative residual target `‖Hx − b‖ ≤ tol·‖b‖`.
    pub cg_tolerance: f64,
    pub neumann_terms: usize,
    pub neumann_scale: f64,
    /// Added to the Hessian diagonal.
    pub damping: f64,
}

impl Default for HypergradConfig {
    fn default() -> Self {
        Self {
            solver: Solver::Cg,
            max_iters: 100,
            cg_tolerance: 1e-10,
            neumann_terms: 100,
            neumann_scale: 1.0,
            damping: 0.0,
        }
    }
}

impl HypergradConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return invalid("max_iters must be at least 1");
        }
        if self.solver == Solver::Neumann && !(self.neumann_scale > 0.0) {
            return invalid("Neumann scale must be positive");
        }
        if !(self.damping >= 0.0) {
            return invalid("damping must be nonnegative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CgSolution {
    pub x: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Residual norm before the first and after every iteration.
    pub residuals: Vec<f64>,
}

/// Conjugate gradients on `(H + damping·I) x = rhs`.
pub fn cg_solve<F>(apply_h: F, rhs: &DVector<f64>, cfg: &HypergradConfig) -> Result<CgSolution>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let apply = |v: &DVector<f64>| apply_h(v) + v * cfg.damping;
    let target = cfg.cg_tolerance * rhs.norm();
    let mut x = DVector::zeros(rhs.len());
    let mut r = rhs.clone();
    let mut p = r.clone();
    let mut rr = r.norm_squared();
    let mut residuals = vec![rr.sqrt()];
    if rr.sqrt() <= target || rr == 0.0 {
        return Ok(CgSolution {
            x,
            iterations: 0,
            converged: true,
            residuals,
        });
    }
    for iter in 1..=cfg.max_iters {
        let hp = apply(&p);
        let curv = p.dot(&hp);
        if !curv.is_finite() || curv <= 0.0 {
            return Err(Error::Indefinite { iterations: iter });
        }
        let alpha = rr / curv;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &hp, 1.0);
        let rr_next = r.norm_squared();
        if !rr_next.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Indefinite { iterations: iter });
        }
        residuals.push(rr_next.sqrt());
        if rr_next.sqrt() <= target {
            return Ok(CgSolution {
                x,
                iterations: iter,
                converged: true,
                residuals,
            });
        }
        p = &r + &p * (rr_next / rr);
        rr = rr_next;
    }
    log::warn!(
        "conjugate gradients stopped at the iteration cap ({}) with relative residual {:.3e}",
        cfg.max_iters,
        residuals.last().unwrap() / rhs.norm()
    );
    Ok(CgSolution {
        x,
        iterations: cfg.max_iters,
        converged: false,
        residuals,
    })
}

/// `α Σ_{i=0}^{T} (I − αH)^i rhs`, with `H` including the damping term.
pub fn neumann_inverse_hvp<F>(apply_h: F, rhs: &DVector<f64>, cfg: &HypergradConfig) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let alpha = cfg.neumann_scale;
    if !(alpha > 0.0) {
        return invalid("Neumann scale must be positive");
    }
    let mut term = rhs.clone();
    let mut sum = rhs.clone();
    let mut norms = vec![sum.norm()];
    for i in 1..=cfg.neumann_terms {
        let next = &term - (apply_h(&term) + &term * cfg.damping) * alpha;
        term = next;
        sum += &term;
        let norm = sum.norm();
        if !norm.is_finite() {
            return Err(Error::NeumannDiverged { terms: i });
        }
        norms.push(norm);
        if i >= 10 && norm > 10.0 * norms[i - 10] {
            return Err(Error::NeumannDiverged { terms: i });
        }
    }
    Ok(sum * alpha)
}

/// `(H + damping·I)⁻¹ rhs` with the configured solver.
pub fn inverse_hvp<F>(apply_h: F, rhs: &DVector<f64>, cfg: &HypergradConfig) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    cfg.validate()?;
    match cfg.solver {
        Solver::Cg => Ok(cg_solve(apply_h, rhs, cfg)?.x),
        Solver::Neumann => neumann_inverse_hvp(apply_h, rhs, cfg),
        Solver::Identity => Ok(rhs.clone()),
    }
}

/// `u = H⁻¹ ∇g(θ*)`, shared by every coordinate of the implicit gradient.
pub fn outer_direction(
    inner: &InnerProblem,
    outer: &OuterObjective,
    w: &[f64],
    theta_star: &DVector<f64>,
    cfg: &HypergradConfig,
) -> Result<DVector<f64>> {
    check_shapes(inner, w, theta_star)?;
    let rhs = outer.gradient(theta_star);
    match inner.on_support(w) {
        Some((sub, ws)) => inverse_hvp(|v| sub.hvp(theta_star, &ws, v), &rhs, cfg),
        None => inverse_hvp(|v| inner.hvp(theta_star, w, v), &rhs, cfg),
    }
}

fn check_shapes(inner: &InnerProblem, w: &[f64], theta: &DVector<f64>) -> Result<()> {
    if w.len() != inner.len() {
        return invalid(format!("{} weights for {} points", w.len(), inner.len()));
    }
    if theta.len() != inner.dim() {
        return invalid(format!("θ has {} entries, expected {}", theta.len(), inner.dim()));
    }
    Ok(())
}

/// `∂G/∂w_k = −b_k ∇ℓ_k(θ*)ᵀ H⁻¹ ∇g(θ*)` for every inner point `k`.
pub fn implicit_gradient(
    inner: &InnerProblem,
    outer: &OuterObjective,
    w: &[f64],
    theta_star: &DVector<f64>,
    cfg: &HypergradConfig,
) -> Result<Vec<f64>> {
    let scores = selection_scores(inner, outer, w, theta_star, cfg)?;
    Ok(scores.scores.iter().map(|s| -s).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionScores {
    pub scores: Vec<f64>,
}

impl SelectionScores {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["index", "score"])?;
        for (i, s) in self.scores.iter().enumerate() {
            wtr.write_record([i.to_string(), s.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// `score[k] = b_k ∇ℓ_k(θ*)ᵀ H⁻¹ ∇g(θ*)`, the negated implicit gradient.
pub fn selection_scores(
    inner: &InnerProblem,
    outer: &OuterObjective,
    w: &[f64],
    theta_star: &DVector<f64>,
    cfg: &HypergradConfig,
) -> Result<SelectionScores> {
    let u = outer_direction(inner, outer, w, theta_star, cfg)?;
    let dots = inner.model().grad_dots(theta_star, &u);
    let scores: Vec<f64> = dots.iter().zip(inner.base_weights()).map(|(d, b)| d * b).collect();
    if let Some(k) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Singular(format!("selection score {k} is not finite")));
    }
    Ok(SelectionScores { scores })
}

fn outer_at(
    inner: &InnerProblem,
    outer: &OuterObjective,
    w: &[f64],
    warm: Option<&DVector<f64>>,
    budget: &InnerBudget,
) -> Result<f64> {
    let sol = inner.solve_signed(w, warm, budget)?;
    Ok(outer.value(&sol.theta))
}

/// Influence of upweighting point `k`: `−dG/dw_k` by central differences
/// with full inner re-solves (inner tolerance tightened 100×).
pub fn influence(
    inner: &InnerProblem,
    outer: &OuterObjective,
    w_s: &[f64],
    k: usize,
    epsilon_fd: f64,
    budget: &InnerBudget,
) -> Result<f64> {
    if k >= inner.len() {
        return invalid(format!("point {k} out of range"));
    }
    if !(epsilon_fd > 0.0) {
        return invalid("perturbation size must be positive");
    }
    let tight = InnerBudget {
        tolerance: budget.tolerance / 100.0,
        ..*budget
    };
    let base = inner.solve(w_s, None, &tight)?;
    let probe = InnerBudget { restarts: 1, ..tight };
    let mut w = w_s.to_vec();
    w[k] = w_s[k] + epsilon_fd;
    let up = outer_at(inner, outer, &w, Some(&base.theta), &probe)?;
    w[k] = w_s[k] - epsilon_fd;
    let down = outer_at(inner, outer, &w, Some(&base.theta), &probe)?;
    Ok(-(up - down) / (2.0 * epsilon_fd))
}

/// Finite-difference gradient of `w ↦ g(θ*(w))`; central where `w_i ≥ h`,
/// forward otherwise. Costs `O(n)` inner solves.
pub fn finite_diff_hypergradient(
    inner: &InnerProblem,
    outer: &OuterObjective,
    w: &[f64],
    h: f64,
    budget: &InnerBudget,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return invalid("step must be positive");
    }
    let base = inner.solve(w, None, budget)?;
    let g0 = outer.value(&base.theta);
    let budget = &InnerBudget { restarts: 1, ..*budget };
    let mut probe = w.to_vec();
    let mut out = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        probe[i] = w[i] + h;
        let up = outer_at(inner, outer, &probe, Some(&base.theta), budget)?;
        let d = if w[i] >= h {
            probe[i] = w[i] - h;
            let down = outer_at(inner, outer, &probe, Some(&base.theta), budget)?;
            (up - down) / (2.0 * h)
        } else {
            (up - g0) / h
        };
        probe[i] = w[i];
        out.push(d);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(d: &[f64]) -> impl Fn(&DVector<f64>) -> DVector<f64> + '_ {
        move |v| DVector::from_iterator(v.len(), v.iter().zip(d).map(|(a, b)| a * b))
    }

    #[test]
    fn cg_identity_one_step() {
        let rhs = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let sol = cg_solve(|v| v.clone(), &rhs, &HypergradConfig::default()).unwrap();
        assert_eq!(sol.iterations, 1);
        assert!((sol.x - rhs).amax() < 1e-15);
    }

    #[test]
    fn cg_zero_rhs() {
        let rhs = DVector::zeros(4);
        let sol = cg_solve(|v| v * 3.0, &rhs, &HypergradConfig::default()).unwrap();
        assert_eq!(sol.x, DVector::zeros(4));
    }

    #[test]
    fn cg_reports_indefinite() {
        let rhs = DVector::from_vec(vec![1.0, 1.0]);
        let d = [1.0, -1.0];
        assert!(matches!(
            cg_solve(diag(&d), &rhs, &HypergradConfig::default()),
            Err(Error::Indefinite { .. })
        ));
    }

    #[test]
    fn cg_damping_shifts_spectrum() {
        let rhs = DVector::from_vec(vec![1.0, 1.0]);
        let d = [1.0, 3.0];
        let cfg = HypergradConfig {
            damping: 1.0,
            ..Default::default()
        };
        let x = cg_solve(diag(&d), &rhs, &cfg).unwrap().x;
        assert!((x[0] - 0.5).abs() < 1e-12 && (x[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn neumann_examples() {
        let rhs = DVector::from_vec(vec![1.0, 1.0]);
        let one = [1.0, 1.0];
        let cfg = HypergradConfig {
            solver: Solver::Neumann,
            neumann_scale: 1.0,
            ..Default::default()
        };
        assert_eq!(neumann_inverse_hvp(diag(&one), &rhs, &cfg).unwrap(), rhs);

        let h = [2.0, 4.0];
        let cfg = HypergradConfig {
            neumann_scale: 0.25,
            ..cfg
        };
        let x = neumann_inverse_hvp(diag(&h), &rhs, &cfg).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-6 && (x[1] - 0.25).abs() < 1e-6);

        let cfg = HypergradConfig {
            neumann_scale: 1.5,
            ..cfg
        };
        assert!(matches!(
            neumann_inverse_hvp(diag(&h), &rhs, &cfg),
            Err(Error::NeumannDiverged { .. })
        ));
    }

    #[test]
    fn identity_solver_returns_rhs() {
        let rhs = DVector::from_vec(vec![2.0, 5.0]);
        let cfg = HypergradConfig {
            solver: Solver::Identity,
            ..Default::default()
        };
        assert_eq!(inverse_hvp(|v| v * 7.0, &rhs, &cfg).unwrap(), rhs);
    }

    #[test]
    fn scores_csv() {
        let s = SelectionScores {
            scores: vec![0.5, -1.0],
        };
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "index,score\n0,0.5\n1,-1\n");
    }
}
