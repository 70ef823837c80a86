//! Objectives over coreset weights, `G(w)`, as consumed by the selection
//! engines.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::hypergrad::{implicit_gradient, HypergradConfig};
use crate::models::{InnerBudget, InnerProblem, OuterObjective};

/// A differentiable function of the weight vector. Methods take `&mut self`
/// so implementations can keep warm-start state between calls.
pub trait WeightObjective {
    /// Number of weights.
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn value(&mut self, w: &[f64]) -> Result<f64>;

    fn value_and_gradient(&mut self, w: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Value at a trial point that leaves warm-start state untouched.
    fn probe(&mut self, w: &[f64]) -> Result<f64> {
        self.value(w)
    }
}

/// `G(w) = g(θ*(w))` with the implicit gradient.
pub struct BilevelObjective<'a> {
    inner: &'a InnerProblem,
    outer: &'a OuterObjective,
    hypergrad: HypergradConfig,
    budget: InnerBudget,
    theta: Option<DVector<f64>>,
}

impl<'a> BilevelObjective<'a> {
    pub fn new(
        inner: &'a InnerProblem,
        outer: &'a OuterObjective,
        hypergrad: HypergradConfig,
        budget: InnerBudget,
    ) -> Self {
        Self {
            inner,
            outer,
            hypergrad,
            budget,
            theta: None,
        }
    }

    fn warm(&self) -> Option<&DVector<f64>> {
        self.theta.as_ref().filter(|_| self.budget.warm_start)
    }

    /// Inner solution of the most recent evaluation.
    pub fn theta(&self) -> Option<&DVector<f64>> {
        self.theta.as_ref()
    }

    fn solve(&mut self, w: &[f64]) -> Result<DVector<f64>> {
        let sol = self.inner.solve(w, self.warm(), &self.budget)?;
        if !sol.converged {
            log::warn!(
                "inner solve stopped after {} iterations with gradient norm {:.3e}",
                sol.iterations,
                sol.grad_norm
            );
        }
        self.theta = Some(sol.theta.clone());
        Ok(sol.theta)
    }

    /// Retries an indefinite solve with damping `10^k · 1e-6 · s` for
    /// `k = 0, 1, ..., 12`, where `s = ‖H u‖/‖u‖` along the outer gradient
    /// `u`; the last steps make `H` negligible.
    fn damped_gradient(&self, w: &[f64], theta: &DVector<f64>) -> Result<Vec<f64>> {
        let u = self.outer.gradient(theta);
        let scale = self.inner.hvp(theta, w, &u).norm() / u.norm().max(f64::MIN_POSITIVE);
        let scale = if scale.is_finite() && scale > 0.0 { scale } else { 1.0 };
        let mut last = None;
        for k in 0..=12 {
            let damping = self.hypergrad.damping + scale * 1e-6 * 10f64.powi(k);
            let cfg = HypergradConfig { damping, ..self.hypergrad };
            match implicit_gradient(self.inner, self.outer, w, theta, &cfg) {
                Ok(g) => {
                    log::debug!("indefinite Hessian: solved with damping {damping:.3e}");
                    return Ok(g);
                }
                Err(e @ Error::Indefinite { .. }) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

impl WeightObjective for BilevelObjective<'_> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn value(&mut self, w: &[f64]) -> Result<f64> {
        let theta = self.solve(w)?;
        Ok(self.outer.value(&theta))
    }

    fn probe(&mut self, w: &[f64]) -> Result<f64> {
        let sol = self.inner.solve(w, self.warm(), &self.budget)?;
        Ok(self.outer.value(&sol.theta))
    }

    fn value_and_gradient(&mut self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
        let theta = self.solve(w)?;
        let grad = match implicit_gradient(self.inner, self.outer, w, &theta, &self.hypergrad) {
            Err(Error::Indefinite { .. }) => self.damped_gradient(w, &theta)?,
            other => other?,
        };
        Ok((self.outer.value(&theta), grad))
    }
}
