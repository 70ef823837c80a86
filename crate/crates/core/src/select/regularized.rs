//! Weighted coresets on the probability simplex with an `L_{1/2}` sparsity
//! penalty `β Σ √w_i`, doubling `β` whenever the support stops shrinking.

use serde::{Deserialize, Serialize};

use super::{simplex_project, CoresetState, TraceEntry};
use crate::error::{invalid, Error, Result};
use crate::hypergrad::HypergradConfig;
use crate::models::{InnerBudget, InnerProblem, OuterObjective};
use crate::objective::{BilevelObjective, WeightObjective};

/// Largest penalty tried before giving up on a target size.
pub const MAX_PENALTY: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegularizedConfig {
    /// Initial sparsity penalty `β`.
    pub sparsity_penalty: f64,
    /// Replaces the inner problem's `‖θ‖²` coefficient when set.
    pub inner_reg: Option<f64>,
    pub outer_steps: usize,
    pub step_size: f64,
    /// Steps with unchanged support before `β` is doubled.
    pub plateau_window: usize,
    pub epsilon_mix: f64,
    pub prune_threshold: f64,
}

impl Default for RegularizedConfig {
    fn default() -> Self {
        Self {
            sparsity_penalty: 1e-7,
            inner_reg: None,
            outer_steps: 1000,
            step_size: 1e-3,
            plateau_window: 5,
            epsilon_mix: 1e-8,
            prune_threshold: 1e-4,
        }
    }
}

impl RegularizedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sparsity_penalty >= 0.0) {
            return invalid("sparsity penalty must be nonnegative");
        }
        if !(self.prune_threshold > self.epsilon_mix) {
            return invalid("prune threshold must exceed the mixing weight");
        }
        if !(self.step_size > 0.0) {
            return invalid("step size must be positive");
        }
        if self.plateau_window == 0 {
            return invalid("plateau window must be at least 1");
        }
        Ok(())
    }
}

/// Why the outer loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    StepLimit,
    TargetReached,
}

/// `β Σ √w_i`.
pub fn sparsity_penalty(w: &[f64], beta: f64) -> f64 {
    beta * w.iter().map(|v| v.max(0.0).sqrt()).sum::<f64>()
}

fn support(w: &[f64], threshold: f64) -> usize {
    w.iter().filter(|&&v| v >= threshold).count()
}

pub fn regularized_select_with<O: WeightObjective + ?Sized>(
    obj: &mut O,
    cfg: &RegularizedConfig,
    target_m: Option<usize>,
) -> Result<(CoresetState, StopReason)> {
    cfg.validate()?;
    let n = obj.len();
    if n == 0 {
        return invalid("no points to select from");
    }
    let uniform = 1.0 / n as f64;
    if uniform < cfg.prune_threshold {
        return invalid(format!(
            "uniform weight 1/{n} is below the prune threshold {}; every point would be pruned",
            cfg.prune_threshold
        ));
    }
    let mut w = vec![uniform; n];
    let mut beta = cfg.sparsity_penalty;
    let mut last_support = n;
    let mut plateau = 0;
    let mut trace = Vec::new();
    let mut reason = StopReason::StepLimit;
    let partial = |w: &[f64], trace: &Vec<TraceEntry>| CoresetState {
        selected: (0..w.len()).filter(|&i| w[i] >= cfg.prune_threshold).collect(),
        weights: w.to_vec(),
        trace: trace.clone(),
    };
    if target_m.is_some_and(|m| n <= m) {
        reason = StopReason::TargetReached;
    }
    let mut step = 0;
    while step < cfg.outer_steps && reason != StopReason::TargetReached {
        let (value, grad) = obj.value_and_gradient(&w).map_err(|e| Error::Selection {
            partial: Box::new(partial(&w, &trace)),
            source: Box::new(e),
        })?;
        let v: Vec<f64> = w
            .iter()
            .zip(&grad)
            .map(|(wi, gi)| wi - cfg.step_size * (gi + beta / (2.0 * wi.sqrt())))
            .collect();
        let projected = simplex_project(&v);
        w = projected
            .iter()
            .map(|p| (1.0 - cfg.epsilon_mix) * p + cfg.epsilon_mix * uniform)
            .collect();
        step += 1;
        let s = support(&w, cfg.prune_threshold);
        trace.push(TraceEntry {
            round: step,
            chosen: Vec::new(),
            objective: value + sparsity_penalty(&w, beta),
        });
        if let Some(m) = target_m {
            if s <= m {
                reason = StopReason::TargetReached;
                break;
            }
            if s < last_support {
                plateau = 0;
            } else {
                plateau += 1;
                if plateau >= cfg.plateau_window {
                    plateau = 0;
                    beta = if beta == 0.0 { 1e-12 } else { beta * 2.0 };
                    if beta > MAX_PENALTY {
                        return Err(Error::PenaltyOverflow {
                            beta,
                            support: s,
                            target: m,
                        });
                    }
                }
            }
        }
        last_support = s.min(last_support);
    }
    log::info!(
        "regularized selection stopped after {step} steps ({:?}) with penalty {beta:e}",
        reason
    );
    for v in w.iter_mut() {
        if *v < cfg.prune_threshold {
            *v = 0.0;
        }
    }
    let mut selected: Vec<usize> = (0..n).filter(|&i| w[i] > 0.0).collect();
    selected.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    Ok((
        CoresetState {
            selected,
            weights: w,
            trace,
        },
        reason,
    ))
}

/// Sparsity-regularized weighted coreset for a bilevel problem.
pub fn regularized_select(
    inner: &InnerProblem,
    outer: &OuterObjective,
    cfg: &RegularizedConfig,
    hcfg: &HypergradConfig,
    budget: &InnerBudget,
    target_m: Option<usize>,
) -> Result<(CoresetState, StopReason)> {
    let reg_inner;
    let inner = match cfg.inner_reg {
        Some(r) => {
            reg_inner = inner.with_reg(r)?;
            &reg_inner
        }
        None => inner,
    };
    let mut obj = BilevelObjective::new(inner, outer, *hcfg, *budget);
    regularized_select_with(&mut obj, cfg, target_m)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Linear(Vec<f64>);

    impl WeightObjective for Linear {
        fn len(&self) -> usize {
            self.0.len()
        }
        fn value(&mut self, w: &[f64]) -> Result<f64> {
            Ok(w.iter().zip(&self.0).map(|(a, b)| a * b).sum())
        }
        fn value_and_gradient(&mut self, w: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((self.value(w)?, self.0.clone()))
        }
    }

    #[test]
    fn no_steps_keeps_uniform() {
        let cfg = RegularizedConfig {
            sparsity_penalty: 0.0,
            outer_steps: 0,
            ..Default::default()
        };
        let (s, _) = regularized_select_with(&mut Linear(vec![1.0; 8]), &cfg, None).unwrap();
        assert!(s.weights.iter().all(|&w| w == 0.125));
        assert_eq!(s.selected.len(), 8);
    }

    #[test]
    fn too_many_points_for_threshold() {
        let cfg = RegularizedConfig {
            outer_steps: 0,
            ..Default::default()
        };
        assert!(regularized_select_with(&mut Linear(vec![1.0; 20_000]), &cfg, None).is_err());
    }

    #[test]
    fn penalty_of_uniform_weights() {
        let n = 25;
        let w = vec![1.0 / n as f64; n];
        assert!((sparsity_penalty(&w, 1.0) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn large_steps_concentrate_without_nan() {
        let cfg = RegularizedConfig {
            outer_steps: 3,
            step_size: 10.0,
            sparsity_penalty: 1e-3,
            ..Default::default()
        };
        let (s, _) = regularized_select_with(&mut Linear(vec![0.0, 5.0, 9.0, 1.0]), &cfg, None).unwrap();
        assert!(s.weights.iter().all(|w| w.is_finite()));
        assert!(s.trace.iter().all(|t| t.objective.is_finite()));
        assert_eq!(s.selected, vec![0]);
        assert!((s.weights[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn doubling_reaches_target() {
        let cfg = RegularizedConfig {
            outer_steps: 10_000,
            step_size: 1e-2,
            sparsity_penalty: 1e-4,
            ..Default::default()
        };
        let mut obj = Linear(vec![0.0, 0.01, 0.02, 0.03, 0.04, 0.05]);
        let (s, reason) = regularized_select_with(&mut obj, &cfg, Some(2)).unwrap();
        assert_eq!(reason, StopReason::TargetReached);
        assert!(s.selected.len() <= 2);
        assert!(s.selected.contains(&0));
    }
}
