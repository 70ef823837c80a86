//! Batch acquisition for active learning: select unlabeled points whose
//! pseudo-labeled versions make the labeled-plus-selected model best fit the
//! labeled-plus-pseudo-labeled pool.

use nalgebra::DMatrix;

use super::{greedy_select, Restriction, SelectionConfig, Variant};
use crate::data::{Labels, WeightedDataset};
use crate::error::{invalid, Result};
use crate::hypergrad::HypergradConfig;
use crate::models::glm::{Glm, GlmKind};
use crate::models::{Family, InnerBudget, InnerProblem, ModelSpec, OuterObjective};
use crate::objective::BilevelObjective;

/// Temperature used to sharpen pseudo-label distributions.
pub const DEFAULT_SHARPENING: f64 = 0.5;

fn sharpen(p: &mut [f64], temperature: f64) {
    let mut s = 0.0;
    for v in p.iter_mut() {
        *v = v.max(1e-300).powf(1.0 / temperature);
        s += *v;
    }
    for v in p.iter_mut() {
        *v /= s;
    }
}

/// Labels in the representation used for pseudo-labeled data.
fn soft_labels(ds: &WeightedDataset, family: Family) -> Result<Labels> {
    Ok(match (family, ds.labels()) {
        (Family::BinaryLogistic, Labels::Class(c)) => Labels::Real(c.iter().map(|&v| v as f64).collect()),
        (Family::MulticlassLogistic { classes }, Labels::Class(c)) => {
            let mut m = DMatrix::zeros(c.len(), classes);
            for (i, &k) in c.iter().enumerate() {
                if k >= classes {
                    return invalid(format!("class id {k} out of range"));
                }
                m[(i, k)] = 1.0;
            }
            Labels::Soft(m)
        }
        (_, other) => other.clone(),
    })
}

/// Pseudo-labels for `pool` from a model trained on `labeled`, sharpened
/// with `temperature` (1 keeps the predicted distribution).
pub fn pseudo_label(
    labeled: &WeightedDataset,
    pool: &WeightedDataset,
    spec: &ModelSpec,
    temperature: f64,
    budget: &InnerBudget,
) -> Result<WeightedDataset> {
    if !(temperature > 0.0) {
        return invalid("sharpening temperature must be positive");
    }
    let inner = InnerProblem::new(labeled, spec)?;
    let theta = inner.solve(&vec![1.0; labeled.len()], None, budget)?.theta;
    let kind = match spec.family {
        Family::Ridge => GlmKind::Ridge,
        Family::BinaryLogistic => GlmKind::Binary,
        Family::MulticlassLogistic { classes } => GlmKind::Multiclass { classes },
        Family::Gmm { .. } => return invalid("acquisition needs a supervised model family"),
    };
    let placeholder = match kind {
        GlmKind::Multiclass { classes } => Labels::Soft(DMatrix::from_element(pool.len(), classes, 1.0 / classes as f64)),
        _ => Labels::Real(vec![0.0; pool.len()]),
    };
    let glm = Glm::new(&pool.with_labels(placeholder)?, kind, spec.intercept)?;
    let pred = glm.predict(&theta);
    let labels = match kind {
        GlmKind::Ridge => Labels::Real(pred.iter().copied().collect()),
        GlmKind::Binary => Labels::Real(
            pred.iter()
                .map(|&p| {
                    let mut q = [p, 1.0 - p];
                    sharpen(&mut q, temperature);
                    q[0]
                })
                .collect(),
        ),
        GlmKind::Multiclass { classes } => {
            let mut m = DMatrix::zeros(pool.len(), classes);
            for (i, col) in pred.column_iter().enumerate() {
                let mut q: Vec<f64> = col.iter().copied().collect();
                sharpen(&mut q, temperature);
                for (k, v) in q.into_iter().enumerate() {
                    m[(i, k)] = v;
                }
            }
            Labels::Soft(m)
        }
    };
    pool.with_labels(labels)
}

/// Indices into `unlabeled` of `m` points to label next, in selection order.
pub fn al_acquire(
    labeled: &WeightedDataset,
    unlabeled: &WeightedDataset,
    spec: &ModelSpec,
    m: usize,
    cfg: &SelectionConfig,
    hcfg: &HypergradConfig,
    budget: &InnerBudget,
) -> Result<Vec<usize>> {
    al_acquire_with_temperature(labeled, unlabeled, spec, m, cfg, hcfg, budget, DEFAULT_SHARPENING)
}

#[allow(clippy::too_many_arguments)]
pub fn al_acquire_with_temperature(
    labeled: &WeightedDataset,
    unlabeled: &WeightedDataset,
    spec: &ModelSpec,
    m: usize,
    cfg: &SelectionConfig,
    hcfg: &HypergradConfig,
    budget: &InnerBudget,
    temperature: f64,
) -> Result<Vec<usize>> {
    let (l, u) = (labeled.len(), unlabeled.len());
    if m > u {
        return invalid(format!("cannot acquire {m} points from a pool of {u}"));
    }
    if m == u {
        return Ok((0..u).collect());
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let pseudo = pseudo_label(labeled, unlabeled, spec, temperature, budget)?;
    let lab = labeled.with_labels(soft_labels(labeled, spec.family)?)?;
    let combined = WeightedDataset::concat(&[&lab, &pseudo])?;
    let inner = InnerProblem::new(&combined, spec)?;
    let outer = OuterObjective::new(&combined, spec)?;
    let restriction = Restriction {
        fixed: (0..l).collect(),
        candidates: Some((0..l + u).map(|i| i >= l).collect()),
    };
    let cfg = SelectionConfig {
        variant: Variant::Forward,
        budget: m,
        weighted: false,
        ..cfg.clone()
    };
    let mut obj = BilevelObjective::new(&inner, &outer, *hcfg, *budget);
    let state = greedy_select(&mut obj, &cfg, &restriction)?;
    Ok(state.selected.iter().filter(|&&i| i >= l).map(|&i| i - l).collect())
}
