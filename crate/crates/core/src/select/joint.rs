//! One index set shared by several models, selected by alternating which
//! model scores the candidates in each batch round.

use super::{forward_batch, CoresetState, Restriction, SelectionConfig};
use crate::error::{invalid, Result};
use crate::hypergrad::HypergradConfig;
use crate::models::{InnerBudget, InnerProblem, OuterObjective};
use crate::objective::{BilevelObjective, WeightObjective};

/// Batch forward selection where round `r` uses model `r mod k`.
pub fn joint_forward_select(
    inners: &[InnerProblem],
    outers: &[OuterObjective],
    cfg: &SelectionConfig,
    hcfg: &HypergradConfig,
    budget: &InnerBudget,
) -> Result<CoresetState> {
    if inners.len() < 2 || inners.len() != outers.len() {
        return invalid("joint selection needs at least two models with matching outer objectives");
    }
    let n = inners[0].len();
    if inners.iter().any(|p| p.len() != n) {
        return invalid("joint models must share one data set");
    }
    cfg.validate(n)?;
    let mut objs: Vec<BilevelObjective> = inners
        .iter()
        .zip(outers)
        .map(|(i, o)| BilevelObjective::new(i, o, *hcfg, *budget))
        .collect();
    let mut refs: Vec<&mut dyn WeightObjective> = objs.iter_mut().map(|o| o as &mut dyn WeightObjective).collect();
    forward_batch(&mut refs, cfg, &Restriction::default())
}

/// `G_1(w) + λ Σ_{r ≥ 2} G_r(w)` for reporting.
pub fn joint_objective(
    inners: &[InnerProblem],
    outers: &[OuterObjective],
    w: &[f64],
    lambda_joint: f64,
    budget: &InnerBudget,
) -> Result<f64> {
    let mut total = 0.0;
    for (r, (inner, outer)) in inners.iter().zip(outers).enumerate() {
        let theta = inner.solve(w, None, budget)?.theta;
        let g = outer.value(&theta);
        total += if r == 0 { g } else { lambda_joint * g };
    }
    Ok(total)
}
