//! Coreset selection: greedy forward selection with optional weight
//! re-optimization, its batch, exchange and elimination variants, the
//! sparsity-regularized simplex method, joint multi-model selection and
//! active-learning acquisition.

pub mod active;
pub mod joint;
pub mod regularized;
pub mod simplex;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::hypergrad::HypergradConfig;
use crate::models::{InnerBudget, InnerProblem, OuterObjective};
use crate::objective::{BilevelObjective, WeightObjective};

pub use active::al_acquire;
pub use joint::{joint_forward_select, joint_objective};
pub use regularized::{regularized_select, regularized_select_with, RegularizedConfig, StopReason};
pub use simplex::simplex_project;

/// One row of a selection trace: indices added (or exchanged) in a round and
/// the objective after that round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub round: usize,
    pub chosen: Vec<usize>,
    pub objective: f64,
}

/// Ordered selected indices and a weight vector supported on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoresetState {
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
    #[serde(default)]
    pub trace: Vec<TraceEntry>,
}

impl CoresetState {
    pub fn empty(n: usize) -> Self {
        Self {
            selected: Vec::new(),
            weights: vec![0.0; n],
            trace: Vec::new(),
        }
    }

    /// The given distinct indices with unit weights.
    pub fn from_indices(n: usize, indices: &[usize]) -> Self {
        let mut out = CoresetState::empty(n);
        for &i in indices {
            out.push(i, 1.0);
        }
        out
    }

    fn push(&mut self, i: usize, weight: f64) {
        debug_assert!(!self.selected.contains(&i));
        self.selected.push(i);
        self.weights[i] = weight;
    }

    fn remove(&mut self, i: usize) {
        self.selected.retain(|&j| j != i);
        self.weights[i] = 0.0;
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    /// The first `j` selected points with unit weights: for greedy
    /// constructions this is the state after `j` additions.
    pub fn prefix(&self, j: usize) -> CoresetState {
        let mut out = CoresetState::empty(self.weights.len());
        for &i in self.selected.iter().take(j) {
            out.push(i, 1.0);
        }
        out
    }

    /// `index,weight` rows in selection order.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["index", "weight"])?;
        for &i in &self.selected {
            wtr.write_record([i.to_string(), self.weights[i].to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// `round,chosen,objective` rows; chosen indices separated by `;`.
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["round", "chosen", "objective"])?;
        for t in &self.trace {
            let chosen: Vec<String> = t.chosen.iter().map(|c| c.to_string()).collect();
            wtr.write_record([t.round.to_string(), chosen.join(";"), t.objective.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Forward,
    ForwardBatch,
    Exchange,
    Eliminate,
    Regularized,
}

/// Update rule for support-restricted weight optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightOptimizer {
    /// Projected gradient descent with a constant step.
    FixedStep,
    /// Projected gradient descent with an adaptive step and sufficient
    /// decrease, so the objective never increases.
    Backtracking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub variant: Variant,
    /// Coreset size `m`.
    pub budget: usize,
    /// Points added or removed per round.
    pub batch: usize,
    pub exchange_steps: usize,
    /// Re-optimize weights on the support after every addition.
    pub weighted: bool,
    pub weight_opt_iters: usize,
    pub weight_step_size: f64,
    pub weight_optimizer: WeightOptimizer,
    /// Forward selection re-ranks this many top-scoring candidates per round
    /// by their exact objective value; 1 takes the best score.
    pub shortlist: usize,
    /// Size of the random starting set; defaults to one point for forward
    /// selection and `max(b, ⌈0.005·n⌉)` for batch selection; 0 starts greedy.
    pub initial_size: Option<usize>,
    pub seed: u64,
    /// Used when `variant` is `regularized`; `budget` is the target size.
    pub regularized: RegularizedConfig,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Forward,
            budget: 1,
            batch: 1,
            exchange_steps: 0,
            weighted: false,
            weight_opt_iters: 150,
            weight_step_size: 0.01,
            weight_optimizer: WeightOptimizer::FixedStep,
            shortlist: 1,
            initial_size: None,
            seed: 0,
            regularized: RegularizedConfig::default(),
        }
    }
}

impl SelectionConfig {
    pub fn forward(budget: usize, seed: u64) -> Self {
        Self {
            budget,
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.budget == 0 {
            return invalid("coreset size must be at least 1");
        }
        if self.budget > n {
            return invalid(format!("coreset size {} exceeds {n} points", self.budget));
        }
        if self.batch == 0 {
            return invalid("batch size must be at least 1");
        }
        if self.shortlist == 0 {
            return invalid("shortlist must be at least 1");
        }
        if self.variant == Variant::Exchange && self.batch > self.budget {
            return invalid("exchange batch cannot exceed the coreset size");
        }
        if !(self.weight_step_size > 0.0) && self.weighted {
            return invalid("weight step size must be positive");
        }
        Ok(())
    }
}

/// Points that are always part of the support and the points eligible for
/// selection.
#[derive(Debug, Clone, Default)]
pub struct Restriction {
    pub fixed: Vec<usize>,
    pub candidates: Option<Vec<bool>>,
}

impl Restriction {
    fn allows(&self, i: usize) -> bool {
        self.candidates.as_ref().is_none_or(|c| c[i]) && !self.fixed.contains(&i)
    }

    fn candidate_count(&self, n: usize) -> usize {
        (0..n).filter(|&i| self.allows(i)).count()
    }
}

fn abort(state: &CoresetState, err: Error) -> Error {
    match err {
        Error::Selection { .. } => err,
        other => Error::Selection {
            partial: Box::new(state.clone()),
            source: Box::new(other),
        },
    }
}

/// Seeded permutation of the eligible points.
fn candidate_order(n: usize, restriction: &Restriction, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).filter(|&i| restriction.allows(i)).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Indices of the `count` smallest (or largest) `values` among `pool`, ties
/// broken by lower index.
fn extreme(values: &[f64], pool: impl Iterator<Item = usize>, count: usize, largest: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = pool.collect();
    idx.sort_by(|&a, &b| {
        let ord = values[a].total_cmp(&values[b]);
        let ord = if largest { ord.reverse() } else { ord };
        ord.then(a.cmp(&b))
    });
    idx.truncate(count);
    idx
}

/// Support-restricted projected gradient descent on the weights of
/// `state.selected` (fixed points keep their weights).
pub(crate) fn optimize_weights<O: WeightObjective + ?Sized>(
    obj: &mut O,
    state: &mut CoresetState,
    restriction: &Restriction,
    cfg: &SelectionConfig,
) -> Result<()> {
    let free: Vec<usize> = state
        .selected
        .iter()
        .copied()
        .filter(|i| !restriction.fixed.contains(i))
        .collect();
    let mut step = cfg.weight_step_size;
    let mut current: Option<(f64, Vec<f64>)> = None;
    for _ in 0..cfg.weight_opt_iters {
        let (g_val, grad) = match current.take() {
            Some(c) => c,
            None => obj.value_and_gradient(&state.weights)?,
        };
        match cfg.weight_optimizer {
            WeightOptimizer::FixedStep => {
                for &i in &free {
                    state.weights[i] = (state.weights[i] - step * grad[i]).max(0.0);
                }
            }
            WeightOptimizer::Backtracking => {
                let mut accepted = false;
                step = (step * 2.0).min(cfg.weight_step_size * 1e8);
                for _ in 0..40 {
                    let mut cand = state.weights.clone();
                    let mut moved = 0.0;
                    for &i in &free {
                        cand[i] = (cand[i] - step * grad[i]).max(0.0);
                        moved += (cand[i] - state.weights[i]).powi(2);
                    }
                    if moved == 0.0 {
                        return Ok(());
                    }
                    let (c_val, c_grad) = obj.value_and_gradient(&cand)?;
                    if c_val <= g_val - 1e-4 / step * moved {
                        state.weights = cand;
                        current = Some((c_val, c_grad));
                        accepted = true;
                        break;
                    }
                    step *= 0.5;
                }
                if !accepted {
                    return Ok(());
                }
            }
        }
    }
    Ok(())
}

/// Greedy selection over any weight objective.
pub fn greedy_select<O: WeightObjective + ?Sized>(
    obj: &mut O,
    cfg: &SelectionConfig,
    restriction: &Restriction,
) -> Result<CoresetState> {
    let n = obj.len();
    cfg.validate(restriction.candidate_count(n))?;
    match cfg.variant {
        Variant::Forward => forward(obj, cfg, restriction),
        Variant::ForwardBatch => forward_batch(&mut [obj], cfg, restriction),
        Variant::Exchange => exchange(obj, cfg, restriction),
        Variant::Eliminate => eliminate(obj, cfg, restriction),
        Variant::Regularized => {
            let (state, _) = regularized::regularized_select_with(obj, &cfg.regularized, Some(cfg.budget))?;
            Ok(state)
        }
    }
}

fn start_state(n: usize, restriction: &Restriction) -> CoresetState {
    let mut state = CoresetState::empty(n);
    for &i in &restriction.fixed {
        state.push(i, 1.0);
    }
    state
}

fn added(state: &CoresetState, restriction: &Restriction) -> usize {
    state.len() - restriction.fixed.len()
}

fn forward<O: WeightObjective + ?Sized>(
    obj: &mut O,
    cfg: &SelectionConfig,
    restriction: &Restriction,
) -> Result<CoresetState> {
    let n = obj.len();
    let mut state = start_state(n, restriction);
    let mut chosen = Vec::new();
    if restriction.fixed.is_empty() || cfg.initial_size.is_some() {
        let order = candidate_order(n, restriction, cfg.seed);
        let start = cfg.initial_size.unwrap_or(1).min(cfg.budget);
        for &i in &order[..start] {
            state.push(i, 1.0);
            chosen.push(i);
        }
    }
    loop {
        if cfg.weighted {
            optimize_weights(obj, &mut state, restriction, cfg).map_err(|e| abort(&state, e))?;
        }
        let at_budget = added(&state, restriction) >= cfg.budget;
        let (value, grad) = if at_budget {
            (obj.value(&state.weights).map_err(|e| abort(&state, e))?, Vec::new())
        } else {
            obj.value_and_gradient(&state.weights).map_err(|e| abort(&state, e))?
        };
        state.trace.push(TraceEntry {
            round: state.trace.len() + 1,
            chosen: std::mem::take(&mut chosen),
            objective: value,
        });
        if at_budget {
            return Ok(state);
        }
        let pool = (0..n).filter(|&i| restriction.allows(i) && !state.selected.contains(&i));
        let short = extreme(&grad, pool, cfg.shortlist, false);
        let k = if short.len() == 1 {
            short[0]
        } else {
            let mut best = (f64::INFINITY, short[0]);
            for &i in &short {
                let mut w = state.weights.clone();
                w[i] = 1.0;
                let v = obj.probe(&w).map_err(|e| abort(&state, e))?;
                if v < best.0 {
                    best = (v, i);
                }
            }
            best.1
        };
        state.push(k, 1.0);
        chosen.push(k);
    }
}

/// Batch forward selection; round `r` scores with `objs[r mod len]`.
pub(crate) fn forward_batch<O: WeightObjective + ?Sized>(
    objs: &mut [&mut O],
    cfg: &SelectionConfig,
    restriction: &Restriction,
) -> Result<CoresetState> {
    let n = objs[0].len();
    let mut state = start_state(n, restriction);
    let order = candidate_order(n, restriction, cfg.seed);
    let default_pool = cfg.batch.max((0.005 * n as f64).ceil() as usize);
    let pool = cfg.initial_size.unwrap_or(default_pool).min(cfg.budget);
    let mut chosen: Vec<usize> = order[..pool].to_vec();
    for &i in &chosen {
        state.push(i, 1.0);
    }
    let mut round = 0;
    loop {
        let at_budget = added(&state, restriction) >= cfg.budget;
        let obj = &mut objs[round % objs.len()];
        let (value, grad) = if at_budget {
            (obj.value(&state.weights).map_err(|e| abort(&state, e))?, Vec::new())
        } else {
            obj.value_and_gradient(&state.weights).map_err(|e| abort(&state, e))?
        };
        state.trace.push(TraceEntry {
            round: round + 1,
            chosen: std::mem::take(&mut chosen),
            objective: value,
        });
        if at_budget {
            return Ok(state);
        }
        let take = cfg.batch.min(cfg.budget - added(&state, restriction));
        let pool = (0..n).filter(|&i| restriction.allows(i) && !state.selected.contains(&i));
        for k in extreme(&grad, pool, take, false) {
            state.push(k, 1.0);
            chosen.push(k);
        }
        round += 1;
    }
}

fn exchange<O: WeightObjective + ?Sized>(
    obj: &mut O,
    cfg: &SelectionConfig,
    restriction: &Restriction,
) -> Result<CoresetState> {
    let n = obj.len();
    let mut state = start_state(n, restriction);
    let order = candidate_order(n, restriction, cfg.seed);
    for &i in &order[..cfg.budget] {
        state.push(i, 1.0);
    }
    let initial = state.selected.clone();
    let mut chosen = initial;
    for step in 0..cfg.exchange_steps {
        let (value, grad) = obj.value_and_gradient(&state.weights).map_err(|e| abort(&state, e))?;
        state.trace.push(TraceEntry {
            round: step + 1,
            chosen: std::mem::take(&mut chosen),
            objective: value,
        });
        let removable = state.selected.iter().copied().filter(|i| !restriction.fixed.contains(i)).collect::<Vec<_>>();
        let out = extreme(&grad, removable.into_iter(), cfg.batch, true);
        let pool = (0..n).filter(|&i| restriction.allows(i) && !state.selected.contains(&i));
        let incoming = extreme(&grad, pool, out.len(), false);
        for (&i, &k) in out.iter().zip(&incoming) {
            if grad[k] < grad[i] {
                state.remove(i);
                state.push(k, 1.0);
                chosen.push(k);
            }
        }
    }
    let value = obj.value(&state.weights).map_err(|e| abort(&state, e))?;
    state.trace.push(TraceEntry {
        round: cfg.exchange_steps + 1,
        chosen,
        objective: value,
    });
    Ok(state)
}

fn eliminate<O: WeightObjective + ?Sized>(
    obj: &mut O,
    cfg: &SelectionConfig,
    restriction: &Restriction,
) -> Result<CoresetState> {
    let n = obj.len();
    let mut state = start_state(n, restriction);
    for i in 0..n {
        if restriction.allows(i) {
            state.push(i, 1.0);
        }
    }
    let mut round = 0;
    let mut removed_last = Vec::new();
    loop {
        round += 1;
        let at_budget = added(&state, restriction) <= cfg.budget;
        let (value, grad) = if at_budget {
            (obj.value(&state.weights).map_err(|e| abort(&state, e))?, Vec::new())
        } else {
            obj.value_and_gradient(&state.weights).map_err(|e| abort(&state, e))?
        };
        state.trace.push(TraceEntry {
            round,
            chosen: std::mem::take(&mut removed_last),
            objective: value,
        });
        if at_budget {
            return Ok(state);
        }
        let take = cfg.batch.min(added(&state, restriction) - cfg.budget);
        let removable = state.selected.iter().copied().filter(|i| !restriction.fixed.contains(i)).collect::<Vec<_>>();
        for i in extreme(&grad, removable.into_iter(), take, true) {
            state.remove(i);
            removed_last.push(i);
        }
    }
}

fn bilevel<'a>(
    inner: &'a InnerProblem,
    outer: &'a OuterObjective,
    hcfg: &HypergradConfig,
    budget: &InnerBudget,
) -> BilevelObjective<'a> {
    BilevelObjective::new(inner, outer, *hcfg, *budget)
}

/// Greedy bilevel coreset selection; the variant in `cfg` picks the
/// forward, batch, exchange, elimination or regularized procedure.
pub fn forward_select(
    inner: &InnerProblem,
    outer: &OuterObjective,
    cfg: &SelectionConfig,
    hcfg: &HypergradConfig,
    budget: &InnerBudget,
) -> Result<CoresetState> {
    greedy_select(&mut bilevel(inner, outer, hcfg, budget), cfg, &Restriction::default())
}

pub fn batch_forward_select(
    inner: &InnerProblem,
    outer: &OuterObjective,
    cfg: &SelectionConfig,
    hcfg: &HypergradConfig,
    budget: &InnerBudget,
) -> Result<CoresetState> {
    let cfg = SelectionConfig {
        variant: Variant::ForwardBatch,
        ..cfg.clone()
    };
    forward_select(inner, outer, &cfg, hcfg, budget)
}

pub fn exchange_select(
    inner: &InnerProblem,
    outer: &OuterObjective,
    cfg: &SelectionConfig,
    hcfg: &HypergradConfig,
    budget: &InnerBudget,
) -> Result<CoresetState> {
    let cfg = SelectionConfig {
        variant: Variant::Exchange,
        ..cfg.clone()
    };
    forward_select(inner, outer, &cfg, hcfg, budget)
}

pub fn eliminate_select(
    inner: &InnerProblem,
    outer: &OuterObjective,
    cfg: &SelectionConfig,
    hcfg: &HypergradConfig,
    budget: &InnerBudget,
) -> Result<CoresetState> {
    let cfg = SelectionConfig {
        variant: Variant::Eliminate,
        ..cfg.clone()
    };
    forward_select(inner, outer, &cfg, hcfg, budget)
}
