//! Weighted empirical-risk inner problems `f(θ, w) = Σ w_i b_i ℓ_i(θ) + λ‖θ‖²`
//! and outer objectives `g(θ) = Σ v_i ℓ_i(θ)`, where `b` and `v` are the
//! stored dataset weights.

pub mod glm;
pub mod gmm;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::WeightedDataset;
use crate::error::{invalid, Error, Result};
use glm::{Glm, GlmKind};
use gmm::{Gmm, GmmParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    Ridge,
    BinaryLogistic,
    MulticlassLogistic { classes: usize },
    Gmm { components: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    /// Coefficient of `‖θ‖²`.
    #[serde(default)]
    pub reg: f64,
    #[serde(default)]
    pub intercept: bool,
}

impl ModelSpec {
    pub fn new(family: Family, reg: f64) -> Self {
        Self {
            family,
            reg,
            intercept: false,
        }
    }

    pub fn with_intercept(mut self) -> Self {
        self.intercept = true;
        self
    }
}

/// Flat parameter vector tagged with its family, for export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub family: Family,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InnerBudget {
    pub max_iters: usize,
    /// Gradient-norm target relative to `max(1, Σ|w_i b_i|)` (GLMs), or
    /// relative NLL change (mixtures).
    pub tolerance: f64,
    /// Initialization seed for mixture fits without a warm start.
    pub seed: u64,
    /// EM runs per mixture fit, a warm start counting as one run and the
    /// rest seeded `seed`, `seed + 1`, ...; the lowest objective wins.
    pub restarts: usize,
    /// Selection loops resume each inner solve from the previous solution;
    /// when off, every solve starts fresh like the final retraining.
    pub warm_start: bool,
}

impl Default for InnerBudget {
    fn default() -> Self {
        Self {
            max_iters: 10_000,
            tolerance: 1e-8,
            seed: 0,
            restarts: 1,
            warm_start: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution {
    pub theta: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

/// Per-point losses of one family over one dataset.
#[derive(Debug, Clone)]
pub enum Model {
    Glm(Glm),
    Gmm(Gmm),
}

macro_rules! dispatch {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            Model::Glm($m) => $e,
            Model::Gmm($m) => $e,
        }
    };
}

impl Model {
    pub fn new(ds: &WeightedDataset, family: Family, intercept: bool) -> Result<Self> {
        if ds.is_empty() {
            return invalid("model data set is empty");
        }
        Ok(match family {
            Family::Ridge => Model::Glm(Glm::new(ds, GlmKind::Ridge, intercept)?),
            Family::BinaryLogistic => Model::Glm(Glm::new(ds, GlmKind::Binary, intercept)?),
            Family::MulticlassLogistic { classes } => {
                Model::Glm(Glm::new(ds, GlmKind::Multiclass { classes }, intercept)?)
            }
            Family::Gmm { components } => Model::Gmm(Gmm::new(ds.features(), components)?),
        })
    }

    pub fn subset(&self, idx: &[usize]) -> Model {
        match self {
            Model::Glm(m) => Model::Glm(m.subset(idx)),
            Model::Gmm(m) => Model::Gmm(m.subset(idx)),
        }
    }

    pub fn len(&self) -> usize {
        dispatch!(self, m => m.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        dispatch!(self, m => m.dim())
    }

    pub fn losses(&self, theta: &DVector<f64>) -> Vec<f64> {
        dispatch!(self, m => m.losses(theta))
    }

    pub fn weighted_grad(&self, theta: &DVector<f64>, w: &[f64]) -> DVector<f64> {
        dispatch!(self, m => m.weighted_grad(theta, w))
    }

    /// `∇ℓ_iᵀ u` for every point, without forming the gradients.
    pub fn grad_dots(&self, theta: &DVector<f64>, u: &DVector<f64>) -> Vec<f64> {
        dispatch!(self, m => m.grad_dots(theta, u))
    }

    pub fn per_point_grads(&self, theta: &DVector<f64>, idx: &[usize]) -> DMatrix<f64> {
        dispatch!(self, m => m.per_point_grads(theta, idx))
    }

    pub fn hvp(&self, theta: &DVector<f64>, w: &[f64], v: &DVector<f64>) -> DVector<f64> {
        dispatch!(self, m => m.hvp(theta, w, v))
    }
}

#[derive(Debug, Clone)]
pub struct InnerProblem {
    model: Model,
    family: Family,
    reg: f64,
    base: Vec<f64>,
}

impl InnerProblem {
    pub fn new(ds: &WeightedDataset, spec: &ModelSpec) -> Result<Self> {
        if !(spec.reg >= 0.0) {
            return invalid("regularizer must be nonnegative");
        }
        Ok(Self {
            model: Model::new(ds, spec.family, spec.intercept)?,
            family: spec.family,
            reg: spec.reg,
            base: ds.weights().to_vec(),
        })
    }

    /// Same data and losses with a different `‖θ‖²` coefficient.
    pub fn with_reg(&self, reg: f64) -> Result<Self> {
        if !(reg >= 0.0) {
            return invalid("regularizer must be nonnegative");
        }
        Ok(Self { reg, ..self.clone() })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn reg(&self) -> f64 {
        self.reg
    }

    /// Fixed per-point multipliers taken from the dataset weights.
    pub fn base_weights(&self) -> &[f64] {
        &self.base
    }

    pub fn len(&self) -> usize {
        self.model.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    /// The problem over the points with nonzero effective weight and the
    /// weights restricted to them, when those points are at most half the
    /// data. Solves and Hessian products only involve these points.
    pub(crate) fn on_support(&self, w: &[f64]) -> Option<(InnerProblem, Vec<f64>)> {
        let support: Vec<usize> = (0..self.len()).filter(|&i| w[i] * self.base[i] != 0.0).collect();
        if support.is_empty() || 2 * support.len() > self.len() {
            return None;
        }
        let sub = InnerProblem {
            model: self.model.subset(&support),
            family: self.family,
            reg: self.reg,
            base: support.iter().map(|&i| self.base[i]).collect(),
        };
        Some((sub, support.iter().map(|&i| w[i]).collect()))
    }

    pub(crate) fn effective(&self, w: &[f64]) -> Vec<f64> {
        w.iter().zip(&self.base).map(|(a, b)| a * b).collect()
    }

    pub fn objective(&self, theta: &DVector<f64>, w: &[f64]) -> f64 {
        let eff = self.effective(w);
        let data: f64 = self
            .model
            .losses(theta)
            .iter()
            .zip(&eff)
            .filter(|(_, &e)| e != 0.0)
            .map(|(l, e)| l * e)
            .sum();
        data + self.reg * theta.norm_squared()
    }

    pub fn gradient(&self, theta: &DVector<f64>, w: &[f64]) -> DVector<f64> {
        self.model.weighted_grad(theta, &self.effective(w)) + theta * (2.0 * self.reg)
    }

    /// `∇²_θ f(θ, w) v`, regularizer included.
    pub fn hvp(&self, theta: &DVector<f64>, w: &[f64], v: &DVector<f64>) -> DVector<f64> {
        self.model.hvp(theta, &self.effective(w), v) + v * (2.0 * self.reg)
    }

    /// Unweighted loss sum over `idx`.
    pub fn loss(&self, theta: &DVector<f64>, idx: &[usize]) -> f64 {
        let l = self.model.losses(theta);
        idx.iter().map(|&i| l[i]).sum()
    }

    pub fn per_point_grads(&self, theta: &DVector<f64>, idx: &[usize]) -> DMatrix<f64> {
        self.model.per_point_grads(theta, idx)
    }

    /// Minimizes `f(·, w)`. Ridge is solved exactly, logistic families by
    /// Newton's method with backtracking, mixtures by weighted EM.
    pub fn solve(
        &self,
        w: &[f64],
        warm_start: Option<&DVector<f64>>,
        budget: &InnerBudget,
    ) -> Result<InnerSolution> {
        if w.len() != self.len() {
            return invalid(format!("{} weights for {} points", w.len(), self.len()));
        }
        if w.iter().any(|v| !(*v >= 0.0)) {
            return invalid("inner weights must be nonnegative");
        }
        if self.reg == 0.0 && !w.iter().zip(&self.base).any(|(a, b)| a * b > 0.0) {
            return invalid("inner problem needs a positive weight or a positive regularizer");
        }
        self.solve_signed(w, warm_start, budget)
    }

    /// As [`solve`](Self::solve) but tolerates signed weights (used by
    /// perturbation probes).
    pub(crate) fn solve_signed(
        &self,
        w: &[f64],
        warm_start: Option<&DVector<f64>>,
        budget: &InnerBudget,
    ) -> Result<InnerSolution> {
        if let Some(t) = warm_start {
            if t.len() != self.dim() {
                return invalid(format!("warm start has {} entries, expected {}", t.len(), self.dim()));
            }
        }
        if let Some((sub, ws)) = self.on_support(w) {
            return sub.solve_signed(&ws, warm_start, budget);
        }
        match &self.model {
            Model::Glm(glm) if glm.kind() == GlmKind::Ridge => self.solve_ridge(glm, w),
            Model::Glm(_) => self.solve_newton(w, warm_start, budget),
            Model::Gmm(gmm) => {
                if self.reg != 0.0 {
                    return invalid("mixture inner problems do not support a regularizer");
                }
                let eff = self.effective(w);
                let fresh = budget.restarts.max(1) - usize::from(warm_start.is_some());
                let fits = warm_start
                    .map(|t| gmm.em_fit(&eff, Some(t), budget.max_iters, budget.tolerance, budget.seed))
                    .into_iter()
                    .chain((0..fresh as u64).map(|r| {
                        gmm.em_fit(&eff, None, budget.max_iters, budget.tolerance, budget.seed.wrapping_add(r))
                    }));
                let mut best: Option<(f64, (DVector<f64>, bool, usize))> = None;
                let mut last_err = None;
                for fit in fits {
                    match fit {
                        Ok(fit) => {
                            let f = self.objective(&fit.0, w);
                            if best.as_ref().map_or(true, |(b, _)| f < *b) {
                                best = Some((f, fit));
                            }
                        }
                        Err(e) => last_err = Some(e),
                    }
                }
                let (theta, converged, iterations) = match (best, last_err) {
                    (Some((_, fit)), _) => fit,
                    (None, Some(e)) => return Err(e),
                    (None, None) => unreachable!("at least one start"),
                };
                let grad_norm = self.gradient(&theta, w).norm();
                Ok(InnerSolution {
                    theta,
                    converged,
                    iterations,
                    grad_norm,
                })
            }
        }
    }

    fn solve_ridge(&self, glm: &Glm, w: &[f64]) -> Result<InnerSolution> {
        let eff = self.effective(w);
        let xt = glm.design_t();
        let p = xt.nrows();
        let a = crate::linalg::weighted_gram(xt, &eff) + DMatrix::identity(p, p) * self.reg;
        let wy: Vec<f64> = glm.targets().iter().zip(&eff).map(|(y, e)| y * e).collect();
        let b = xt * DVector::from_vec(wy);
        let theta = crate::linalg::spd_solve(a, &b, "ridge normal equations")?;
        let grad_norm = self.gradient(&theta, w).norm();
        Ok(InnerSolution {
            theta,
            converged: true,
            iterations: 1,
            grad_norm,
        })
    }

    fn newton_direction(&self, theta: &DVector<f64>, w: &[f64], g: &DVector<f64>) -> DVector<f64> {
        let dim = self.dim();
        if dim <= 256 {
            if let Model::Glm(glm) = &self.model {
                let h = glm.hessian(theta, &self.effective(w)) + DMatrix::identity(dim, dim) * (2.0 * self.reg);
                if let Ok(c) = crate::linalg::cholesky(h, "newton") {
                    return -c.solve(g);
                }
            }
        }
        let gn = g.norm();
        let cfg = crate::hypergrad::HypergradConfig {
            max_iters: 2 * dim.max(10),
            cg_tolerance: (0.5f64).min(gn.sqrt()),
            damping: 1e-10 * gn.max(1e-300),
            ..Default::default()
        };
        match crate::hypergrad::cg_solve(|v| self.hvp(theta, w, v), g, &cfg) {
            Ok(sol) if sol.x.dot(g) > 0.0 => -sol.x,
            _ => -g.clone(),
        }
    }

    fn solve_newton(
        &self,
        w: &[f64],
        warm_start: Option<&DVector<f64>>,
        budget: &InnerBudget,
    ) -> Result<InnerSolution> {
        let mut theta = warm_start.cloned().unwrap_or_else(|| DVector::zeros(self.dim()));
        let mut f = self.objective(&theta, w);
        let mut g = self.gradient(&theta, w);
        let target = budget.tolerance * self.effective(w).iter().map(|e| e.abs()).sum::<f64>().max(1.0);
        let mut stalled = 0;
        for iter in 0..budget.max_iters {
            let gn = g.norm();
            if !gn.is_finite() {
                return Err(Error::Singular("inner objective produced a non-finite gradient".into()));
            }
            if gn <= target || stalled >= 3 {
                return Ok(InnerSolution {
                    theta,
                    converged: gn <= target,
                    iterations: iter,
                    grad_norm: gn,
                });
            }
            let mut dir = self.newton_direction(&theta, w, &g);
            let mut slope = g.dot(&dir);
            if !(slope < 0.0) {
                dir = -g.clone();
                slope = -gn * gn;
            }
            let mut t = 1.0;
            let mut accepted = None;
            let tries = if -slope <= 1e-12 * f.abs().max(1.0) { 0 } else { 60 };
            for _ in 0..tries {
                let cand = &theta + &dir * t;
                let fc = self.objective(&cand, w);
                if fc <= f + 1e-4 * t * slope {
                    accepted = Some((cand, fc));
                    break;
                }
                t *= 0.5;
            }
            let (cand, fc) = match accepted {
                Some(a) => a,
                None => {
                    // rounding-level objective changes: accept a full step that shrinks the gradient
                    let cand = &theta + &dir;
                    let gc = self.gradient(&cand, w);
                    if gc.norm() < gn {
                        if gc.norm() > 0.5 * gn {
                            stalled += 1;
                        }
                        f = self.objective(&cand, w);
                        theta = cand;
                        g = gc;
                        continue;
                    }
                    return Ok(InnerSolution {
                        theta,
                        converged: false,
                        iterations: iter,
                        grad_norm: gn,
                    });
                }
            };
            let gc = self.gradient(&cand, w);
            if f - fc <= 1e-15 * f.abs() && gc.norm() > 0.5 * gn {
                stalled += 1;
            } else {
                stalled = 0;
            }
            theta = cand;
            f = fc;
            g = gc;
        }
        let gn = g.norm();
        Ok(InnerSolution {
            converged: gn <= target,
            theta,
            iterations: budget.max_iters,
            grad_norm: gn,
        })
    }

    pub fn params(&self, theta: &DVector<f64>) -> ModelParams {
        ModelParams {
            family: self.family,
            theta: theta.iter().copied().collect(),
        }
    }
}

/// `g(θ) = Σ v_i ℓ_i(θ)` over an evaluation set.
#[derive(Debug, Clone)]
pub struct OuterObjective {
    model: Model,
    weights: Vec<f64>,
}

impl OuterObjective {
    pub fn new(ds: &WeightedDataset, spec: &ModelSpec) -> Result<Self> {
        let model = Model::new(ds, spec.family, spec.intercept)?;
        Ok(Self {
            model,
            weights: ds.weights().to_vec(),
        })
    }

    pub fn from_model(model: Model, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != model.len() {
            return invalid("one outer weight per point is required");
        }
        Ok(Self { model, weights })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.model.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, theta: &DVector<f64>) -> f64 {
        self.model
            .losses(theta)
            .iter()
            .zip(&self.weights)
            .filter(|(_, &v)| v != 0.0)
            .map(|(l, v)| l * v)
            .sum()
    }

    pub fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.model.weighted_grad(theta, &self.weights)
    }
}

/// Weighted EM fit of a `k`-component mixture.
pub fn gmm_em_fit(
    ds: &WeightedDataset,
    k: usize,
    w: &[f64],
    seed: u64,
    budget: &InnerBudget,
) -> Result<ModelParams> {
    let gmm = Gmm::new(ds.features(), k)?;
    let (theta, _, _) = gmm.em_fit(w, None, budget.max_iters, budget.tolerance, seed)?;
    Ok(ModelParams {
        family: Family::Gmm { components: k },
        theta: theta.iter().copied().collect(),
    })
}

/// `Σ w_i ℓ_i` for mixture parameters.
pub fn gmm_nll(ds: &WeightedDataset, params: &ModelParams, w: &[f64]) -> Result<f64> {
    let Family::Gmm { components } = params.family else {
        return invalid("parameters are not for a mixture");
    };
    let gmm = Gmm::new(ds.features(), components)?;
    let theta = DVector::from_column_slice(&params.theta);
    if theta.len() != gmm.dim() {
        return invalid("parameter length does not match the data dimension");
    }
    Ok(gmm.losses(&theta).iter().zip(w).map(|(l, wi)| l * wi).sum())
}

/// Mixture parameters in natural form.
pub fn gmm_components(params: &ModelParams, d: usize) -> Result<GmmParams> {
    let Family::Gmm { components } = params.family else {
        return invalid("parameters are not for a mixture");
    };
    Ok(GmmParams::from_theta(&DVector::from_column_slice(&params.theta), components, d))
}

fn glm_kind(family: Family) -> Result<GlmKind> {
    Ok(match family {
        Family::Ridge => GlmKind::Ridge,
        Family::BinaryLogistic => GlmKind::Binary,
        Family::MulticlassLogistic { classes } => GlmKind::Multiclass { classes },
        Family::Gmm { .. } => return invalid("mixtures do not predict labels"),
    })
}

/// Fit on every point with its stored weight.
pub fn fit(ds: &WeightedDataset, spec: &ModelSpec, budget: &InnerBudget) -> Result<DVector<f64>> {
    Ok(InnerProblem::new(ds, spec)?.solve(&vec![1.0; ds.len()], None, budget)?.theta)
}

/// Predicted class per row of `features`: `σ(xᵀθ) ≥ 1/2` for binary
/// models, the largest score for multiclass ones.
pub fn predict_classes(spec: &ModelSpec, theta: &DVector<f64>, features: &DMatrix<f64>) -> Result<Vec<usize>> {
    let kind = glm_kind(spec.family)?;
    let n = features.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    let placeholder = WeightedDataset::unweighted(features.clone(), crate::data::Labels::Class(vec![0; n]))?;
    let glm = Glm::new(&placeholder, kind, spec.intercept)?;
    if theta.len() != glm.dim() {
        return invalid(format!("parameter length {} does not match model dimension {}", theta.len(), glm.dim()));
    }
    let scores = glm.scores(theta);
    Ok(match kind {
        GlmKind::Ridge => return invalid("ridge models do not predict classes"),
        GlmKind::Binary => scores.iter().map(|&s| usize::from(s >= 0.0)).collect(),
        GlmKind::Multiclass { .. } => scores
            .column_iter()
            .map(|c| crate::linalg::argmin(c.iter().map(|v| -v).enumerate()).expect("at least two classes"))
            .collect(),
    })
}

/// Fraction of points whose predicted class equals the label.
pub fn accuracy(spec: &ModelSpec, theta: &DVector<f64>, ds: &WeightedDataset) -> Result<f64> {
    let crate::data::Labels::Class(y) = ds.labels() else {
        return invalid("accuracy needs class labels");
    };
    if y.is_empty() {
        return invalid("accuracy of an empty data set");
    }
    let pred = predict_classes(spec, theta, ds.features())?;
    Ok(pred.iter().zip(y).filter(|(p, t)| p == t).count() as f64 / y.len() as f64)
}
