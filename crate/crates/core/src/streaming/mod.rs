//! Fixed-capacity summaries of data streams: a merge-reduce buffer of
//! coreset slots, reservoir baselines and a continual-learning / streaming
//! scenario runner.

pub mod reservoir;
pub mod scenario;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::WeightedDataset;
use crate::error::{invalid, Error, Result};
use crate::hypergrad::HypergradConfig;
use crate::models::{InnerBudget, InnerProblem, ModelSpec, OuterObjective};
use crate::objective::BilevelObjective;
use crate::proxy::nystrom_fit;
use crate::select::{greedy_select, Restriction, SelectionConfig, Variant};

pub use crate::proxy::ProxyConfig;
pub use reservoir::{ClassBalancedReservoir, Reservoir};
pub use scenario::{run_scenario, MemoryMethod, ScenarioConfig, ScenarioData, ScenarioMode, ScenarioResult, StepMetric};

/// Compresses a weighted data set to a given size.
pub trait Summarizer {
    /// At most `size` points of `data`, in selection order, with unit
    /// weights. The input weights weight the point losses.
    fn summarize(&mut self, data: &WeightedDataset, size: usize) -> Result<WeightedDataset>;

    /// Whether every prefix of a summary is itself the summary of that size.
    fn nested(&self) -> bool {
        true
    }
}

fn unit(ds: WeightedDataset) -> Result<WeightedDataset> {
    let n = ds.len();
    ds.with_weights(vec![1.0; n])
}

/// Uniform subsample in random order.
#[derive(Debug, Clone)]
pub struct UniformSummarizer {
    rng: ChaCha8Rng,
}

impl UniformSummarizer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Summarizer for UniformSummarizer {
    fn summarize(&mut self, data: &WeightedDataset, size: usize) -> Result<WeightedDataset> {
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut self.rng);
        idx.truncate(size);
        unit(data.subset(&idx))
    }
}

/// Unweighted greedy bilevel selection where the outer objective is the
/// weighted loss on the data being summarized.
#[derive(Debug, Clone)]
pub struct BilevelSummarizer {
    pub model: ModelSpec,
    pub proxy: Option<ProxyConfig>,
    pub selection: SelectionConfig,
    pub hypergrad: HypergradConfig,
    pub budget: InnerBudget,
    calls: u64,
}

impl BilevelSummarizer {
    pub fn new(model: ModelSpec, proxy: Option<ProxyConfig>, selection: SelectionConfig, hypergrad: HypergradConfig, budget: InnerBudget) -> Self {
        Self {
            model,
            proxy,
            selection,
            hypergrad,
            budget,
            calls: 0,
        }
    }
}

impl Summarizer for BilevelSummarizer {
    fn summarize(&mut self, data: &WeightedDataset, size: usize) -> Result<WeightedDataset> {
        if size == 0 {
            return invalid("summary size must be at least 1");
        }
        let seed = self.selection.seed.wrapping_add(self.calls);
        self.calls += 1;
        if data.len() <= size {
            return unit(data.clone());
        }
        let mapped = match &self.proxy {
            Some(p) => nystrom_fit(data, p.landmarks.min(data.len()), &p.kernel, seed)?.transform(data)?,
            None => data.clone(),
        };
        let inner = InnerProblem::new(&mapped, &self.model)?;
        let outer = OuterObjective::new(&mapped, &self.model)?;
        let cfg = SelectionConfig {
            budget: size,
            weighted: false,
            seed,
            ..self.selection.clone()
        };
        let mut obj = BilevelObjective::new(&inner, &outer, self.hypergrad, self.budget);
        let state = greedy_select(&mut obj, &cfg, &Restriction::default())?;
        unit(data.subset(&state.selected))
    }

    fn nested(&self) -> bool {
        self.selection.variant != Variant::Regularized
    }
}

/// One buffer slot: a coreset and the mass of stream data it stands for.
#[derive(Debug, Clone)]
pub struct Slot {
    pub coreset: WeightedDataset,
    pub beta: f64,
}

/// Merge-reduce buffer with `s` slots of `⌊m/s⌋` points.
#[derive(Debug, Clone)]
pub struct StreamBuffer {
    slots: Vec<Slot>,
    capacity: usize,
    slot_count: usize,
    default_beta: f64,
    peak: usize,
}

/// Zero-based index `k` of the slot pair `(k, k+1)` to merge, given the
/// masses of `s + 1` slots: the last pair when `s = 1` or `β_{s−1} > β_s`
/// (one-based), else the first pair of equal masses, else the last pair.
pub fn select_index(betas: &[f64]) -> usize {
    assert!(betas.len() >= 2, "select_index needs at least two slots");
    let s = betas.len() - 1;
    let last = s - 1;
    if s == 1 || betas[s - 2] > betas[s - 1] {
        return last;
    }
    (0..s).find(|&i| betas[i] == betas[i + 1]).unwrap_or(last)
}

impl StreamBuffer {
    pub fn new(capacity: usize, slot_count: usize, default_beta: f64) -> Result<Self> {
        if slot_count == 0 || capacity < slot_count {
            return invalid(format!("capacity {capacity} must be at least the slot count {slot_count} (≥ 1)"));
        }
        if !(default_beta > 0.0) {
            return invalid("default slot mass must be positive");
        }
        Ok(Self {
            slots: Vec::with_capacity(slot_count + 1),
            capacity,
            slot_count,
            default_beta,
            peak: 0,
        })
    }

    pub fn slot_size(&self) -> usize {
        self.capacity / self.slot_count
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn betas(&self) -> Vec<f64> {
        self.slots.iter().map(|s| s.beta).collect()
    }

    /// Stored points.
    pub fn len(&self) -> usize {
        self.slots.iter().map(|s| s.coreset.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Most points held at any instant, including the transient extra slot.
    pub fn peak_len(&self) -> usize {
        self.peak
    }

    /// All stored points with unit weights, or `None` when empty.
    pub fn memory(&self) -> Result<Option<WeightedDataset>> {
        if self.slots.is_empty() {
            return Ok(None);
        }
        let parts: Vec<&WeightedDataset> = self.slots.iter().map(|s| &s.coreset).collect();
        Ok(Some(WeightedDataset::concat(&parts)?))
    }

    /// Compresses `batch` into a new slot and, if that overflows the slot
    /// count, merges the pair chosen by [`select_index`] by summarizing
    /// their union with losses weighted by the slot masses. On error the
    /// buffer is unchanged.
    pub fn insert<S: Summarizer + ?Sized>(&mut self, batch: &WeightedDataset, summarizer: &mut S) -> Result<()> {
        let m_s = self.slot_size();
        let wrap = |e: Error| Error::Summarizer(Box::new(e));
        let fresh = summarizer.summarize(batch, m_s).map_err(wrap)?;
        if fresh.len() > m_s {
            return Err(wrap(Error::InvalidInput(format!(
                "summarizer returned {} points for a slot of {m_s}",
                fresh.len()
            ))));
        }
        let mut betas = self.betas();
        betas.push(self.default_beta);
        self.peak = self.peak.max(self.len() + fresh.len());
        if betas.len() <= self.slot_count {
            self.slots.push(Slot {
                coreset: fresh,
                beta: self.default_beta,
            });
            return Ok(());
        }
        let k = select_index(&betas);
        let extra = Slot {
            coreset: fresh,
            beta: self.default_beta,
        };
        let (merged, beta) = {
            let get = |i: usize| if i < self.slots.len() { &self.slots[i] } else { &extra };
            let (a, b) = (get(k), get(k + 1));
            let scaled = |s: &Slot| {
                let w = s.coreset.weights().iter().map(|v| v * s.beta).collect();
                s.coreset.with_weights(w)
            };
            let union = WeightedDataset::concat(&[&scaled(a)?, &scaled(b)?])?;
            (summarizer.summarize(&union, m_s).map_err(wrap)?, a.beta + b.beta)
        };
        if merged.len() > m_s {
            return Err(wrap(Error::InvalidInput(format!(
                "summarizer returned {} points for a slot of {m_s}",
                merged.len()
            ))));
        }
        self.slots.push(extra);
        self.slots[k] = Slot { coreset: merged, beta };
        self.slots.remove(k + 1);
        Ok(())
    }
}
