//! Replay-based continual learning and streaming runs. Each step trains on
//! the incoming data plus a `β`-weighted replay loss over the memory, then
//! updates the memory and evaluates on the test sets.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{BilevelSummarizer, ClassBalancedReservoir, ProxyConfig, Reservoir, StreamBuffer, Summarizer, UniformSummarizer};
use crate::data::{Labels, WeightedDataset};
use crate::error::{invalid, Result};
use crate::hypergrad::HypergradConfig;
use crate::models::{accuracy, fit, InnerBudget, ModelSpec};
use crate::select::SelectionConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioMode {
    /// One summary per task, shrunk to `⌊m/t⌋` points after task `t`.
    Continual,
    /// Merge-reduce buffer over batches.
    Streaming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MemoryMethod {
    /// No replay memory.
    None,
    Uniform,
    Reservoir,
    /// Class-balancing reservoir.
    Cbrs,
    Bilevel {
        #[serde(default)]
        selection: SelectionConfig,
        #[serde(default)]
        hypergrad: HypergradConfig,
        #[serde(default)]
        proxy: Option<ProxyConfig>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub mode: ScenarioMode,
    /// Weight `β` of the replay loss.
    pub replay_strength: f64,
    /// Memory size `m`.
    pub memory: usize,
    /// Buffer slots in streaming mode.
    #[serde(default = "default_slots")]
    pub slots: usize,
    pub model: ModelSpec,
    pub method: MemoryMethod,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub budget: InnerBudget,
}

fn default_slots() -> usize {
    1
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.replay_strength >= 0.0) {
            return invalid("replay strength must be nonnegative");
        }
        if self.mode == ScenarioMode::Streaming && (self.slots == 0 || self.memory < self.slots) {
            return invalid("streaming memory must hold at least one point per slot");
        }
        Ok(())
    }
}

/// Training batches (tasks in continual mode) and test sets. In continual
/// mode test set `τ` belongs to task `τ` and is evaluated once that task has
/// been seen; in streaming mode every test set is evaluated at every step.
#[derive(Debug, Clone)]
pub struct ScenarioData {
    pub batches: Vec<WeightedDataset>,
    pub tests: Vec<WeightedDataset>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetric {
    pub step: usize,
    pub task: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct ScenarioResult {
    pub rows: Vec<StepMetric>,
    /// Accuracy on each test set after the last step.
    pub final_accuracies: Vec<f64>,
    pub average_accuracy: f64,
    /// Replay memory after the last step.
    pub memory: Option<WeightedDataset>,
}

#[derive(Serialize)]
struct Summary<'a> {
    mode: ScenarioMode,
    method: &'a MemoryMethod,
    average_accuracy: f64,
    final_accuracies: &'a [f64],
    memory_size: usize,
}

impl ScenarioResult {
    /// `step,task,accuracy` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        for r in &self.rows {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W, cfg: &ScenarioConfig) -> Result<()> {
        let summary = Summary {
            mode: cfg.mode,
            method: &cfg.method,
            average_accuracy: self.average_accuracy,
            final_accuracies: &self.final_accuracies,
            memory_size: self.memory.as_ref().map_or(0, |m| m.len()),
        };
        serde_json::to_writer_pretty(out, &summary)?;
        Ok(())
    }
}

type Point = (Vec<f64>, usize);

enum Memory {
    Empty,
    Summaries(Box<dyn Summarizer>, Vec<WeightedDataset>),
    Buffer(Box<dyn Summarizer>, StreamBuffer),
    Reservoir(Reservoir<Point>),
    Cbrs(ClassBalancedReservoir<Point>),
}

fn points_to_dataset(points: &[Point], d: usize) -> Result<Option<WeightedDataset>> {
    if points.is_empty() {
        return Ok(None);
    }
    let features = DMatrix::from_row_iterator(points.len(), d, points.iter().flat_map(|(x, _)| x.iter().copied()));
    let labels = Labels::Class(points.iter().map(|(_, c)| *c).collect());
    Ok(Some(WeightedDataset::unweighted(features, labels)?))
}

fn points_of(ds: &WeightedDataset) -> Result<Vec<Point>> {
    let Labels::Class(y) = ds.labels() else {
        return invalid("scenarios need class labels");
    };
    Ok((0..ds.len())
        .map(|i| (ds.features().row(i).iter().copied().collect(), y[i]))
        .collect())
}

fn scaled(ds: &WeightedDataset, total: f64) -> Result<WeightedDataset> {
    let n = ds.len() as f64;
    ds.with_weights(vec![total / n; ds.len()])
}

impl Memory {
    fn new(cfg: &ScenarioConfig) -> Result<Self> {
        let summarizer: Box<dyn Summarizer> = match &cfg.method {
            MemoryMethod::None => return Ok(Memory::Empty),
            MemoryMethod::Reservoir => return Ok(Memory::Reservoir(Reservoir::new(cfg.memory, cfg.seed))),
            MemoryMethod::Cbrs => return Ok(Memory::Cbrs(ClassBalancedReservoir::new(cfg.memory, cfg.seed))),
            MemoryMethod::Uniform => Box::new(UniformSummarizer::new(cfg.seed)),
            MemoryMethod::Bilevel {
                selection,
                hypergrad,
                proxy,
            } => Box::new(BilevelSummarizer::new(
                cfg.model,
                *proxy,
                SelectionConfig {
                    seed: cfg.seed,
                    ..selection.clone()
                },
                *hypergrad,
                cfg.budget,
            )),
        };
        Ok(match cfg.mode {
            ScenarioMode::Continual => Memory::Summaries(summarizer, Vec::new()),
            ScenarioMode::Streaming => Memory::Buffer(summarizer, StreamBuffer::new(cfg.memory, cfg.slots, 1.0)?),
        })
    }

    /// Replay parts with their total loss weights.
    fn replay(&self, beta: f64, d: usize) -> Result<Vec<WeightedDataset>> {
        let whole = |m: Option<WeightedDataset>| -> Result<Vec<WeightedDataset>> {
            m.map(|m| scaled(&m, beta)).into_iter().collect()
        };
        match self {
            Memory::Empty => Ok(Vec::new()),
            Memory::Summaries(_, parts) => parts.iter().filter(|p| !p.is_empty()).map(|p| scaled(p, beta)).collect(),
            Memory::Buffer(_, buf) => whole(buf.memory()?),
            Memory::Reservoir(r) => whole(points_to_dataset(r.items(), d)?),
            Memory::Cbrs(r) => {
                let pts: Vec<Point> = r.items().iter().map(|(p, _)| p.clone()).collect();
                whole(points_to_dataset(&pts, d)?)
            }
        }
    }

    fn contents(&self, d: usize) -> Result<Option<WeightedDataset>> {
        let parts = self.replay(1.0, d)?;
        if parts.is_empty() {
            return Ok(None);
        }
        let refs: Vec<&WeightedDataset> = parts.iter().collect();
        let all = WeightedDataset::concat(&refs)?;
        let n = all.len();
        Ok(Some(all.with_weights(vec![1.0; n])?))
    }

    fn update(&mut self, batch: &WeightedDataset, step: usize, memory: usize) -> Result<()> {
        match self {
            Memory::Empty => {}
            Memory::Summaries(summarizer, parts) => {
                let size = memory / step;
                if size == 0 {
                    parts.push(batch.subset(&[]));
                    return Ok(());
                }
                let fresh = summarizer.summarize(batch, size)?;
                for p in parts.iter_mut() {
                    if p.len() > size {
                        *p = if summarizer.nested() {
                            p.subset(&(0..size).collect::<Vec<_>>())
                        } else {
                            summarizer.summarize(p, size)?
                        };
                    }
                }
                parts.push(fresh);
            }
            Memory::Buffer(summarizer, buf) => buf.insert(batch, summarizer.as_mut())?,
            Memory::Reservoir(r) => points_of(batch)?.into_iter().for_each(|p| r.offer(p)),
            Memory::Cbrs(r) => points_of(batch)?.into_iter().for_each(|p| {
                let c = p.1;
                r.offer(p, c)
            }),
        }
        Ok(())
    }
}

pub fn run_scenario(cfg: &ScenarioConfig, data: &ScenarioData) -> Result<ScenarioResult> {
    cfg.validate()?;
    if data.batches.is_empty() || data.tests.is_empty() {
        return invalid("a scenario needs at least one batch and one test set");
    }
    let d = data.batches[0].dim();
    let mut memory = Memory::new(cfg)?;
    let mut rows = Vec::new();
    let mut final_accuracies = vec![f64::NAN; data.tests.len()];
    for (t, batch) in data.batches.iter().enumerate() {
        let step = t + 1;
        let mut parts = vec![scaled(batch, 1.0)?];
        if cfg.replay_strength > 0.0 {
            parts.extend(memory.replay(cfg.replay_strength, d)?);
        }
        let refs: Vec<&WeightedDataset> = parts.iter().collect();
        let train = WeightedDataset::concat(&refs)?;
        let theta = fit(&train, &cfg.model, &cfg.budget)?;
        let visible = match cfg.mode {
            ScenarioMode::Continual => step.min(data.tests.len()),
            ScenarioMode::Streaming => data.tests.len(),
        };
        for (task, test) in data.tests[..visible].iter().enumerate() {
            let acc = accuracy(&cfg.model, &theta, test)?;
            final_accuracies[task] = acc;
            rows.push(StepMetric {
                step,
                task,
                accuracy: acc,
            });
        }
        memory.update(batch, step, cfg.memory)?;
        log::debug!("step {step}: memory holds {} points", memory.contents(d)?.map_or(0, |m| m.len()));
    }
    let seen: Vec<f64> = final_accuracies.iter().copied().filter(|a| !a.is_nan()).collect();
    let average_accuracy = seen.iter().sum::<f64>() / seen.len() as f64;
    Ok(ScenarioResult {
        rows,
        final_accuracies,
        average_accuracy,
        memory: memory.contents(d)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Family;

    fn task(classes: [usize; 2], centers: [[f64; 2]; 2], n: usize, shift: f64) -> WeightedDataset {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let jitter = ((i * 37 % 11) as f64 / 11.0 - 0.5) * 0.6 + shift;
            feats.extend([centers[c][0] + jitter, centers[c][1] - jitter]);
            labels.push(classes[c]);
        }
        WeightedDataset::unweighted(DMatrix::from_row_slice(n, 2, &feats), Labels::Class(labels)).unwrap()
    }

    fn two_tasks() -> ScenarioData {
        let a = [[-3.0, 3.0], [3.0, 3.0]];
        let b = [[-3.0, -3.0], [3.0, -3.0]];
        ScenarioData {
            batches: vec![task([0, 1], a, 40, 0.0), task([2, 3], b, 40, 0.0)],
            tests: vec![task([0, 1], a, 20, 0.1), task([2, 3], b, 20, 0.1)],
        }
    }

    fn config(method: MemoryMethod, beta: f64, memory: usize) -> ScenarioConfig {
        ScenarioConfig {
            mode: ScenarioMode::Continual,
            replay_strength: beta,
            memory,
            slots: 1,
            model: ModelSpec::new(Family::MulticlassLogistic { classes: 4 }, 1e-3).with_intercept(),
            method,
            seed: 0,
            budget: InnerBudget::default(),
        }
    }

    #[test]
    fn no_replay_forgets_first_task() {
        let res = run_scenario(&config(MemoryMethod::None, 0.0, 0), &two_tasks()).unwrap();
        assert!(res.rows[0].accuracy > 0.95);
        assert!(res.final_accuracies[0] < 0.1);
        assert!(res.final_accuracies[1] > 0.95);
    }

    #[test]
    fn full_memory_matches_joint_training() {
        let data = two_tasks();
        let cfg = config(MemoryMethod::Uniform, 1.0, 1000);
        let res = run_scenario(&cfg, &data).unwrap();
        let joint = WeightedDataset::concat(&[&scaled(&data.batches[0], 1.0).unwrap(), &scaled(&data.batches[1], 1.0).unwrap()]).unwrap();
        let theta = fit(&joint, &cfg.model, &cfg.budget).unwrap();
        for (t, test) in data.tests.iter().enumerate() {
            let acc = accuracy(&cfg.model, &theta, test).unwrap();
            assert!((acc - res.final_accuracies[t]).abs() <= 0.01);
        }
        assert_eq!(res.memory.unwrap().len(), 80);
    }

    #[test]
    fn csv_rows() {
        let res = run_scenario(&config(MemoryMethod::Reservoir, 1.0, 10), &two_tasks()).unwrap();
        let mut buf = Vec::new();
        res.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,task,accuracy\n1,0,"));
        assert_eq!(text.lines().count(), 4);
    }
}
