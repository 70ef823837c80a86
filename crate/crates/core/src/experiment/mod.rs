//! Config-driven experiments: for every method, subset size and seed, select
//! a subset of the training data, retrain from scratch on it and evaluate on
//! held-out data. Cells run on a bounded worker pool; a failed cell is
//! recorded and the rest of the run continues.
//!
//! The config is one JSON document, for example
//!
//! ```json
//! {
//!   "dataset": {"source": "libsvm", "path": "data/train.svm"},
//!   "test_fraction": 0.2,
//!   "standardize": true,
//!   "model": {"family": {"kind": "binary_logistic"}, "reg": 1e-3},
//!   "selection": {"variant": "forward", "weighted": true},
//!   "baselines": [{"method": "uniform"}, {"method": "kcenter"}],
//!   "sizes": [20, 50, 100],
//!   "seeds": [0, 1, 2],
//!   "metrics": ["test_accuracy"]
//! }
//! ```

pub mod report;

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::baselines::{run_baseline, BaselineMethod, BaselineSpec, FeatureSpace};
use crate::compsense::{dict_select, make_sparse_signals, measurement_errors, random_gaussian_baseline, read_matrix_csv, CompressedSensingProblem};
use crate::data::{make_gmm_synthetic, parse_libsvm, standardize, Labels, WeightedDataset};
use crate::error::{invalid, Error, Result};
use crate::hypergrad::HypergradConfig;
use crate::models::{accuracy, fit, InnerBudget, InnerProblem, Model, ModelSpec, OuterObjective};
use crate::proxy::{nystrom_features_from_gram, nystrom_fit, proxy_problem, read_gram, ProxyConfig, DEFAULT_EIG_FLOOR};
use crate::select::{forward_select, SelectionConfig};

pub use report::{emit_plotdata, CellFailure, PlotSeries, ResultRow, ResultTable, SCHEMA_VERSION};

/// Method name used for the bilevel selection rows.
pub const BILEVEL: &str = "bilevel";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSource {
    /// LIBSVM text file; relative paths resolve against the config file.
    Libsvm {
        path: PathBuf,
        #[serde(default)]
        dim: Option<usize>,
    },
    /// 2-D Gaussian mixture sample.
    GmmSynthetic { components: usize, n: usize, seed: u64 },
    /// Binary Gram matrix with one label per line in `labels`; points are
    /// represented by Nyström features with `landmarks` landmarks.
    Gram {
        path: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        landmarks: Option<usize>,
    },
    /// Sparse signals for measurement selection; requires `dictionary`.
    SparseSignals { n: usize, dim: usize, sparsity: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DictionarySource {
    /// Unit-norm Gaussian rows.
    Gaussian { size: usize, seed: u64 },
    /// Headerless CSV, one measurement vector per row.
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    TestAccuracy,
    /// Mean per-point loss on the evaluation data.
    OuterLoss,
    /// `|L_sub − L_full| / |L_full|` for the mean evaluation loss `L`
    /// (negative log-likelihood for mixtures).
    RelativeNllError,
    /// Largest squared reconstruction error over evaluation signals.
    ReconstructionError,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::TestAccuracy => "test_accuracy",
            Metric::OuterLoss => "outer_loss",
            Metric::RelativeNllError => "relative_nll_error",
            Metric::ReconstructionError => "reconstruction_error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineEntry {
    pub method: BaselineMethod,
    #[serde(default)]
    pub space: FeatureSpace,
}

impl BaselineEntry {
    pub fn name(&self) -> String {
        let base = match self.method {
            BaselineMethod::Uniform => "uniform",
            BaselineMethod::Kmeanspp => "kmeanspp",
            BaselineMethod::Kcenter => "kcenter",
        };
        match self.space {
            FeatureSpace::Raw => base.to_string(),
            FeatureSpace::Proxy(_) => format!("{base}_proxy"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputPaths {
    pub csv: PathBuf,
    pub summary: PathBuf,
    /// Directory for per-metric plot series.
    pub plots: PathBuf,
}

impl Default for OutputPaths {
    fn default() -> Self {
        Self {
            csv: "results.csv".into(),
            summary: "summary.json".into(),
            plots: "plots".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    /// Standardize features with statistics of the training split.
    #[serde(default)]
    pub standardize: bool,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub proxy: Option<ProxyConfig>,
    #[serde(default)]
    pub dictionary: Option<DictionarySource>,
    #[serde(default = "default_recovery_reg")]
    pub recovery_reg: f64,
    /// Run the bilevel method; baselines run regardless.
    #[serde(default = "default_true")]
    pub bilevel: bool,
    #[serde(default)]
    pub selection: SelectionConfig,
    #[serde(default)]
    pub hypergrad: HypergradConfig,
    #[serde(default)]
    pub inner_budget: InnerBudget,
    #[serde(default)]
    pub baselines: Vec<BaselineEntry>,
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub metrics: Vec<Metric>,
    #[serde(default)]
    pub output: OutputPaths,
    /// Worker threads; defaults to the available parallelism.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Directory that relative input paths resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_recovery_reg() -> f64 {
    1e-6
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// Reads a JSON config; relative paths inside resolve against its
    /// directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        cfg.validate()?;
        Ok(cfg)
    }

    fn is_sensing(&self) -> bool {
        matches!(self.dataset, DatasetSource::SparseSignals { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() || self.sizes.windows(2).any(|p| p[0] >= p[1]) {
            return invalid("sizes must be nonempty and strictly increasing");
        }
        if self.sizes[0] == 0 {
            return invalid("sizes must be positive");
        }
        if self.seeds.is_empty() {
            return invalid("at least one seed is required");
        }
        if self.metrics.is_empty() {
            return invalid("at least one metric is required");
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return invalid("test_fraction must be in [0, 1)");
        }
        if self.workers == Some(0) {
            return invalid("workers must be positive");
        }
        if self.is_sensing() {
            if self.dictionary.is_none() {
                return invalid("sparse_signals needs a dictionary");
            }
            if self.metrics.iter().any(|m| *m != Metric::ReconstructionError) {
                return invalid("sparse_signals supports only reconstruction_error");
            }
        } else {
            if self.model.is_none() {
                return invalid("a model is required");
            }
            if self.metrics.contains(&Metric::ReconstructionError) {
                return invalid("reconstruction_error needs sparse_signals data");
            }
        }
        self.hypergrad.validate()
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        match &self.base_dir {
            Some(dir) if p.is_relative() => dir.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn methods(&self) -> Vec<Method> {
        let mut out = Vec::new();
        if self.bilevel {
            out.push(Method::Bilevel);
        }
        out.extend(self.baselines.iter().map(|b| Method::Baseline(*b)));
        out
    }
}

#[derive(Debug, Clone, Copy)]
enum Method {
    Bilevel,
    Baseline(BaselineEntry),
}

impl Method {
    fn name(&self) -> String {
        match self {
            Method::Bilevel => BILEVEL.to_string(),
            Method::Baseline(b) => b.name(),
        }
    }
}

fn read_labels(path: &Path) -> Result<Labels> {
    let text = std::fs::read_to_string(path)?;
    let values: Vec<&str> = text.split_whitespace().collect();
    if let Ok(classes) = values.iter().map(|v| v.parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>() {
        return Ok(Labels::Class(classes));
    }
    let reals = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: i + 1,
                msg: format!("label {l:?}: {e}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Labels::Real(reals))
}

struct Prepared {
    train: WeightedDataset,
    eval: WeightedDataset,
    /// Mean evaluation loss of the model trained on all training data.
    full_loss: Option<f64>,
    dictionary: Option<DMatrix<f64>>,
}

fn load(cfg: &ExperimentConfig) -> Result<Prepared> {
    let ds = match &cfg.dataset {
        DatasetSource::Libsvm { path, dim } => parse_libsvm(BufReader::new(File::open(cfg.resolve(path))?), *dim)?,
        DatasetSource::GmmSynthetic { components, n, seed } => make_gmm_synthetic(*components, *n, *seed)?,
        DatasetSource::Gram { path, labels, landmarks } => {
            let gram = read_gram(BufReader::new(File::open(cfg.resolve(path))?))?;
            let labels = read_labels(&cfg.resolve(labels))?;
            let q = landmarks.unwrap_or(gram.nrows()).min(gram.nrows());
            let (_, features) = nystrom_features_from_gram(&gram, q, cfg.split_seed, DEFAULT_EIG_FLOOR)?;
            WeightedDataset::unweighted(features, labels)?
        }
        DatasetSource::SparseSignals { n, dim, sparsity, seed } => {
            WeightedDataset::unweighted(make_sparse_signals(*n, *dim, *sparsity, *seed)?, Labels::None)?
        }
    };
    let (train, test) = ds.split(cfg.test_fraction, cfg.split_seed);
    let (train, eval) = if cfg.standardize {
        let (train, tr) = standardize(&train)?;
        let eval = if test.is_empty() { train.clone() } else { tr.apply(&test)? };
        (train, eval)
    } else {
        let eval = if test.is_empty() { train.clone() } else { test };
        (train, eval)
    };
    let dictionary = match &cfg.dictionary {
        None => None,
        Some(DictionarySource::Gaussian { size, seed }) => Some(random_gaussian_baseline(train.dim(), *size, *seed)),
        Some(DictionarySource::Csv { path }) => Some(read_matrix_csv(BufReader::new(File::open(cfg.resolve(path))?))?),
    };
    let full_loss = match (&cfg.model, cfg.metrics.contains(&Metric::RelativeNllError)) {
        (Some(spec), true) => {
            let theta = fit(&train, spec, &cfg.inner_budget)?;
            Some(mean_loss(&eval, spec, &theta)?)
        }
        _ => None,
    };
    Ok(Prepared {
        train,
        eval,
        full_loss,
        dictionary,
    })
}

fn mean_loss(ds: &WeightedDataset, spec: &ModelSpec, theta: &DVector<f64>) -> Result<f64> {
    let losses = Model::new(ds, spec.family, spec.intercept)?.losses(theta);
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Indices and retraining weights for one cell.
fn select_model(cfg: &ExperimentConfig, data: &Prepared, method: &Method, size: usize, seed: u64) -> Result<(Vec<usize>, Vec<f64>)> {
    let train = &data.train;
    let n = train.len();
    if size > n {
        return invalid(format!("size {size} exceeds the {n} training points"));
    }
    // a summary as large as the data is the data itself
    if size == n {
        return Ok(((0..n).collect(), train.weights().to_vec()));
    }
    match method {
        Method::Baseline(b) => {
            let idx = run_baseline(
                train,
                &BaselineSpec {
                    method: b.method,
                    space: b.space,
                    size,
                    seed,
                },
            )?;
            let w = idx.iter().map(|&i| train.weights()[i]).collect();
            Ok((idx, w))
        }
        Method::Bilevel => {
            let spec = cfg.model.as_ref().expect("validated");
            let budget = InnerBudget { seed, ..cfg.inner_budget };
            let sel = SelectionConfig {
                budget: size,
                seed,
                ..cfg.selection.clone()
            };
            let (inner, outer) = match &cfg.proxy {
                Some(p) => {
                    let map = nystrom_fit(train, p.landmarks.min(n), &p.kernel, seed)?;
                    (proxy_problem(train, &map, spec)?, OuterObjective::new(&map.transform(train)?, spec)?)
                }
                None => (InnerProblem::new(train, spec)?, OuterObjective::new(train, spec)?),
            };
            let state = forward_select(&inner, &outer, &sel, &cfg.hypergrad, &budget)?;
            let w = state.selected.iter().map(|&i| state.weights[i] * train.weights()[i]).collect();
            Ok((state.selected, w))
        }
    }
}

fn run_model_cell(cfg: &ExperimentConfig, data: &Prepared, method: &Method, size: usize, seed: u64) -> Result<Vec<(Metric, f64)>> {
    let spec = cfg.model.as_ref().expect("validated");
    let (idx, w) = select_model(cfg, data, method, size, seed)?;
    let subset = data.train.subset(&idx).with_weights(w)?;
    let theta = fit(&subset, spec, &InnerBudget { seed, ..cfg.inner_budget })?;
    let mut out = Vec::new();
    for &m in &cfg.metrics {
        let v = match m {
            Metric::TestAccuracy => accuracy(spec, &theta, &data.eval)?,
            Metric::OuterLoss => mean_loss(&data.eval, spec, &theta)?,
            Metric::RelativeNllError => {
                let full = data.full_loss.expect("computed when requested");
                (mean_loss(&data.eval, spec, &theta)? - full).abs() / full.abs()
            }
            Metric::ReconstructionError => unreachable!("validated"),
        };
        out.push((m, v));
    }
    Ok(out)
}

fn run_sensing_cell(cfg: &ExperimentConfig, data: &Prepared, method: &Method, size: usize, seed: u64) -> Result<Vec<(Metric, f64)>> {
    let dict = data.dictionary.as_ref().expect("validated");
    if size > dict.nrows() {
        return invalid(format!("size {size} exceeds the {} dictionary rows", dict.nrows()));
    }
    let idx = match method {
        Method::Bilevel => {
            let problem = CompressedSensingProblem::new(data.train.features().clone(), dict.clone(), cfg.recovery_reg, None)?;
            let sel = SelectionConfig {
                seed,
                ..cfg.selection.clone()
            };
            dict_select(&problem, size, &sel, &cfg.hypergrad)?
        }
        Method::Baseline(b) => {
            let rows = WeightedDataset::unweighted(dict.clone(), Labels::None)?;
            run_baseline(
                &rows,
                &BaselineSpec {
                    method: b.method,
                    space: b.space,
                    size,
                    seed,
                },
            )?
        }
    };
    let measurements = dict.select_rows(&idx);
    let errors = measurement_errors(data.eval.features(), &measurements, cfg.recovery_reg)?;
    Ok(vec![(Metric::ReconstructionError, errors.into_iter().fold(0.0, f64::max))])
}

/// Runs every (method, size, seed) cell. Rows come out in config order
/// regardless of scheduling.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultTable> {
    use rayon::prelude::*;

    cfg.validate()?;
    let data = load(cfg)?;
    let methods = cfg.methods();
    let cells: Vec<(Method, usize, u64)> = methods
        .iter()
        .flat_map(|m| cfg.sizes.iter().flat_map(move |&s| cfg.seeds.iter().map(move |&seed| (*m, s, seed))))
        .collect();
    let workers = cfg
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidInput(format!("worker pool: {e}")))?;
    let outcomes: Vec<Result<Vec<(Metric, f64)>>> = pool.install(|| {
        cells
            .par_iter()
            .map(|(m, size, seed)| {
                log::info!("cell {} size {size} seed {seed}", m.name());
                if cfg.is_sensing() {
                    run_sensing_cell(cfg, &data, m, *size, *seed)
                } else {
                    run_model_cell(cfg, &data, m, *size, *seed)
                }
            })
            .collect()
    });
    let mut table = ResultTable::default();
    for ((m, size, seed), outcome) in cells.iter().zip(outcomes) {
        match outcome {
            Ok(values) => table.rows.extend(values.into_iter().map(|(metric, value)| ResultRow {
                method: m.name(),
                size: *size,
                seed: *seed,
                metric: metric.name().to_string(),
                value,
            })),
            Err(e) => {
                log::warn!("cell {} size {size} seed {seed} failed: {e}", m.name());
                table.failures.push(CellFailure {
                    method: m.name(),
                    size: *size,
                    seed: *seed,
                    error: e.to_string(),
                });
            }
        }
    }
    Ok(table)
}
