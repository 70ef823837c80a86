//! Datasets: dense feature matrices with labels and nonnegative per-point
//! weights, LIBSVM ingestion, standardization and the synthetic generators
//! used by the experiments.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, RowDVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Per-row supervision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Labels {
    None,
    /// Integer class ids in `0..classes`.
    Class(Vec<usize>),
    /// Real targets (regression, or soft binary labels in `[0, 1]`).
    Real(Vec<f64>),
    /// Soft class distributions, one row per point.
    Soft(DMatrix<f64>),
}

impl Labels {
    pub fn len(&self) -> Option<usize> {
        match self {
            Labels::None => None,
            Labels::Class(v) => Some(v.len()),
            Labels::Real(v) => Some(v.len()),
            Labels::Soft(m) => Some(m.nrows()),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len().unwrap_or(0) == 0
    }

    /// Number of classes implied by the labels (max id + 1, or soft width).
    pub fn num_classes(&self) -> usize {
        match self {
            Labels::Class(v) => v.iter().max().map_or(0, |m| m + 1),
            Labels::Soft(m) => m.ncols(),
            _ => 0,
        }
    }

    fn select(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::None => Labels::None,
            Labels::Class(v) => Labels::Class(idx.iter().map(|&i| v[i]).collect()),
            Labels::Real(v) => Labels::Real(idx.iter().map(|&i| v[i]).collect()),
            Labels::Soft(m) => Labels::Soft(m.select_rows(idx)),
        }
    }

    fn label_string(&self, i: usize) -> String {
        match self {
            Labels::None => String::new(),
            Labels::Class(v) => v[i].to_string(),
            Labels::Real(v) => v[i].to_string(),
            Labels::Soft(m) => m
                .row(i)
                .iter()
                .map(|p| p.to_string())
                .collect::<Vec<_>>()
                .join(";"),
        }
    }
}

/// Feature matrix (n × d), labels and nonnegative weights.
///
/// Rows with weight 0 are not part of the summary. Construction validates
/// that features are finite, weights are nonnegative and label length
/// matches the row count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedDataset {
    features: DMatrix<f64>,
    labels: Labels,
    weights: Vec<f64>,
}

impl WeightedDataset {
    pub fn new(features: DMatrix<f64>, labels: Labels, weights: Vec<f64>) -> Result<Self> {
        let n = features.nrows();
        if weights.len() != n {
            return invalid(format!("{} weights for {} rows", weights.len(), n));
        }
        if let Some(len) = labels.len() {
            if len != n {
                return invalid(format!("{len} labels for {n} rows"));
            }
        }
        if features.iter().any(|v| !v.is_finite()) {
            return invalid("features contain NaN or infinite entries");
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return invalid("weights must be finite and nonnegative");
        }
        Ok(Self {
            features,
            labels,
            weights,
        })
    }

    /// Unit weights.
    pub fn unweighted(features: DMatrix<f64>, labels: Labels) -> Result<Self> {
        let n = features.nrows();
        Self::new(features, labels, vec![1.0; n])
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        Self::new(self.features.clone(), self.labels.clone(), weights)
    }

    pub fn with_labels(&self, labels: Labels) -> Result<Self> {
        Self::new(self.features.clone(), labels, self.weights.clone())
    }

    /// Rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> WeightedDataset {
        WeightedDataset {
            features: self.features.select_rows(idx),
            labels: self.labels.select(idx),
            weights: idx.iter().map(|&i| self.weights[i]).collect(),
        }
    }

    /// Stacks datasets with matching feature dimension and label kind.
    pub fn concat(parts: &[&WeightedDataset]) -> Result<WeightedDataset> {
        let Some(first) = parts.first() else {
            return invalid("cannot concatenate zero datasets");
        };
        let d = first.dim();
        let n: usize = parts.iter().map(|p| p.len()).sum();
        let mut features = DMatrix::zeros(n, d);
        let mut weights = Vec::with_capacity(n);
        let mut row = 0;
        for p in parts {
            if p.dim() != d {
                return invalid(format!("dimension mismatch: {} vs {}", p.dim(), d));
            }
            features.rows_mut(row, p.len()).copy_from(&p.features);
            weights.extend_from_slice(&p.weights);
            row += p.len();
        }
        let labels = match &first.labels {
            Labels::None => Labels::None,
            Labels::Class(_) => {
                let mut out = Vec::with_capacity(n);
                for p in parts {
                    match &p.labels {
                        Labels::Class(v) => out.extend_from_slice(v),
                        _ => return invalid("mixed label kinds in concat"),
                    }
                }
                Labels::Class(out)
            }
            Labels::Real(_) => {
                let mut out = Vec::with_capacity(n);
                for p in parts {
                    match &p.labels {
                        Labels::Real(v) => out.extend_from_slice(v),
                        _ => return invalid("mixed label kinds in concat"),
                    }
                }
                Labels::Real(out)
            }
            Labels::Soft(m0) => {
                let c = m0.ncols();
                let mut out = DMatrix::zeros(n, c);
                let mut r = 0;
                for p in parts {
                    match &p.labels {
                        Labels::Soft(m) if m.ncols() == c => {
                            out.rows_mut(r, m.nrows()).copy_from(m);
                            r += m.nrows();
                        }
                        _ => return invalid("mixed label kinds in concat"),
                    }
                }
                Labels::Soft(out)
            }
        };
        WeightedDataset::new(features, labels, weights)
    }

    /// Seeded random split into `(train, test)` with `round(frac·n)` test rows.
    pub fn split(&self, test_fraction: f64, seed: u64) -> (WeightedDataset, WeightedDataset) {
        let n = self.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((n as f64) * test_fraction).round() as usize;
        let (test, train) = idx.split_at(n_test.min(n));
        let mut train = train.to_vec();
        let mut test = test.to_vec();
        train.sort_unstable();
        test.sort_unstable();
        (self.subset(&train), self.subset(&test))
    }

    /// CSV export: header `x0,...,x{d-1},label,weight`, one point per line.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        header.push("weight".into());
        wtr.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.features.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels.label_string(i));
            rec.push(self.weights[i].to_string());
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// A batch of a data stream with its position in the stream.
#[derive(Debug, Clone)]
pub struct StreamBatch {
    pub dataset: WeightedDataset,
    pub sequence_index: usize,
}

/// Parses LIBSVM sparse text (`label idx:val ...`, 1-based indices).
///
/// Integer labels are remapped to `0..c` in sorted order, so `{-1, +1}` and
/// `{0, 1}` both become `{0, 1}`. Non-integer labels are kept as real
/// targets. Without `dim_hint` the dimension is the largest index seen.
pub fn parse_libsvm<R: BufRead>(reader: R, dim_hint: Option<usize>) -> Result<WeightedDataset> {
    let mut raw_labels = Vec::new();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut max_index = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = lineno + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: line_no, msg };
        let mut tokens = content.split_whitespace();
        let label_tok = tokens.next().expect("non-empty line has a token");
        let label: f64 = label_tok
            .parse()
            .map_err(|_| perr(format!("invalid label {label_tok:?}")))?;
        let mut entries = Vec::new();
        for tok in tokens {
            let (i, v) = tok
                .split_once(':')
                .ok_or_else(|| perr(format!("expected index:value, got {tok:?}")))?;
            let idx: usize = i
                .parse()
                .map_err(|_| perr(format!("invalid index {i:?}")))?;
            if idx == 0 {
                return Err(perr("indices are 1-based".into()));
            }
            let val: f64 = v
                .parse()
                .map_err(|_| perr(format!("invalid value {v:?}")))?;
            if !val.is_finite() {
                return Err(perr(format!("non-finite value {v:?}")));
            }
            if let Some(d) = dim_hint {
                if idx > d {
                    return Err(perr(format!("index {idx} exceeds dimension {d}")));
                }
            }
            max_index = max_index.max(idx);
            entries.push((idx - 1, val));
        }
        raw_labels.push(label);
        rows.push(entries);
    }
    let d = dim_hint.unwrap_or(max_index);
    let n = rows.len();
    let mut features = DMatrix::zeros(n, d);
    for (r, entries) in rows.iter().enumerate() {
        for &(j, v) in entries {
            features[(r, j)] = v;
        }
    }
    let labels = if raw_labels.iter().all(|l| l.fract() == 0.0) {
        let mut distinct: Vec<i64> = raw_labels.iter().map(|&l| l as i64).collect();
        distinct.sort_unstable();
        distinct.dedup();
        Labels::Class(
            raw_labels
                .iter()
                .map(|&l| distinct.binary_search(&(l as i64)).expect("label present"))
                .collect(),
        )
    } else {
        Labels::Real(raw_labels)
    };
    WeightedDataset::unweighted(features, labels)
}

/// Per-column affine transform produced by [`standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub stdev: Vec<f64>,
}

impl Standardizer {
    /// Applies the stored transform; zero-variance columns map to 0.
    pub fn apply(&self, ds: &WeightedDataset) -> Result<WeightedDataset> {
        if ds.dim() != self.mean.len() {
            return invalid(format!(
                "dimension {} does not match transform dimension {}",
                ds.dim(),
                self.mean.len()
            ));
        }
        let mut f = ds.features.clone();
        for (j, mut col) in f.column_iter_mut().enumerate() {
            let (m, s) = (self.mean[j], self.stdev[j]);
            for v in col.iter_mut() {
                *v = if s > 0.0 { (*v - m) / s } else { 0.0 };
            }
        }
        WeightedDataset::new(f, ds.labels.clone(), ds.weights.clone())
    }
}

/// Zero mean, unit population stdev per column.
pub fn standardize(ds: &WeightedDataset) -> Result<(WeightedDataset, Standardizer)> {
    let n = ds.len();
    if n < 2 {
        return invalid("standardize needs at least 2 rows");
    }
    let mut mean = Vec::with_capacity(ds.dim());
    let mut stdev = Vec::with_capacity(ds.dim());
    for col in ds.features.column_iter() {
        let m = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        let s = var.sqrt();
        // relative cutoff so that rounding noise in a constant column stays zero
        let s = if s <= 1e-12 * m.abs().max(1.0) { 0.0 } else { s };
        mean.push(m);
        stdev.push(s);
    }
    let tr = Standardizer { mean, stdev };
    Ok((tr.apply(ds)?, tr))
}

/// 2-D points from a `k`-component Gaussian mixture with unit covariances.
///
/// Component means sit on a circle of radius 4 (at the origin for `k = 1`);
/// mixture weights are proportional to `1, 2, ..., k` and every component
/// receives at least one point. Labels are component ids.
pub fn make_gmm_synthetic(k: usize, n: usize, seed: u64) -> Result<WeightedDataset> {
    if k == 0 || n < k {
        return invalid(format!("need k >= 1 and n >= k (k = {k}, n = {n})"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<[f64; 2]> = (0..k)
        .map(|j| {
            if k == 1 {
                [0.0, 0.0]
            } else {
                let a = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
                [4.0 * a.cos(), 4.0 * a.sin()]
            }
        })
        .collect();
    let total: f64 = (1..=k).map(|j| j as f64).sum();
    let mut comps: Vec<usize> = (0..k).collect();
    for _ in k..n {
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut c = k - 1;
        for j in 0..k {
            acc += (j + 1) as f64;
            if u < acc {
                c = j;
                break;
            }
        }
        comps.push(c);
    }
    comps.shuffle(&mut rng);
    let mut features = DMatrix::zeros(n, 2);
    for (i, &c) in comps.iter().enumerate() {
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        features.set_row(i, &RowDVector::from_row_slice(&[means[c][0] + z0, means[c][1] + z1]));
    }
    WeightedDataset::unweighted(features, Labels::Class(comps))
}

/// Subsamples each task to `keep_counts[t]` rows (seeded, original order
/// kept), concatenates the tasks in order and slices into batches.
pub fn make_imbalanced_stream(
    tasks: &[WeightedDataset],
    keep_counts: &[usize],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<StreamBatch>> {
    if tasks.is_empty() {
        return invalid("empty task list");
    }
    if keep_counts.len() != tasks.len() {
        return invalid("one keep count per task is required");
    }
    if batch_size == 0 {
        return invalid("batch size must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = Vec::with_capacity(tasks.len());
    for (t, (task, &keep)) in tasks.iter().zip(keep_counts).enumerate() {
        if keep > task.len() {
            return invalid(format!(
                "task {t}: keep count {keep} exceeds task size {}",
                task.len()
            ));
        }
        let mut idx: Vec<usize> = (0..task.len()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(keep);
        idx.sort_unstable();
        kept.push(task.subset(&idx));
    }
    let refs: Vec<&WeightedDataset> = kept.iter().collect();
    let all = WeightedDataset::concat(&refs)?;
    let n = all.len();
    let mut batches = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        let idx: Vec<usize> = (start..end).collect();
        batches.push(StreamBatch {
            dataset: all.subset(&idx),
            sequence_index: batches.len(),
        });
        start = end;
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(ds: &WeightedDataset, j: usize) -> Vec<f64> {
        ds.features().column(j).iter().copied().collect()
    }

    #[test]
    fn libsvm_basic_row() {
        let ds = parse_libsvm("+1 1:0.5 3:2.0\n-1 2:1\n".as_bytes(), Some(3)).unwrap();
        assert_eq!(ds.features().row(0).iter().copied().collect::<Vec<_>>(), vec![0.5, 0.0, 2.0]);
        assert_eq!(ds.labels(), &Labels::Class(vec![1, 0]));
        assert_eq!(ds.weights(), &[1.0, 1.0]);
    }

    #[test]
    fn libsvm_label_only_line() {
        let ds = parse_libsvm("-1\n+1 1:1\n".as_bytes(), Some(2)).unwrap();
        assert_eq!(ds.features().row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
        assert_eq!(ds.labels(), &Labels::Class(vec![0, 1]));
    }

    #[test]
    fn libsvm_zero_one_labels() {
        let ds = parse_libsvm("0 1:1\n1 1:2\n".as_bytes(), None).unwrap();
        assert_eq!(ds.labels(), &Labels::Class(vec![0, 1]));
        assert_eq!(ds.dim(), 1);
    }

    #[test]
    fn libsvm_malformed() {
        match parse_libsvm("abc 1:x".as_bytes(), None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse_libsvm("1 1:1\n1 2:x\n".as_bytes(), None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn libsvm_index_beyond_hint() {
        assert!(matches!(
            parse_libsvm("1 4:1.0".as_bytes(), Some(3)),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn standardize_examples() {
        let f = DMatrix::from_row_slice(2, 2, &[1.0, 5.0, 3.0, 5.0]);
        let ds = WeightedDataset::unweighted(f, Labels::None).unwrap();
        let (out, tr) = standardize(&ds).unwrap();
        assert_eq!(col(&out, 0), vec![-1.0, 1.0]);
        assert_eq!(col(&out, 1), vec![0.0, 0.0]);
        assert_eq!(tr.stdev[1], 0.0);

        let f = DMatrix::from_column_slice(4, 1, &[0.0, 0.0, 3.0, 3.0]);
        let ds = WeightedDataset::unweighted(f, Labels::None).unwrap();
        let (out, tr) = standardize(&ds).unwrap();
        assert_eq!(tr.mean[0], 1.5);
        assert_eq!(tr.stdev[0], 1.5);
        assert_eq!(col(&out, 0), vec![-1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn standardize_needs_two_rows() {
        let ds = WeightedDataset::unweighted(DMatrix::zeros(1, 2), Labels::None).unwrap();
        assert!(standardize(&ds).is_err());
    }

    #[test]
    fn constant_column_with_rounding_noise_is_zeroed() {
        let f = DMatrix::from_column_slice(3, 1, &[0.1 + 0.2, 0.3, 0.30000000000000004]);
        let ds = WeightedDataset::unweighted(f, Labels::None).unwrap();
        let (out, _) = standardize(&ds).unwrap();
        assert!(col(&out, 0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn held_out_transform_commutes_with_union() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = DMatrix::from_fn(30, 3, |_, _| rng.random::<f64>() * 10.0 - 2.0);
        let ds = WeightedDataset::unweighted(f, Labels::None).unwrap();
        let (all_std, tr) = standardize(&ds).unwrap();
        let idx: Vec<usize> = (20..30).collect();
        let held = tr.apply(&ds.subset(&idx)).unwrap();
        let expect = all_std.subset(&idx);
        for (a, b) in held.features().iter().zip(expect.features().iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn gmm_single_component_mean_near_origin() {
        let ds = make_gmm_synthetic(1, 1000, 11).unwrap();
        for j in 0..2 {
            let m = ds.features().column(j).mean();
            assert!(m.abs() < 0.15, "column {j} mean {m}");
        }
    }

    #[test]
    fn gmm_every_component_present_and_deterministic() {
        let a = make_gmm_synthetic(5, 1000, 7).unwrap();
        let b = make_gmm_synthetic(5, 1000, 7).unwrap();
        assert_eq!(a, b);
        let Labels::Class(c) = a.labels() else { panic!() };
        for j in 0..5 {
            assert!(c.iter().any(|&x| x == j));
        }
        assert!(make_gmm_synthetic(5, 4, 0).is_err());
    }

    fn task(n: usize, label: usize) -> WeightedDataset {
        let f = DMatrix::from_fn(n, 2, |i, j| (i * 2 + j) as f64);
        WeightedDataset::unweighted(f, Labels::Class(vec![label; n])).unwrap()
    }

    #[test]
    fn imbalanced_stream_batches() {
        let tasks = vec![task(200, 0), task(200, 1), task(2000, 2)];
        let batches = make_imbalanced_stream(&tasks, &[200, 200, 2000], 125, 0).unwrap();
        assert_eq!(batches.len(), 20);
        assert!(batches[..19].iter().all(|b| b.dataset.len() == 125));
        assert_eq!(batches[19].dataset.len(), 25);
        assert!(batches.windows(2).all(|w| w[0].sequence_index < w[1].sequence_index));
    }

    #[test]
    fn imbalanced_stream_identity_and_single_batch() {
        let tasks = vec![task(5, 0), task(7, 1)];
        let batches = make_imbalanced_stream(&tasks, &[5, 7], 100, 1).unwrap();
        assert_eq!(batches.len(), 1);
        let refs: Vec<&WeightedDataset> = tasks.iter().collect();
        assert_eq!(batches[0].dataset, WeightedDataset::concat(&refs).unwrap());
        assert!(make_imbalanced_stream(&[], &[], 10, 0).is_err());
        assert!(make_imbalanced_stream(&tasks, &[6, 7], 10, 0).is_err());
    }

    #[test]
    fn csv_export_has_header_and_rows() {
        let ds = task(3, 1);
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x0,x1,label,weight");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "0,1,1,1");
    }

    #[test]
    fn rejects_invalid_construction() {
        assert!(WeightedDataset::new(DMatrix::zeros(2, 1), Labels::None, vec![1.0]).is_err());
        assert!(WeightedDataset::new(DMatrix::zeros(2, 1), Labels::None, vec![1.0, -1.0]).is_err());
        let mut f = DMatrix::zeros(2, 1);
        f[(0, 0)] = f64::NAN;
        assert!(WeightedDataset::unweighted(f, Labels::None).is_err());
        assert!(WeightedDataset::unweighted(DMatrix::zeros(2, 1), Labels::Class(vec![0])).is_err());
    }
}
