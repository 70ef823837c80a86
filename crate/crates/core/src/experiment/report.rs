//! Result tables: long-format CSV, JSON summaries with mean and stdev per
//! cell, and per-metric plot series.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Version of the CSV and summary layout.
pub const SCHEMA_VERSION: u32 = 1;

/// One long-format row: `method,size,seed,metric,value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub size: usize,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub method: String,
    pub size: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<CellFailure>,
}

/// Mean and sample stdev of one (method, size, metric) cell over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: String,
    pub size: usize,
    pub metric: String,
    pub mean: f64,
    pub stdev: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub cells: Vec<CellSummary>,
    pub failures: Vec<CellFailure>,
}

impl ResultTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        if self.rows.is_empty() {
            wtr.write_record(["method", "size", "seed", "metric", "value"])?;
        }
        for r in &self.rows {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Cells in order of first appearance.
    pub fn summarize(&self) -> Summary {
        let mut order: Vec<(String, usize, String)> = Vec::new();
        let mut values: HashMap<(String, usize, String), Vec<f64>> = HashMap::new();
        for r in &self.rows {
            let key = (r.method.clone(), r.size, r.metric.clone());
            values
                .entry(key.clone())
                .or_insert_with(|| {
                    order.push(key);
                    Vec::new()
                })
                .push(r.value);
        }
        let cells = order
            .into_iter()
            .map(|key| {
                let v = &values[&key];
                let (mean, stdev) = mean_stdev(v);
                CellSummary {
                    method: key.0,
                    size: key.1,
                    metric: key.2,
                    mean,
                    stdev,
                    seeds: v.len(),
                }
            })
            .collect();
        Summary {
            schema_version: SCHEMA_VERSION,
            cells,
            failures: self.failures.clone(),
        }
    }

    pub fn write_summary<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, &self.summarize())?;
        Ok(())
    }

    /// Writes the CSV, the summary and one plot series per metric; returns
    /// the files written.
    pub fn write_all(&self, dir: &Path, csv: &Path, summary: &Path, plots: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let csv = dir.join(csv);
        let summary = dir.join(summary);
        self.write_csv(fs::File::create(&csv)?)?;
        self.write_summary(fs::File::create(&summary)?)?;
        let mut written = vec![csv, summary];
        if !self.rows.is_empty() {
            let plots = dir.join(plots);
            fs::create_dir_all(&plots)?;
            for series in emit_plotdata(self)? {
                let path = plots.join(format!("{}.csv", series.metric));
                series.write_csv(fs::File::create(&path)?)?;
                written.push(path);
            }
        }
        Ok(written)
    }
}

fn mean_stdev(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub method: String,
    pub size: usize,
    pub mean: f64,
    pub stdev: f64,
    /// Set when the cell has one seed and `stdev` is a placeholder 0.
    pub single_seed: bool,
}

/// Curve data for one metric: one row per (method, size).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub metric: String,
    pub rows: Vec<PlotRow>,
}

impl PlotSeries {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        for r in &self.rows {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Pivots a result table into per-metric series sorted by method, then size.
pub fn emit_plotdata(table: &ResultTable) -> Result<Vec<PlotSeries>> {
    if table.rows.is_empty() {
        return invalid("no result rows to plot");
    }
    let mut series: Vec<PlotSeries> = Vec::new();
    for c in table.summarize().cells {
        let row = PlotRow {
            method: c.method,
            size: c.size,
            mean: c.mean,
            stdev: c.stdev,
            single_seed: c.seeds == 1,
        };
        match series.iter_mut().find(|s| s.metric == c.metric) {
            Some(s) => s.rows.push(row),
            None => series.push(PlotSeries {
                metric: c.metric,
                rows: vec![row],
            }),
        }
    }
    for s in &mut series {
        s.rows.sort_by(|a, b| a.method.cmp(&b.method).then(a.size.cmp(&b.size)));
    }
    Ok(series)
}
