//! Benchmark rank aggregation: fractional raw ranks and range-weighted scores,
//! both folded as two thirds segmentation plus one third classification.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Benchmark tables shipped with the crate.
pub mod fixtures {
    pub const METRICS_RESENC: &str = include_str!("../fixtures/metrics_resenc.csv");
    pub const METRICS_PRIMUS: &str = include_str!("../fixtures/metrics_primus.csv");
    pub const RAW_RESENC: &str = include_str!("../fixtures/reference_raw_resenc.csv");
    pub const RAW_PRIMUS: &str = include_str!("../fixtures/reference_raw_primus.csv");
    pub const RANGE_RESENC: &str = include_str!("../fixtures/reference_range_resenc.csv");
    pub const RANGE_PRIMUS: &str = include_str!("../fixtures/reference_range_primus.csv");

    /// `(track, metrics, raw reference, range reference)`.
    pub const TRACKS: [(&str, &str, &str, &str); 2] = [
        ("resenc", METRICS_RESENC, RAW_RESENC, RANGE_RESENC),
        ("primus", METRICS_PRIMUS, RAW_PRIMUS, RANGE_PRIMUS),
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Seg,
    Cls,
}

impl Task {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "seg" => Some(Self::Seg),
            "cls" => Some(Self::Cls),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Seg => "seg",
            Self::Cls => "cls",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Metric {
    pub name: String,
    pub task: Task,
    pub higher_is_better: bool,
}

impl Metric {
    pub fn new(name: impl Into<String>, task: Task) -> Self {
        Self {
            name: name.into(),
            task,
            higher_is_better: true,
        }
    }

    /// `name:task`, with a trailing `:lower` when smaller values win.
    fn header(&self) -> String {
        let mut h = format!("{}:{}", self.name, self.task.name());
        if !self.higher_is_better {
            h.push_str(":lower");
        }
        h
    }

    fn parse_header(cell: &str) -> Option<Self> {
        let mut parts = cell.split(':');
        let name = parts.next().filter(|n| !n.is_empty())?;
        let task = Task::parse(parts.next()?)?;
        let higher_is_better = match parts.next() {
            None => true,
            Some("lower") => false,
            Some(_) => return None,
        };
        parts.next().is_none().then(|| Self {
            name: name.to_string(),
            task,
            higher_is_better,
        })
    }
}

/// Dense model by metric matrix. Rows follow `models`, columns follow `metrics`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    models: Vec<String>,
    metrics: Vec<Metric>,
    values: Vec<Vec<f64>>,
}

impl MetricTable {
    /// Checks density, finiteness, unique models and both task groups.
    pub fn new(models: Vec<String>, metrics: Vec<Metric>, values: Vec<Vec<f64>>) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::Contract("metric table has no models".into()));
        }
        if values.len() != models.len() {
            return Err(Error::Contract(format!(
                "{} value rows for {} models",
                values.len(),
                models.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for (model, row) in models.iter().zip(&values) {
            if !seen.insert(model.as_str()) {
                return Err(Error::Contract(format!("duplicate model {model:?}")));
            }
            if row.len() != metrics.len() {
                return Err(Error::Contract(format!(
                    "model {model:?} has {} values for {} metrics",
                    row.len(),
                    metrics.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite()) {
                return Err(Error::Contract(format!("model {model:?} has non-finite value {v}")));
            }
        }
        for task in [Task::Seg, Task::Cls] {
            if !metrics.iter().any(|m| m.task == task) {
                return Err(Error::Contract(format!("no {} metric in table", task.name())));
            }
        }
        Ok(Self {
            models,
            metrics,
            values,
        })
    }

    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn metrics(&self) -> &[Metric] {
        &self.metrics
    }

    pub fn value(&self, model: usize, metric: usize) -> f64 {
        self.values[model][metric]
    }

    pub fn column(&self, metric: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[metric]).collect()
    }

    /// Replaces one metric column, keeping every invariant.
    pub fn with_column(&self, metric: usize, col: &[f64]) -> Result<Self> {
        let mut values = self.values.clone();
        for (row, &v) in values.iter_mut().zip(col) {
            row[metric] = v;
        }
        Self::new(self.models.clone(), self.metrics.clone(), values)
    }

    /// Reorders model rows: row `i` of the result is row `order[i]` of `self`.
    pub fn permute_models(&self, order: &[usize]) -> Result<Self> {
        let pick = |i: &usize| -> Result<usize> {
            (*i < self.models.len())
                .then_some(*i)
                .ok_or_else(|| Error::Contract(format!("model index {i} out of range")))
        };
        let idx = order.iter().map(pick).collect::<Result<Vec<_>>>()?;
        Self::new(
            idx.iter().map(|&i| self.models[i].clone()).collect(),
            self.metrics.clone(),
            idx.iter().map(|&i| self.values[i].clone()).collect(),
        )
    }

    /// Parses `model,<metric>:<task>[:lower],...`; errors carry 1-based line numbers.
    pub fn parse_csv(text: &str, origin: &Path) -> Result<Self> {
        let fail = |line: u64, msg: String| Error::Format {
            path: origin.to_path_buf(),
            msg: format!("line {line}: {msg}"),
        };
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut records = rdr.records();
        let header = match records.next() {
            Some(r) => r.map_err(|e| fail(1, e.to_string()))?,
            None => return Err(fail(1, "empty file".into())),
        };
        if header.get(0) != Some("model") {
            return Err(fail(1, "first header cell must be `model`".into()));
        }
        let metrics = header
            .iter()
            .skip(1)
            .map(|c| Metric::parse_header(c).ok_or_else(|| fail(1, format!("bad metric header {c:?}"))))
            .collect::<Result<Vec<_>>>()?;

        let (mut models, mut values) = (Vec::new(), Vec::new());
        let mut seen = BTreeSet::new();
        for rec in records {
            let rec = rec.map_err(|e| fail(e.position().map_or(0, |p| p.line()), e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != header.len() {
                return Err(fail(line, format!("{} cells, header has {}", rec.len(), header.len())));
            }
            let model = rec[0].to_string();
            if !seen.insert(model.clone()) {
                return Err(fail(line, format!("duplicate model {model:?}")));
            }
            let row = rec
                .iter()
                .skip(1)
                .map(|c| match c.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(fail(line, format!("non-numeric cell {c:?}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            models.push(model);
            values.push(row);
        }
        Self::new(models, metrics, values).map_err(|e| fail(0, e.to_string()))
    }

    /// Inverse of `parse_csv`; shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for m in &self.metrics {
            out.push(',');
            out.push_str(&m.header());
        }
        out.push('\n');
        for (model, row) in self.models.iter().zip(&self.values) {
            out.push_str(model);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn load_metrics_csv(path: &Path) -> Result<MetricTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MetricTable::parse_csv(&text, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Raw,
    RangeWeighted,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Raw => "raw",
            Self::RangeWeighted => "range_weighted",
        })
    }
}

/// Lower is better everywhere. `per_metric[model][metric]` holds a rank or a score.
#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub scheme: Scheme,
    pub models: Vec<String>,
    pub metrics: Vec<Metric>,
    pub per_metric: Vec<Vec<f64>>,
    pub seg_rank: Vec<f64>,
    pub cls_rank: Vec<f64>,
    pub avg_rank: Vec<f64>,
    /// Metrics whose observed range was zero; their scores are pinned to 2.
    pub flat_metrics: Vec<String>,
}

impl RankReport {
    fn assemble(table: &MetricTable, scheme: Scheme, cols: Vec<Vec<f64>>, flat: Vec<String>) -> Self {
        let n = table.models.len();
        let per_metric: Vec<Vec<f64>> = (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
        let group_mean = |i: usize, task: Task| {
            let xs: Vec<f64> = table
                .metrics
                .iter()
                .zip(&per_metric[i])
                .filter(|(m, _)| m.task == task)
                .map(|(_, &r)| r)
                .collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        let seg_rank: Vec<f64> = (0..n).map(|i| group_mean(i, Task::Seg)).collect();
        let cls_rank: Vec<f64> = (0..n).map(|i| group_mean(i, Task::Cls)).collect();
        let avg_rank = seg_rank
            .iter()
            .zip(&cls_rank)
            .map(|(s, c)| 2.0 / 3.0 * s + 1.0 / 3.0 * c)
            .collect();
        Self {
            scheme,
            models: table.models.clone(),
            metrics: table.metrics.clone(),
            per_metric,
            seg_rank,
            cls_rank,
            avg_rank,
            flat_metrics: flat,
        }
    }

    pub fn index_of(&self, model: &str) -> Option<usize> {
        self.models.iter().position(|m| m == model)
    }

    /// Model with the lowest aggregate; ties resolve to the earlier row.
    pub fn best(&self) -> &str {
        let mut best = 0;
        for (i, &a) in self.avg_rank.iter().enumerate() {
            if a < self.avg_rank[best] {
                best = i;
            }
        }
        &self.models[best]
    }

    /// `model,<metric headers>,seg_rank,cls_rank,avg_rank`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for m in &self.metrics {
            out.push(',');
            out.push_str(&m.header());
        }
        out.push_str(",seg_rank,cls_rank,avg_rank\n");
        for (i, model) in self.models.iter().enumerate() {
            out.push_str(model);
            for v in self.per_metric[i]
                .iter()
                .chain([&self.seg_rank[i], &self.cls_rank[i], &self.avg_rank[i]])
            {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn rank_report_write(report: &RankReport, path: &Path) -> Result<()> {
    fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))
}

/// Best is 1; tied values share the mean of the positions they span.
fn fractional_ranks(col: &[f64], higher_is_better: bool) -> Vec<f64> {
    col.iter()
        .map(|&v| {
            let better = col
                .iter()
                .filter(|&&w| if higher_is_better { w > v } else { w < v })
                .count();
            let tied = col.iter().filter(|&&w| w == v).count();
            better as f64 + (tied as f64 + 1.0) / 2.0
        })
        .collect()
}

pub fn raw_rank(table: &MetricTable) -> RankReport {
    let cols = (0..table.metrics.len())
        .map(|j| fractional_ranks(&table.column(j), table.metrics[j].higher_is_better))
        .collect();
    RankReport::assemble(table, Scheme::Raw, cols, Vec::new())
}

/// Per metric, the best observed value scores 1 and the worst scores 3, linearly between.
pub fn range_weighted_score(table: &MetricTable) -> RankReport {
    let mut flat = Vec::new();
    let cols = (0..table.metrics.len())
        .map(|j| {
            let col = table.column(j);
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi == lo {
                flat.push(table.metrics[j].name.clone());
                return vec![2.0; col.len()];
            }
            let higher = table.metrics[j].higher_is_better;
            col.iter()
                .map(|&v| {
                    let gap = if higher { v - lo } else { hi - v };
                    3.0 - 2.0 * gap / (hi - lo)
                })
                .collect()
        })
        .collect();
    RankReport::assemble(table, Scheme::RangeWeighted, cols, flat)
}

pub fn rank(table: &MetricTable, scheme: Scheme) -> RankReport {
    match scheme {
        Scheme::Raw => raw_rank(table),
        Scheme::RangeWeighted => range_weighted_score(table),
    }
}

/// One row of a reference aggregate table.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReferenceRow {
    pub model: String,
    pub avg: f64,
    pub seg: f64,
    pub cls: f64,
}

pub fn parse_reference(text: &str) -> Result<Vec<ReferenceRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<ReferenceRow>, _>>()
        .map_err(|e| Error::Format {
            path: PathBuf::from("<reference>"),
            msg: e.to_string(),
        })
}
