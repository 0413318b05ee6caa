//! Per-family Chamfer tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::deformation::{split_clouds, Condition, Mode, Model};
use crate::geometry::{ChamferKind, PointCloud};
use crate::synthgen::Family;
use crate::Result;

use super::data::Sample;

/// Samples per evaluation forward pass.
pub const EVAL_BATCH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    L1,
    L2,
}

impl Metric {
    pub fn kind(self) -> ChamferKind {
        match self {
            Metric::L1 => ChamferKind::L1,
            Metric::L2 => ChamferKind::L2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::L1 => "l1",
            Metric::L2 => "l2",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Metric::L1),
            "l2" => Ok(Metric::L2),
            _ => Err(crate::Error::invalid(format!("unknown metric {s:?}, expected l1 or l2"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyRow {
    pub family: Family,
    pub count: usize,
    pub mean: f64,
}

/// Mean Chamfer distance per family, plus the average of the family means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub metric: Metric,
    pub rows: Vec<FamilyRow>,
    pub average: f64,
    /// Mean over all samples, independent of family balance.
    pub sample_mean: f64,
}

impl MetricTable {
    /// Builds the table from `(family, distance)` pairs.
    pub fn from_values(metric: Metric, values: impl IntoIterator<Item = (Family, f64)>) -> Self {
        let mut by_family: BTreeMap<Family, (usize, f64)> = BTreeMap::new();
        let (mut n, mut total) = (0usize, 0.0);
        for (f, v) in values {
            let e = by_family.entry(f).or_default();
            e.0 += 1;
            e.1 += v;
            n += 1;
            total += v;
        }
        let rows: Vec<FamilyRow> = by_family
            .into_iter()
            .map(|(family, (count, sum))| FamilyRow {
                family,
                count,
                mean: sum / count as f64,
            })
            .collect();
        let average = if rows.is_empty() {
            0.0
        } else {
            rows.iter().map(|r| r.mean).sum::<f64>() / rows.len() as f64
        };
        Self {
            metric,
            rows,
            average,
            sample_mean: if n == 0 { 0.0 } else { total / n as f64 },
        }
    }

    /// Family rows followed by the average row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("family,count,{}\n", self.metric.name());
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:.8}", r.family.name(), r.count, r.mean);
        }
        let total: usize = self.rows.iter().map(|r| r.count).sum();
        let _ = writeln!(s, "average,{total},{:.8}", self.average);
        s
    }

    /// Aligned text table, distances scaled by 100.
    pub fn to_pretty(&self) -> String {
        let mut s = format!("{:<10} {:>6} {:>12}\n", "family", "count", format!("{} x100", self.metric.name()));
        for r in &self.rows {
            let _ = writeln!(s, "{:<10} {:>6} {:>12.4}", r.family.name(), r.count, r.mean * 100.0);
        }
        let total: usize = self.rows.iter().map(|r| r.count).sum();
        let _ = writeln!(s, "{:<10} {:>6} {:>12.4}", "average", total, self.average * 100.0);
        s
    }
}

/// Eval-mode predictions for every sample, in order.
pub fn predict(model: &Model, samples: &[Sample]) -> Result<Vec<PointCloud>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let decoded = match model.config().task {
            crate::config::Task::Reconstruction => {
                let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
                model.forward_batch(&Condition::Images(&images), Mode::Eval)?.0
            }
            crate::config::Task::Completion => {
                let partials = chunk
                    .iter()
                    .map(|s| {
                        s.partial
                            .as_ref()
                            .ok_or_else(|| crate::Error::invalid(format!("sample {} has no partial input", s.id)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                model.forward_batch(&Condition::Partials(&partials), Mode::Eval)?.0
            }
        };
        out.extend(split_clouds(&decoded.points)?);
    }
    Ok(out)
}

/// Compares predictions with each sample's dense ground truth.
pub fn score(predictions: &[PointCloud], samples: &[Sample], metric: Metric) -> Result<MetricTable> {
    if predictions.len() != samples.len() {
        return Err(crate::Error::invalid("prediction count does not match sample count"));
    }
    let values = predictions
        .iter()
        .zip(samples)
        .map(|(p, s)| Ok((s.family(), metric.kind().distance(p, &s.dense)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricTable::from_values(metric, values))
}

/// Eval-mode metric table of `model` over `samples`.
pub fn evaluate_samples(model: &Model, samples: &[Sample], metric: Metric) -> Result<MetricTable> {
    score(&predict(model, samples)?, samples, metric)
}
