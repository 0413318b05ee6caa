//! Variant and code-dimension comparisons under one training budget.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{evaluate_samples, orthogonality_loss, train_samples, Metric, MetricTable, Sample, TrainConfig, TrainOutcome};
use crate::config::{ModelConfig, Variant};
use crate::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub test: MetricTable,
    /// Orthogonality penalty of the kept parameters; zero without banks.
    pub orthogonality: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Test L1 (sample mean) per seed for one variant, in seed order.
    pub fn scores(&self, variant: Variant) -> Vec<(u64, f64)> {
        let mut v: Vec<_> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant)
            .map(|r| (r.seed, r.test.sample_mean))
            .collect();
        v.sort_by_key(|&(s, _)| s);
        v
    }

    /// Number of shared seeds on which `a` scores strictly lower than `b`.
    pub fn wins(&self, a: Variant, b: Variant) -> usize {
        let sb = self.scores(b);
        self.scores(a)
            .iter()
            .filter(|(seed, va)| sb.iter().any(|(s, vb)| s == seed && va < vb))
            .count()
    }

    /// One line per run.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,seed,test_l1,average_l1,orthogonality\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.8},{:.8},{:.8}",
                r.variant.name(),
                r.seed,
                r.test.sample_mean,
                r.test.average,
                r.orthogonality
            );
        }
        s
    }

    /// Mean and spread over seeds per variant, distances scaled by 100.
    pub fn comparison(&self) -> String {
        let mut variants: Vec<Variant> = Vec::new();
        for r in &self.rows {
            if !variants.contains(&r.variant) {
                variants.push(r.variant);
            }
        }
        let mut s = format!("{:<14} {:>5} {:>12} {:>10}\n", "variant", "runs", "l1 x100", "std x100");
        for v in variants {
            let vals: Vec<f64> = self.scores(v).into_iter().map(|(_, x)| x).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            let _ = writeln!(s, "{:<14} {:>5} {:>12.4} {:>10.4}", v.name(), vals.len(), mean * 100.0, var.sqrt() * 100.0);
        }
        s
    }
}

/// Trains every `(variant, seed)` pair and scores it on `test`. `keep` sees
/// each run before it is dropped, e.g. to save its checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    train: &[Sample],
    val: &[Sample],
    test: &[Sample],
    base: &ModelConfig,
    config: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    mut keep: impl FnMut(&AblationRow, TrainOutcome) -> Result<()>,
) -> Result<AblationReport> {
    let mut report = AblationReport::default();
    for &seed in seeds {
        for &variant in variants {
            let run = TrainConfig {
                seed,
                variant,
                ..config.clone()
            };
            let outcome = train_samples(train, val, base, &run)?;
            let row = AblationRow {
                variant,
                seed,
                test: evaluate_samples(&outcome.model, test, Metric::L1)?,
                orthogonality: orthogonality_loss(&outcome.model.banks(), run.orthogonality)?,
            };
            log::info!("{} seed {seed}: test l1 {:.5}", variant.name(), row.test.sample_mean);
            keep(&row, outcome)?;
            report.rows.push(row);
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeDimRow {
    pub code_dim: usize,
    pub test: MetricTable,
    pub orthogonality: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CodeDimReport {
    pub rows: Vec<CodeDimRow>,
}

impl CodeDimReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("code_dim,test_l1,average_l1,orthogonality\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.8},{:.8},{:.8}",
                r.code_dim, r.test.sample_mean, r.test.average, r.orthogonality
            );
        }
        s
    }
}

/// Trains the configured variant once per code dimension.
pub fn code_dim_sweep(
    train: &[Sample],
    val: &[Sample],
    test: &[Sample],
    base: &ModelConfig,
    config: &TrainConfig,
    dims: &[usize],
    mut keep: impl FnMut(&CodeDimRow, TrainOutcome) -> Result<()>,
) -> Result<CodeDimReport> {
    let mut report = CodeDimReport::default();
    for &code_dim in dims {
        let run = TrainConfig {
            code_dim,
            ..config.clone()
        };
        let outcome = train_samples(train, val, base, &run)?;
        let row = CodeDimRow {
            code_dim,
            test: evaluate_samples(&outcome.model, test, Metric::L1)?,
            orthogonality: orthogonality_loss(&outcome.model.banks(), run.orthogonality)?,
        };
        keep(&row, outcome)?;
        report.rows.push(row);
    }
    Ok(report)
}
