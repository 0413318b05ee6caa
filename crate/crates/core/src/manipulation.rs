//! Capturing, editing and replaying per-stage codes: single-dimension
//! sweeps, code swaps between two inputs and code/factor correlation
//! reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crate::deformation::{CodeSet, StageCodeSet};

use crate::config::{check_stage, STAGES};
use crate::deformation::{Condition, Mode, Model};
use crate::geometry::{write_apc, PointCloud};
use crate::image::Image;
use crate::synthgen::FACTOR_NAMES;
use crate::training::{Sample, EVAL_BATCH};
use crate::{Error, Result};

/// Eval-mode reconstruction together with the codes that produced it.
pub fn capture_codes(model: &Model, image: &Image) -> Result<(PointCloud, CodeSet)> {
    let r = model.forward_reconstruct(image, Mode::Eval)?;
    Ok((r.cloud, r.codes))
}

/// Eval-mode completion together with its codes.
pub fn capture_partial(model: &Model, partial: &PointCloud) -> Result<(PointCloud, CodeSet)> {
    let r = model.forward_complete(partial, Mode::Eval)?;
    Ok((r.cloud, r.codes))
}

/// Decodes a captured code set in eval mode.
pub fn replay(model: &Model, codes: &CodeSet) -> Result<PointCloud> {
    model.replay(codes, Mode::Eval)
}

/// Copies of `codes` with `z[stage][dim]` set to each value in turn.
pub fn sweep_codes(model: &Model, codes: &CodeSet, stage: usize, dim: usize, values: &[f64]) -> Result<Vec<CodeSet>> {
    check_stage(stage)?;
    if !model.config().variant.has_semantic() {
        return Err(Error::invalid("this variant has no semantic codes to sweep"));
    }
    let d = model.config().code_dim;
    if dim >= d {
        return Err(Error::invalid(format!("code dimension {dim} out of range for d = {d}")));
    }
    if values.is_empty() {
        return Err(Error::invalid("sweep needs at least one value"));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("sweep value {v} is not finite")));
    }
    values
        .iter()
        .map(|&v| {
            let mut c = codes.clone();
            let z = c
                .stage_mut(stage)?
                .z
                .as_mut()
                .ok_or_else(|| Error::invalid("code set has no semantic code"))?;
            if z.values.len() != d {
                return Err(Error::invalid("code set does not match the model's code dimension"));
            }
            z.values[dim] = v;
            Ok(c)
        })
        .collect()
}

/// Decodes one cloud per value of `z[stage][dim]`, everything else held at
/// the captured codes. Each value is decoded on its own, so a value equal
/// to the captured activation reproduces the reconstruction exactly.
pub fn sweep_from_codes(model: &Model, codes: &CodeSet, stage: usize, dim: usize, values: &[f64]) -> Result<Vec<PointCloud>> {
    sweep_codes(model, codes, stage, dim, values)?
        .iter()
        .map(|c| model.replay(c, Mode::Eval))
        .collect()
}

pub fn sweep_dimension(model: &Model, image: &Image, stage: usize, dim: usize, values: &[f64]) -> Result<Vec<PointCloud>> {
    // Validate before paying for the encoder.
    if model.config().task != crate::config::Task::Reconstruction {
        return Err(Error::invalid("image sweeps need a reconstruction model"));
    }
    let (_, codes) = capture_codes(model, image)?;
    sweep_from_codes(model, &codes, stage, dim, values)
}

/// Which captured components to take from the second input, per stage.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwapSelection {
    pub z: Vec<usize>,
    pub mu: Vec<usize>,
    pub sigma: Vec<usize>,
    pub geometric_add: Vec<usize>,
    pub semantic_add: Vec<usize>,
}

impl SwapSelection {
    /// Every component the model's variant has, at every stage.
    pub fn all_for(model: &Model) -> Self {
        let v = model.config().variant;
        let stages: Vec<usize> = (1..=STAGES).collect();
        let pick = |on: bool| if on { stages.clone() } else { Vec::new() };
        Self {
            z: pick(v.has_semantic()),
            mu: pick(v.has_geometric()),
            sigma: pick(v.has_geometric()),
            geometric_add: pick(v.has_geometric_mlp()),
            semantic_add: pick(v.has_semantic_mlp()),
        }
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty() && self.mu.is_empty() && self.sigma.is_empty() && self.geometric_add.is_empty() && self.semantic_add.is_empty()
    }

    fn validate(&self) -> Result<()> {
        for stages in [&self.z, &self.mu, &self.sigma, &self.geometric_add, &self.semantic_add] {
            for &s in stages {
                check_stage(s)?;
            }
        }
        Ok(())
    }
}

/// Parses `all`, `none`, or `+`-separated `component:stages` terms such as
/// `z:1,2+mu:1`. A component without stages means all stages.
impl FromStr for SwapSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") || s.is_empty() {
            return Ok(Self::none());
        }
        let mut out = Self::none();
        for term in s.split('+') {
            let (name, stages) = match term.split_once(':') {
                Some((n, st)) => (n.trim(), Some(st)),
                None => (term.trim(), None),
            };
            let stages: Vec<usize> = match stages {
                None => (1..=STAGES).collect(),
                Some(st) => st
                    .split(',')
                    .map(|x| {
                        let v: usize = x
                            .trim()
                            .parse()
                            .map_err(|_| Error::invalid(format!("bad stage {x:?} in swap selection")))?;
                        check_stage(v)?;
                        Ok(v)
                    })
                    .collect::<Result<_>>()?,
            };
            let all = name.eq_ignore_ascii_case("all");
            let slots: Vec<&mut Vec<usize>> = match name {
                _ if all => vec![&mut out.z, &mut out.mu, &mut out.sigma, &mut out.geometric_add, &mut out.semantic_add],
                "z" => vec![&mut out.z],
                "mu" => vec![&mut out.mu],
                "sigma" => vec![&mut out.sigma],
                "geometric_add" => vec![&mut out.geometric_add],
                "semantic_add" => vec![&mut out.semantic_add],
                other => return Err(Error::invalid(format!("unknown swap component {other:?}"))),
            };
            for slot in slots {
                for &st in &stages {
                    if !slot.contains(&st) {
                        slot.push(st);
                    }
                }
                slot.sort_unstable();
            }
        }
        Ok(out)
    }
}

/// `a` with the selected components replaced by those of `b`. Components
/// the model does not have are absent from both sets, so selecting them
/// changes nothing.
pub fn swap_code_sets(a: &CodeSet, b: &CodeSet, which: &SwapSelection) -> Result<CodeSet> {
    which.validate()?;
    let mut out = a.clone();
    for stage in 1..=STAGES {
        let src = b.stage(stage)?;
        let dst = out.stage_mut(stage)?;
        if which.z.contains(&stage) {
            dst.z = src.z.clone();
        }
        if which.geometric_add.contains(&stage) {
            dst.geometric_add = src.geometric_add.clone();
        }
        if which.semantic_add.contains(&stage) {
            dst.semantic_add = src.semantic_add.clone();
        }
        let (take_mu, take_sigma) = (which.mu.contains(&stage), which.sigma.contains(&stage));
        if take_mu || take_sigma {
            let (Some(d), Some(s)) = (dst.styles.as_mut(), src.styles.as_ref()) else {
                return Err(Error::invalid("code sets carry no geometric styles"));
            };
            if d.sigma.len() != s.sigma.len() {
                return Err(Error::invalid("code sets come from different model shapes"));
            }
            if take_mu {
                d.mu = s.mu.clone();
            }
            if take_sigma {
                d.sigma = s.sigma.clone();
            }
        }
    }
    Ok(out)
}

/// Reconstruction of `a` decoded with the selected components of `b`.
pub fn swap_codes(model: &Model, image_a: &Image, image_b: &Image, which: &SwapSelection) -> Result<PointCloud> {
    let (_, a) = capture_codes(model, image_a)?;
    let (_, b) = capture_codes(model, image_b)?;
    model.replay(&swap_code_sets(&a, &b, which)?, Mode::Eval)
}

/// Semantic codes of many samples, batched: `codes[sample][stage - 1]`.
pub fn collect_codes(model: &Model, samples: &[Sample]) -> Result<Vec<Vec<Vec<f64>>>> {
    if !model.config().variant.has_semantic() {
        return Err(Error::invalid("this variant has no semantic codes"));
    }
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let encoded = match model.config().task {
            crate::config::Task::Reconstruction => {
                let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
                model.encode(&Condition::Images(&images))?
            }
            crate::config::Task::Completion => {
                let partials = chunk
                    .iter()
                    .map(|s| s.partial.as_ref().ok_or_else(|| Error::invalid("sample has no partial input")))
                    .collect::<Result<Vec<_>>>()?;
                model.encode(&Condition::Partials(&partials))?
            }
        };
        let codes = model.conditioning(&encoded)?;
        let per_stage: Vec<Vec<Vec<f64>>> = codes
            .iter()
            .map(|c| {
                let z = c.z.as_ref().expect("semantic variant has codes");
                Ok(z.to_dtype(candle_core::DType::F64)?.to_vec2::<f64>()?)
            })
            .collect::<Result<_>>()?;
        for i in 0..chunk.len() {
            out.push(per_stage.iter().map(|s| s[i].clone()).collect());
        }
    }
    Ok(out)
}

/// Per-stage, per-dimension mean and standard deviation of `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeStats {
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

impl CodeStats {
    pub fn from_codes(codes: &[Vec<Vec<f64>>]) -> Result<Self> {
        let first = codes.first().ok_or_else(|| Error::invalid("no codes to summarise"))?;
        let n = codes.len() as f64;
        let mut mean: Vec<Vec<f64>> = first.iter().map(|s| vec![0.0; s.len()]).collect();
        for c in codes {
            for (m, s) in mean.iter_mut().zip(c) {
                m.iter_mut().zip(s).for_each(|(a, b)| *a += b / n);
            }
        }
        let mut std: Vec<Vec<f64>> = mean.iter().map(|m| vec![0.0; m.len()]).collect();
        for c in codes {
            for ((sd, m), s) in std.iter_mut().zip(&mean).zip(c) {
                for ((a, mu), x) in sd.iter_mut().zip(m).zip(s) {
                    *a += (x - mu).powi(2) / n;
                }
            }
        }
        std.iter_mut().flatten().for_each(|v| *v = v.sqrt());
        Ok(Self { mean, std })
    }

    pub fn std_of(&self, stage: usize, dim: usize) -> Result<f64> {
        check_stage(stage)?;
        self.std
            .get(stage - 1)
            .and_then(|s| s.get(dim))
            .copied()
            .ok_or_else(|| Error::invalid(format!("no statistics for stage {stage} dim {dim}")))
    }
}

/// `steps` evenly spaced values over `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..steps).map(|i| lo + (hi - lo) * i as f64 / (steps - 1) as f64).collect(),
    }
}

/// Default sweep grid: `original +- 3 std` in `steps` values, or the full
/// code range `[-1, 1]` when no spread is known.
pub fn default_grid(original: f64, std: Option<f64>, steps: usize) -> Vec<f64> {
    match std {
        Some(s) if s > 0.0 => linspace(original - 3.0 * s, original + 3.0 * s, steps),
        _ => linspace(-1.0, 1.0, steps),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepIndex {
    pub stage: usize,
    pub dim: usize,
    pub values: Vec<f64>,
    pub files: Vec<String>,
}

/// Writes `sweep_XX.apc` per cloud plus `index.json` into `dir`.
pub fn export_sweep(dir: &Path, stage: usize, dim: usize, values: &[f64], clouds: &[PointCloud]) -> Result<SweepIndex> {
    if values.len() != clouds.len() {
        return Err(Error::invalid("one cloud per sweep value expected"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(clouds.len());
    for (i, c) in clouds.iter().enumerate() {
        let name = format!("sweep_{i:02}.apc");
        write_apc(dir.join(&name), c)?;
        files.push(name);
    }
    let index = SweepIndex {
        stage,
        dim,
        values: values.to_vec(),
        files,
    };
    let path = dir.join("index.json");
    fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

/// Pearson correlation; zero when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n < 2 {
        return 0.0;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (a, b) = (x[i] - mx, y[i] - my);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopDimension {
    pub factor: String,
    pub stage: usize,
    pub dim: usize,
    pub correlation: f64,
}

/// `|Pearson|` between every code dimension and every generative factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementReport {
    pub factors: Vec<String>,
    pub code_dim: usize,
    /// `(3 d) x factors`, row `(stage - 1) * d + dim`.
    pub correlations: Vec<Vec<f64>>,
    /// Strongest dimension per factor.
    pub top: Vec<TopDimension>,
    /// Largest entry of the matrix.
    pub max_correlation: f64,
    /// 95th percentile of the matrix maximum under shuffled factor labels.
    pub null_quantile_95: f64,
    /// Share of shuffles (with the observed one counted) whose maximum
    /// reaches the observed maximum.
    pub p_value: f64,
    pub permutations: usize,
}

impl DisentanglementReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("stage,dim,{}\n", self.factors.join(","));
        for (row, vals) in self.correlations.iter().enumerate() {
            let (stage, dim) = (row / self.code_dim + 1, row % self.code_dim);
            let cells: Vec<String> = vals.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(s, "{stage},{dim},{}", cells.join(","));
        }
        s
    }
}

fn correlation_matrix(codes: &[Vec<f64>], factors: &[Vec<Option<f64>>]) -> Vec<Vec<f64>> {
    let dims = codes.first().map_or(0, Vec::len);
    (0..dims)
        .map(|j| {
            factors
                .iter()
                .map(|f| {
                    let (x, y): (Vec<f64>, Vec<f64>) = codes
                        .iter()
                        .zip(f)
                        .filter_map(|(c, v)| v.map(|v| (c[j], v)))
                        .unzip();
                    pearson(&x, &y).abs()
                })
                .collect()
        })
        .collect()
}

fn matrix_max(m: &[Vec<f64>]) -> f64 {
    m.iter().flatten().copied().fold(0.0, f64::max)
}

/// Correlates the flattened codes of `samples` with their factors. Each
/// factor uses only the samples whose family defines it. The null
/// distribution shuffles each factor column independently.
pub fn disentanglement_report(model: &Model, samples: &[Sample], permutations: usize, seed: u64) -> Result<DisentanglementReport> {
    if samples.len() < 3 {
        return Err(Error::invalid("need at least three samples to correlate"));
    }
    let d = model.config().code_dim;
    let codes: Vec<Vec<f64>> = collect_codes(model, samples)?
        .into_iter()
        .map(|stages| stages.concat())
        .collect();
    let names: Vec<String> = FACTOR_NAMES.iter().map(|s| s.to_string()).collect();
    let mut factors: Vec<Vec<Option<f64>>> = names
        .iter()
        .map(|f| samples.iter().map(|s| s.spec.get(f)).collect())
        .collect();
    let correlations = correlation_matrix(&codes, &factors);
    let max_correlation = matrix_max(&correlations);
    let top = names
        .iter()
        .enumerate()
        .filter(|(k, _)| factors[*k].iter().any(Option::is_some))
        .map(|(k, name)| {
            let (row, r) = correlations
                .iter()
                .enumerate()
                .map(|(row, v)| (row, v[k]))
                .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            TopDimension {
                factor: name.clone(),
                stage: row / d + 1,
                dim: row % d,
                correlation: r,
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        for f in factors.iter_mut() {
            let idx: Vec<usize> = (0..f.len()).filter(|&i| f[i].is_some()).collect();
            let mut vals: Vec<Option<f64>> = idx.iter().map(|&i| f[i]).collect();
            vals.shuffle(&mut rng);
            for (&i, v) in idx.iter().zip(vals) {
                f[i] = v;
            }
        }
        null.push(matrix_max(&correlation_matrix(&codes, &factors)));
    }
    null.sort_by(f64::total_cmp);
    let null_quantile_95 = if null.is_empty() {
        f64::NAN
    } else {
        null[((null.len() as f64 * 0.95).ceil() as usize).clamp(1, null.len()) - 1]
    };
    let exceed = null.iter().filter(|&&v| v >= max_correlation).count();
    Ok(DisentanglementReport {
        factors: names,
        code_dim: d,
        correlations,
        top,
        max_correlation,
        null_quantile_95,
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
        permutations,
    })
}

/// Extent of a cloud along one axis.
pub fn axis_extent(cloud: &PointCloud, axis: usize) -> f64 {
    let (lo, hi) = cloud.bounds();
    hi[axis] - lo[axis]
}
