//! The deformation pipe: three graph-attention stages over the sphere prior,
//! each modulated by AdaIN with geometric styles and by an injected semantic
//! feature, followed by a per-point displacement head.

use candle_core::{DType, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribute_flow::{AfModule, AttributeCode, StageCodes, StylePair, SubspaceBank};
use crate::config::{ModelConfig, NormScope, Task, STAGES};
use crate::encoders::{cloud_batch, image_batch, ImageEncoder, PointEncoder};
use crate::geometry::{knn_from_sq_distances, knn_graph, sample_sphere, NeighborGraph, PointCloud};
use crate::image::Image;
use crate::nn::{leaky_relu, softmax_last, tensor_from_f64, to_f64_vec, Init, Linear, ParamStore};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Normalise with current statistics and report them for the running
    /// averages.
    Train,
    /// Normalise with the running averages.
    Eval,
}

/// Running per-channel normalisation statistics for one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

impl NormStats {
    pub fn new(channels: usize, momentum: f64) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// `running <- momentum * running + (1 - momentum) * batch`.
    pub fn update(&mut self, batch: &BatchStats) -> Result<()> {
        if batch.mean.len() != self.channels() || batch.var.len() != self.channels() {
            return Err(Error::invalid("batch statistics do not match the channel count"));
        }
        let m = self.momentum;
        for (r, &b) in self.running_mean.iter_mut().zip(&batch.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, &b) in self.running_var.iter_mut().zip(&batch.var) {
            *r = m * *r + (1.0 - m) * b.max(0.0);
        }
        Ok(())
    }
}

/// Per-channel statistics observed in one train-mode pass, averaged over
/// the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Adaptive instance normalisation of `(B, N, C)` features by `(B, N, C)`
/// styles: `sigma * (q - mean) / sqrt(var + eps) + mu`.
pub fn adain(
    q: &Tensor,
    sigma: &Tensor,
    mu: &Tensor,
    stats: &NormStats,
    mode: Mode,
    scope: NormScope,
    eps: f64,
) -> Result<(Tensor, Option<BatchStats>)> {
    let (_, _, c) = q.dims3()?;
    if sigma.dims() != q.dims() || mu.dims() != q.dims() {
        return Err(Error::invalid(format!(
            "style shapes {:?} / {:?} do not match features {:?}",
            sigma.dims(),
            mu.dims(),
            q.dims()
        )));
    }
    if stats.channels() != c {
        return Err(Error::invalid("normalisation statistics do not match the channel count"));
    }
    let (mean, var, observed) = match mode {
        Mode::Train => {
            let mut mean = q.mean_keepdim(1)?;
            if scope == NormScope::Batch {
                mean = mean.mean_keepdim(0)?;
            }
            let mut var = q.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
            if scope == NormScope::Batch {
                var = var.mean_keepdim(0)?;
            }
            let observed = BatchStats {
                mean: to_f64_vec(&mean.mean(0)?)?,
                var: to_f64_vec(&var.mean(0)?)?,
            };
            (mean, var, Some(observed))
        }
        Mode::Eval => {
            let dtype = q.dtype();
            let mean = tensor_from_f64(stats.running_mean.clone(), &[1, 1, c], dtype)?;
            let var = tensor_from_f64(stats.running_var.clone(), &[1, 1, c], dtype)?;
            (mean, var, None)
        }
    };
    let normalized = q.broadcast_sub(&mean)?.broadcast_div(&(var + eps)?.sqrt()?)?;
    let out = ((normalized * sigma)? + mu)?;
    Ok((out, observed))
}

/// `q + leaky(phi(s))` for `(B, N, C)` features and semantic features.
pub fn inject_semantic(q: &Tensor, s: &Tensor, phi: &Linear) -> Result<Tensor> {
    if q.dims() != s.dims() {
        return Err(Error::invalid(format!(
            "semantic feature {:?} does not match stage features {:?}",
            s.dims(),
            q.dims()
        )));
    }
    Ok((q + leaky_relu(&phi.forward(s)?)?)?)
}

/// EdgeConv-style attention: each point aggregates
/// `e_kj = leaky(W [q_k : q_j - q_k] + b)` over its neighbours with softmax
/// weights from a learned scalar score of `e_kj`.
///
/// The linear map on the concatenation is split as
/// `center(q_k) - edge(q_k) + edge(q_j)`, so it runs once per point instead
/// of once per edge.
#[derive(Clone, Debug)]
pub struct GraphAttentionBlock {
    center: Linear,
    edge: Linear,
    score: Linear,
}

impl GraphAttentionBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, input: usize, output: usize) -> Result<Self> {
        let init = Init::Uniform { fan_in: 2 * input };
        Ok(Self {
            center: Linear::with_init(store, &format!("{prefix}.center"), input, output, init, true)?,
            edge: Linear::with_init(store, &format!("{prefix}.edge"), input, output, init, false)?,
            score: Linear::without_bias(store, &format!("{prefix}.score"), output, 1)?,
        })
    }

    /// `q` is `(B, N, Cin)`. `graphs` holds one graph per sample, or a single
    /// graph shared by the whole batch. Returns the `(B, N, Cout)` features
    /// and the `(B, N, k)` attention weights.
    pub fn forward(&self, q: &Tensor, graphs: &[NeighborGraph]) -> Result<(Tensor, Tensor)> {
        let (b, n, _) = q.dims3()?;
        let first = graphs.first().ok_or_else(|| Error::invalid("no neighbour graph given"))?;
        let k = first.k();
        if !(graphs.len() == 1 || graphs.len() == b) {
            return Err(Error::invalid(format!("{} graphs for a batch of {b}", graphs.len())));
        }
        if graphs.iter().any(|g| g.len() != n || g.k() != k) {
            return Err(Error::invalid(format!("neighbour graph does not cover {n} points")));
        }
        let mut index = Vec::with_capacity(b * n * k);
        for bi in 0..b {
            let g = &graphs[if graphs.len() == 1 { 0 } else { bi }];
            index.extend(g.indices().iter().map(|&j| (bi * n + j) as u32));
        }
        let index = Tensor::from_vec(index, b * n * k, q.device())?;

        let edge = self.edge.forward(q)?;
        let own = (self.center.forward(q)? - &edge)?;
        let cout = edge.dim(2)?;
        let neighbours = edge
            .reshape((b * n, cout))?
            .index_select(&index, 0)?
            .reshape((b, n, k, cout))?;
        let e = leaky_relu(&neighbours.broadcast_add(&own.unsqueeze(2)?)?)?;
        let attention = softmax_last(&self.score.forward(&e)?.squeeze(3)?)?;
        let out = e.broadcast_mul(&attention.unsqueeze(3)?)?.sum(2)?;
        Ok((out, attention))
    }
}

/// k-nearest-neighbour graphs of each sample's `(N, C)` feature rows.
/// Distances come from one batched product and never carry gradients.
pub fn feature_graphs(q: &Tensor, k: usize) -> Result<Vec<NeighborGraph>> {
    let (_, n, _) = q.dims3()?;
    let q = q.detach();
    let sq = q.sqr()?.sum_keepdim(2)?;
    let inner = q.matmul(&q.t()?.contiguous()?)?;
    let dist = (sq.broadcast_add(&sq.t()?)? - (inner * 2.0)?)?;
    let flat = to_f64_vec(&dist)?;
    flat.par_chunks(n * n).map(|d| knn_from_sq_distances(d, n, k)).collect()
}

/// Per-point MLP to signed 3-D displacements.
#[derive(Clone, Debug)]
pub struct DisplacementHead {
    hidden: Linear,
    out: Linear,
}

impl DisplacementHead {
    pub fn new(store: &mut ParamStore, input: usize, hidden: usize, zero_init: bool) -> Result<Self> {
        let out_init = if zero_init { Init::Zeros } else { Init::Uniform { fan_in: hidden } };
        Ok(Self {
            hidden: Linear::new(store, "head.hidden", input, hidden)?,
            out: Linear::with_init(store, "head.out", hidden, 3, out_init, true)?,
        })
    }

    /// `(B, N, C)` to `(B, N, 3)`.
    pub fn forward(&self, q: &Tensor) -> Result<Tensor> {
        self.out.forward(&leaky_relu(&self.hidden.forward(q)?)?)
    }
}

/// Captured conditioning of one sample for one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCodeSet {
    pub stage: usize,
    pub z: Option<AttributeCode>,
    pub styles: Option<StylePair>,
    pub geometric_add: Option<Vec<f64>>,
    pub semantic_add: Option<Vec<f64>>,
}

/// Everything the decoder reads for one sample. Decoding the same set
/// always yields the same cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeSet {
    pub stages: Vec<StageCodeSet>,
}

impl CodeSet {
    /// The stage entry `stage` (1-based).
    pub fn stage(&self, stage: usize) -> Result<&StageCodeSet> {
        crate::config::check_stage(stage)?;
        self.stages
            .get(stage - 1)
            .ok_or_else(|| Error::invalid("code set is missing a stage"))
    }

    pub fn stage_mut(&mut self, stage: usize) -> Result<&mut StageCodeSet> {
        crate::config::check_stage(stage)?;
        self.stages
            .get_mut(stage - 1)
            .ok_or_else(|| Error::invalid("code set is missing a stage"))
    }

    /// Extracts sample `index` from batched stage codes.
    pub fn from_batch(codes: &[StageCodes], index: usize) -> Result<Self> {
        let pick = |t: &Option<Tensor>| -> Result<Option<Vec<f64>>> {
            t.as_ref().map(|t| to_f64_vec(&t.get(index)?)).transpose()
        };
        let mut stages = Vec::with_capacity(codes.len());
        for (i, c) in codes.iter().enumerate() {
            let stage = i + 1;
            let z = pick(&c.z)?.map(|values| AttributeCode { stage, values });
            let styles = match (&c.sigma, &c.mu) {
                (Some(s), Some(m)) => {
                    let (_, rows, channels) = s.dims3()?;
                    Some(StylePair {
                        stage,
                        rows,
                        channels,
                        sigma: to_f64_vec(&s.get(index)?)?,
                        mu: to_f64_vec(&m.get(index)?)?,
                    })
                }
                _ => None,
            };
            stages.push(StageCodeSet {
                stage,
                z,
                styles,
                geometric_add: pick(&c.geo_add)?,
                semantic_add: pick(&c.sem_add)?,
            });
        }
        Ok(Self { stages })
    }
}

/// Batched model input.
pub enum Condition<'a> {
    Images(&'a [&'a Image]),
    Partials(&'a [&'a PointCloud]),
}

/// Encoder output: `(B, D)` global feature and the geometric sub-pipe's
/// condition, `(B, 1, D)` for images or `(B, N, F)` for partial clouds.
pub struct Encoded {
    pub global: Tensor,
    pub geo_input: Tensor,
}

/// Decoder output.
pub struct Decoded {
    /// `(B, N, 3)` output clouds.
    pub points: Tensor,
    /// Per-stage train-mode statistics; `None` in eval mode or for stages
    /// without normalisation.
    pub stats: Vec<Option<BatchStats>>,
}

/// Result of a single-sample forward pass.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub cloud: PointCloud,
    pub codes: CodeSet,
}

struct DeformStage {
    block: GraphAttentionBlock,
    inject: Option<Linear>,
}

/// The full model: encoder, attribute flow, deformation pipe and head.
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    image_encoder: Option<ImageEncoder>,
    point_encoder: Option<PointEncoder>,
    af: Vec<AfModule>,
    stages: Vec<DeformStage>,
    head: DisplacementHead,
    norm: Vec<NormStats>,
    prior: PointCloud,
    prior_tensor: Tensor,
    prior_graph: NeighborGraph,
}

impl Model {
    /// Builds a freshly initialised model. Parameters depend only on
    /// `(config, seed)`; the prior depends only on `config.prior_seed`.
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let (image_encoder, point_encoder) = match config.task {
            Task::Reconstruction => (Some(ImageEncoder::new(&mut store, &config)?), None),
            Task::Completion => (None, Some(PointEncoder::new(&mut store, &config)?)),
        };
        let mut af = Vec::with_capacity(STAGES);
        let mut stages = Vec::with_capacity(STAGES);
        let mut input = 3;
        for stage in 1..=STAGES {
            let c = config.stage_channels(stage)?;
            af.push(AfModule::new(&mut store, &config, stage)?);
            let block = GraphAttentionBlock::new(&mut store, &format!("stage{stage}.block"), input, c)?;
            let inject = if config.variant.has_semantic() {
                Some(Linear::new(&mut store, &format!("stage{stage}.inject"), c, c)?)
            } else {
                None
            };
            stages.push(DeformStage { block, inject });
            input = c;
        }
        let head = DisplacementHead::new(&mut store, input, config.head_hidden, config.zero_init_head)?;
        let norm = config
            .channels
            .iter()
            .map(|&c| NormStats::new(c, config.norm_momentum))
            .collect();
        let prior = sample_sphere(config.num_points, config.prior_seed)?;
        let prior_tensor = tensor_from_f64(prior.to_flat_f64(), &[prior.len(), 3], dtype)?;
        let prior_graph = knn_graph(&prior.to_flat_f64(), 3, config.k_neighbors)?;
        Ok(Self {
            config,
            store,
            image_encoder,
            point_encoder,
            af,
            stages,
            head,
            norm,
            prior,
            prior_tensor,
            prior_graph,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn prior(&self) -> &PointCloud {
        &self.prior
    }

    pub fn af_module(&self, stage: usize) -> Result<&AfModule> {
        crate::config::check_stage(stage)?;
        Ok(&self.af[stage - 1])
    }

    pub fn image_encoder(&self) -> Option<&ImageEncoder> {
        self.image_encoder.as_ref()
    }

    pub fn point_encoder(&self) -> Option<&PointEncoder> {
        self.point_encoder.as_ref()
    }

    /// Subspace banks of the stages that have a semantic sub-pipe.
    pub fn banks(&self) -> Vec<&SubspaceBank> {
        self.af.iter().filter_map(|m| m.bank()).collect()
    }

    pub fn norm_stats(&self) -> &[NormStats] {
        &self.norm
    }

    pub fn set_norm_stats(&mut self, stats: Vec<NormStats>) -> Result<()> {
        if stats.len() != STAGES || stats.iter().zip(&self.config.channels).any(|(s, &c)| s.channels() != c) {
            return Err(Error::invalid("normalisation statistics do not match the model"));
        }
        self.norm = stats;
        Ok(())
    }

    /// Folds one train-mode pass's statistics into the running averages.
    pub fn update_norm_stats(&mut self, observed: &[Option<BatchStats>]) -> Result<()> {
        for (stats, obs) in self.norm.iter_mut().zip(observed) {
            if let Some(obs) = obs {
                stats.update(obs)?;
            }
        }
        Ok(())
    }

    /// Relabels the prior so new point `i` is old point `perm[i]`, moving
    /// the per-point rows of every subspace bank along with it.
    pub fn permute_prior(&mut self, perm: &[usize]) -> Result<()> {
        self.prior = self.prior.permuted(perm)?;
        self.prior_graph = self.prior_graph.permuted(perm)?;
        let index = Tensor::from_vec(perm.iter().map(|&i| i as u32).collect::<Vec<_>>(), perm.len(), self.prior_tensor.device())?;
        self.prior_tensor = self.prior_tensor.index_select(&index, 0)?;
        let n = self.prior.len();
        for m in &self.af {
            let Some(bank) = m.bank() else { continue };
            let (c, d) = (bank.channels(), bank.code_dim());
            let prefix = format!("stage{}.semantic.bank", m.stage());
            let basis = bank.basis().reshape((n, c, d))?.index_select(&index, 0)?.reshape((n * c, d))?;
            let bias = bank.bias().index_select(&index, 0)?;
            self.store.set(&format!("{prefix}.basis"), &basis)?;
            self.store.set(&format!("{prefix}.bias"), &bias)?;
        }
        Ok(())
    }

    pub fn encode(&self, condition: &Condition<'_>) -> Result<Encoded> {
        let dtype = self.dtype();
        match (condition, &self.image_encoder, &self.point_encoder) {
            (Condition::Images(images), Some(enc), _) => {
                let global = enc.forward(&image_batch(images, dtype)?)?;
                let geo_input = global.unsqueeze(1)?;
                Ok(Encoded { global, geo_input })
            }
            (Condition::Partials(clouds), _, Some(enc)) => {
                let out = enc.forward(&cloud_batch(clouds, dtype)?)?;
                let sources: Vec<_> = clouds.iter().map(|c| c.points().to_vec()).collect();
                let geo_input = enc.propagate(&out.point_features, &sources, &self.prior)?;
                Ok(Encoded {
                    global: out.global,
                    geo_input,
                })
            }
            (Condition::Images(_), None, _) => Err(Error::invalid("completion model cannot take images")),
            (Condition::Partials(_), _, None) => Err(Error::invalid("reconstruction model cannot take point clouds")),
        }
    }

    /// Per-stage codes and styles for an encoded batch.
    pub fn conditioning(&self, encoded: &Encoded) -> Result<Vec<StageCodes>> {
        self.af
            .iter()
            .map(|m| m.condition(&encoded.global, &encoded.geo_input, &self.prior_tensor))
            .collect()
    }

    /// Runs the deformation pipe from per-stage codes.
    pub fn decode(&self, codes: &[StageCodes], mode: Mode) -> Result<Decoded> {
        if codes.len() != STAGES {
            return Err(Error::invalid(format!("expected {STAGES} stage codes, got {}", codes.len())));
        }
        let b = batch_size(&codes[0]).ok_or_else(|| Error::invalid("stage codes are empty"))?;
        let n = self.prior.len();
        let mut q = self.prior_tensor.unsqueeze(0)?.broadcast_as((b, n, 3))?.contiguous()?;
        let mut graphs = vec![self.prior_graph.clone()];
        let mut observed = Vec::with_capacity(STAGES);
        for (i, (stage, c)) in self.stages.iter().zip(codes).enumerate() {
            let (mut h, _) = stage.block.forward(&q, &graphs)?;
            let mut stats = None;
            if let (Some(sigma), Some(mu)) = (&c.sigma, &c.mu) {
                let (out, obs) = adain(
                    &h,
                    sigma,
                    mu,
                    &self.norm[i],
                    mode,
                    self.config.norm_scope,
                    self.config.norm_eps,
                )?;
                h = out;
                stats = obs;
            }
            if let Some(add) = &c.geo_add {
                h = h.broadcast_add(&add.unsqueeze(1)?)?;
            }
            if let (Some(z), Some(phi), Some(bank)) = (&c.z, &stage.inject, self.af[i].bank()) {
                h = inject_semantic(&h, &bank.project(z)?, phi)?;
            }
            if let Some(add) = &c.sem_add {
                h = h.broadcast_add(&add.unsqueeze(1)?)?;
            }
            observed.push(stats);
            q = h;
            if i + 1 < STAGES {
                graphs = feature_graphs(&q, self.config.k_neighbors)?;
            }
        }
        let displacement = self.head.forward(&q)?;
        Ok(Decoded {
            points: displacement.broadcast_add(&self.prior_tensor)?,
            stats: observed,
        })
    }

    /// Encode, condition and decode a batch.
    pub fn forward_batch(&self, condition: &Condition<'_>, mode: Mode) -> Result<(Decoded, Vec<StageCodes>)> {
        let codes = self.conditioning(&self.encode(condition)?)?;
        let decoded = self.decode(&codes, mode)?;
        Ok((decoded, codes))
    }

    /// Single-image reconstruction. Train mode normalises with the sample's
    /// own statistics but leaves the running averages untouched.
    pub fn forward_reconstruct(&self, image: &Image, mode: Mode) -> Result<Reconstruction> {
        self.forward_single(&Condition::Images(&[image]), mode)
    }

    /// Single partial-cloud completion.
    pub fn forward_complete(&self, partial: &PointCloud, mode: Mode) -> Result<Reconstruction> {
        self.forward_single(&Condition::Partials(&[partial]), mode)
    }

    fn forward_single(&self, condition: &Condition<'_>, mode: Mode) -> Result<Reconstruction> {
        let (decoded, codes) = self.forward_batch(condition, mode)?;
        Ok(Reconstruction {
            cloud: first_cloud(&decoded.points)?,
            codes: CodeSet::from_batch(&codes, 0)?,
        })
    }

    /// Decodes captured code sets as one batch.
    pub fn replay_batch(&self, sets: &[&CodeSet], mode: Mode) -> Result<Vec<PointCloud>> {
        let codes = self.codes_to_batch(sets)?;
        let decoded = self.decode(&codes, mode)?;
        split_clouds(&decoded.points)
    }

    pub fn replay(&self, codes: &CodeSet, mode: Mode) -> Result<PointCloud> {
        Ok(self.replay_batch(&[codes], mode)?.remove(0))
    }

    /// Validates code sets against this model and stacks them into tensors.
    pub fn codes_to_batch(&self, sets: &[&CodeSet]) -> Result<Vec<StageCodes>> {
        if sets.is_empty() {
            return Err(Error::invalid("no code sets to decode"));
        }
        let dtype = self.dtype();
        let n = self.prior.len();
        let variant = self.config.variant;
        let d = self.config.code_dim;
        let mut out = Vec::with_capacity(STAGES);
        for stage in 1..=STAGES {
            let c = self.config.stage_channels(stage)?;
            let entries: Vec<&StageCodeSet> = sets.iter().map(|s| s.stage(stage)).collect::<Result<_>>()?;
            let stack = |name: &str, present: bool, len: usize, get: &dyn Fn(&StageCodeSet) -> Option<&[f64]>, shape: &[usize]| -> Result<Option<Tensor>> {
                let mut data = Vec::with_capacity(entries.len() * len);
                for e in &entries {
                    match (get(e), present) {
                        (Some(v), true) if v.len() == len => data.extend_from_slice(v),
                        (None, false) => {}
                        (Some(v), true) => {
                            return Err(Error::invalid(format!(
                                "stage {stage} {name} has {} values, expected {len}",
                                v.len()
                            )))
                        }
                        (None, true) => return Err(Error::invalid(format!("stage {stage} is missing {name}"))),
                        (Some(_), false) => {
                            return Err(Error::invalid(format!("stage {stage} {name} is not used by this variant")))
                        }
                    }
                }
                if !present {
                    return Ok(None);
                }
                let mut full = vec![entries.len()];
                full.extend_from_slice(shape);
                Ok(Some(tensor_from_f64(data, &full, dtype)?))
            };
            out.push(StageCodes {
                z: stack("z", variant.has_semantic(), d, &|e| e.z.as_ref().map(|z| z.values.as_slice()), &[d])?,
                sigma: stack("sigma", variant.has_geometric(), n * c, &|e| e.styles.as_ref().map(|s| s.sigma.as_slice()), &[n, c])?,
                mu: stack("mu", variant.has_geometric(), n * c, &|e| e.styles.as_ref().map(|s| s.mu.as_slice()), &[n, c])?,
                geo_add: stack("geometric_add", variant.has_geometric_mlp(), c, &|e| e.geometric_add.as_deref(), &[c])?,
                sem_add: stack("semantic_add", variant.has_semantic_mlp(), c, &|e| e.semantic_add.as_deref(), &[c])?,
            });
        }
        Ok(out)
    }
}

fn batch_size(codes: &StageCodes) -> Option<usize> {
    [&codes.z, &codes.sigma, &codes.mu, &codes.geo_add, &codes.sem_add]
        .into_iter()
        .flatten()
        .next()
        .and_then(|t| t.dims().first().copied())
}

/// Splits a `(B, N, 3)` tensor into clouds.
pub fn split_clouds(points: &Tensor) -> Result<Vec<PointCloud>> {
    let (b, n, _) = points.dims3()?;
    let flat = to_f64_vec(points)?;
    (0..b)
        .map(|i| PointCloud::from_flat(&flat[i * n * 3..(i + 1) * n * 3]))
        .collect()
}

fn first_cloud(points: &Tensor) -> Result<PointCloud> {
    Ok(split_clouds(points)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use candle_core::Device;

    pub(crate) fn tiny(variant: Variant, task: Task) -> ModelConfig {
        ModelConfig {
            task,
            variant,
            image_resolution: 32,
            encoder_channels: vec![4, 8],
            feature_dim: 16,
            point_hidden_dim: 8,
            point_feature_dim: 8,
            num_points: 32,
            channels: vec![6, 8, 10],
            code_dim: 4,
            k_neighbors: 4,
            head_hidden: 8,
            zero_init_head: false,
            ..ModelConfig::default()
        }
    }

    fn image(seed: usize) -> Image {
        let px = (0..32 * 32)
            .map(|i| {
                let (r, c) = ((i / 32) as f32, (i % 32) as f32);
                let d = ((r - 16.0).powi(2) + (c - 14.0 - seed as f32).powi(2)).sqrt();
                if d < 6.0 + seed as f32 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Image::new(32, px).unwrap()
    }

    fn t3(rows: &[Vec<f64>]) -> Tensor {
        let n = rows.len();
        let c = rows[0].len();
        Tensor::from_vec(rows.concat(), (1, n, c), &Device::Cpu).unwrap()
    }

    #[test]
    fn adain_hand_example() {
        let q = t3(&[vec![1.0], vec![3.0]]);
        let sigma = t3(&[vec![2.0], vec![2.0]]);
        let mu = t3(&[vec![5.0], vec![5.0]]);
        let (out, stats) = adain(&q, &sigma, &mu, &NormStats::new(1, 0.9), Mode::Train, NormScope::Sample, 1e-5).unwrap();
        let out = to_f64_vec(&out).unwrap();
        // std of [1, 3] is 1, so the normalised channel is [-1, 1] up to eps.
        assert!((out[0] - 3.0).abs() < 1e-4 && (out[1] - 7.0).abs() < 1e-4, "{out:?}");
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![1.0]);
    }

    #[test]
    fn adain_constant_channel_returns_shift() {
        let q = t3(&[vec![4.0], vec![4.0], vec![4.0]]);
        let sigma = t3(&[vec![3.0], vec![3.0], vec![3.0]]);
        let mu = t3(&[vec![-1.5], vec![0.5], vec![2.0]]);
        let (out, _) = adain(&q, &sigma, &mu, &NormStats::new(1, 0.9), Mode::Train, NormScope::Sample, 1e-5).unwrap();
        assert_eq!(to_f64_vec(&out).unwrap(), vec![-1.5, 0.5, 2.0]);
    }

    #[test]
    fn adain_eval_uses_running_stats() {
        let q = t3(&[vec![1.0], vec![3.0]]);
        let ones = t3(&[vec![1.0], vec![1.0]]);
        let zeros = t3(&[vec![0.0], vec![0.0]]);
        let stats = NormStats {
            running_mean: vec![1.0],
            running_var: vec![4.0],
            momentum: 0.9,
        };
        let (out, obs) = adain(&q, &ones, &zeros, &stats, Mode::Eval, NormScope::Sample, 0.0).unwrap();
        assert!(obs.is_none());
        assert_eq!(to_f64_vec(&out).unwrap(), vec![0.0, 1.0]);
        assert!(adain(&q, &t3(&[vec![1.0]]), &zeros, &stats, Mode::Eval, NormScope::Sample, 0.0).is_err());
    }

    #[test]
    fn running_average_update() {
        let mut s = NormStats::new(2, 0.9);
        s.update(&BatchStats {
            mean: vec![1.0, -2.0],
            var: vec![3.0, 0.5],
        })
        .unwrap();
        assert!((s.running_mean[0] - 0.1).abs() < 1e-15 && (s.running_mean[1] + 0.2).abs() < 1e-15);
        assert!((s.running_var[0] - 1.2).abs() < 1e-15 && (s.running_var[1] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn graph_block_on_identical_features_is_constant() {
        let mut store = ParamStore::new(DType::F64, 0);
        let block = GraphAttentionBlock::new(&mut store, "b", 3, 5).unwrap();
        let q = Tensor::ones((1, 6, 3), DType::F64, &Device::Cpu).unwrap();
        let graph = knn_graph(&vec![0.0f64; 6 * 3], 3, 2).unwrap();
        let (out, att) = block.forward(&q, &[graph]).unwrap();
        let rows = out.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        assert!(rows.iter().all(|r| r == &rows[0]));
        for row in att.squeeze(0).unwrap().to_vec2::<f64>().unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_block_is_permutation_equivariant() {
        let mut store = ParamStore::new(DType::F64, 1);
        let block = GraphAttentionBlock::new(&mut store, "b", 3, 4).unwrap();
        let prior = sample_sphere(12, 2).unwrap();
        let graph = knn_graph(&prior.to_flat_f64(), 3, 3).unwrap();
        let q = tensor_from_f64(prior.to_flat_f64(), &[1, 12, 3], DType::F64).unwrap();
        let perm: Vec<usize> = (0..12).map(|i| (i * 5) % 12).collect();
        let pp = prior.permuted(&perm).unwrap();
        let qp = tensor_from_f64(pp.to_flat_f64(), &[1, 12, 3], DType::F64).unwrap();
        let (a, _) = block.forward(&q, &[graph.clone()]).unwrap();
        let (b, _) = block.forward(&qp, &[graph.permuted(&perm).unwrap()]).unwrap();
        let a = a.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let b = b.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        for (i, &old) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((a[old][c] - b[i][c]).abs() < 1e-12);
            }
        }
        let wrong = knn_graph(&prior.to_flat_f64()[..30], 3, 3).unwrap();
        assert!(block.forward(&q, &[wrong]).is_err());
    }

    #[test]
    fn feature_graphs_agree_with_bruteforce() {
        let feats: Vec<f64> = (0..2 * 20 * 5).map(|i| ((i as f64) * 0.377).sin()).collect();
        let t = Tensor::from_vec(feats.clone(), (2, 20, 5), &Device::Cpu).unwrap();
        let graphs = feature_graphs(&t, 4).unwrap();
        for b in 0..2 {
            let want = knn_graph(&feats[b * 100..(b + 1) * 100], 5, 4).unwrap();
            assert_eq!(graphs[b], want);
        }
    }

    #[test]
    fn zero_injection_and_additivity() {
        let mut store = ParamStore::new(DType::F64, 3);
        let phi = Linear::new(&mut store, "phi", 3, 3).unwrap();
        let q = Tensor::from_vec((0..12).map(|i| i as f64 * 0.1).collect::<Vec<_>>(), (1, 4, 3), &Device::Cpu).unwrap();
        let s = Tensor::from_vec((0..12).map(|i| (i as f64).cos()).collect::<Vec<_>>(), (1, 4, 3), &Device::Cpu).unwrap();
        let injected = inject_semantic(&q, &s, &phi).unwrap();
        assert_eq!(injected.dims(), q.dims());
        let delta = leaky_relu(&phi.forward(&s).unwrap()).unwrap();
        let back = to_f64_vec(&(injected - delta).unwrap()).unwrap();
        for (a, b) in back.iter().zip(to_f64_vec(&q).unwrap()) {
            assert!((a - b).abs() < 1e-15);
        }
        for name in ["phi.weight", "phi.bias"] {
            let p = store.get(name).unwrap();
            store.set(name, &p.zeros_like().unwrap()).unwrap();
        }
        assert_eq!(to_f64_vec(&inject_semantic(&q, &s, &phi).unwrap()).unwrap(), to_f64_vec(&q).unwrap());
        assert!(inject_semantic(&q, &s.narrow(1, 0, 2).unwrap(), &phi).is_err());
    }

    #[test]
    fn zero_head_returns_prior_for_every_variant() {
        for variant in Variant::ALL {
            let cfg = ModelConfig {
                zero_init_head: true,
                ..tiny(variant, Task::Reconstruction)
            };
            let model = Model::new(cfg, 7, DType::F32).unwrap();
            let out = model.forward_reconstruct(&image(1), Mode::Eval).unwrap();
            let prior: Vec<f32> = model.prior().to_flat_f32();
            assert_eq!(out.cloud.to_flat_f32(), prior, "{variant:?}");
        }
        let cfg = ModelConfig {
            zero_init_head: true,
            ..tiny(Variant::Full, Task::Completion)
        };
        let model = Model::new(cfg, 7, DType::F32).unwrap();
        let partial = sample_sphere(20, 4).unwrap();
        let out = model.forward_complete(&partial, Mode::Eval).unwrap();
        assert_eq!(out.cloud.to_flat_f32(), model.prior().to_flat_f32());
    }

    #[test]
    fn eval_forward_is_deterministic_and_replayable() {
        for variant in Variant::ALL {
            let model = Model::new(tiny(variant, Task::Reconstruction), 3, DType::F32).unwrap();
            let a = model.forward_reconstruct(&image(0), Mode::Eval).unwrap();
            let b = model.forward_reconstruct(&image(0), Mode::Eval).unwrap();
            assert_eq!(a.cloud, b.cloud);
            assert_eq!(model.replay(&a.codes, Mode::Eval).unwrap(), a.cloud);
            assert_eq!(a.codes.stages.len(), 3);
        }
    }

    #[test]
    fn batched_forward_matches_single_samples() {
        let model = Model::new(tiny(Variant::Full, Task::Reconstruction), 3, DType::F64).unwrap();
        let (i0, i1) = (image(0), image(2));
        let (decoded, _) = model.forward_batch(&Condition::Images(&[&i0, &i1]), Mode::Eval).unwrap();
        let clouds = split_clouds(&decoded.points).unwrap();
        for (cloud, img) in clouds.iter().zip([&i0, &i1]) {
            let single = model.forward_reconstruct(img, Mode::Eval).unwrap().cloud;
            for (a, b) in cloud.points().iter().zip(single.points()) {
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn permuting_the_prior_permutes_the_output() {
        let mut model = Model::new(tiny(Variant::Full, Task::Reconstruction), 5, DType::F64).unwrap();
        let img = image(1);
        let before = model.forward_reconstruct(&img, Mode::Eval).unwrap().cloud;
        let perm: Vec<usize> = (0..32).map(|i| (i * 7 + 3) % 32).collect();
        model.permute_prior(&perm).unwrap();
        let after = model.forward_reconstruct(&img, Mode::Eval).unwrap().cloud;
        for (i, &old) in perm.iter().enumerate() {
            for k in 0..3 {
                assert!((after.points()[i][k] - before.points()[old][k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn completion_ignores_partial_point_order() {
        let model = Model::new(tiny(Variant::Full, Task::Completion), 5, DType::F32).unwrap();
        let partial = sample_sphere(24, 8).unwrap();
        let perm: Vec<usize> = (0..24).rev().collect();
        let a = model.forward_complete(&partial, Mode::Eval).unwrap().cloud;
        let b = model.forward_complete(&partial.permuted(&perm).unwrap(), Mode::Eval).unwrap().cloud;
        for (p, q) in a.points().iter().zip(b.points()) {
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() < 1e-5);
            }
        }
        assert!(model.forward_reconstruct(&image(0), Mode::Eval).is_err());
    }

    #[test]
    fn replay_rejects_mismatched_codes() {
        let model = Model::new(tiny(Variant::Full, Task::Reconstruction), 5, DType::F32).unwrap();
        let mut codes = model.forward_reconstruct(&image(0), Mode::Eval).unwrap().codes;
        codes.stages[1].z.as_mut().unwrap().values.pop();
        assert!(model.replay(&codes, Mode::Eval).is_err());
        let other = Model::new(tiny(Variant::OnlyMlp, Task::Reconstruction), 5, DType::F32).unwrap();
        let codes = model.forward_reconstruct(&image(0), Mode::Eval).unwrap().codes;
        assert!(other.replay(&codes, Mode::Eval).is_err());
    }
}
