//! Attribute flow: per-stage geometric styles and semantic features
//! produced from the global condition feature.
//!
//! The geometric sub-pipe maps `[x : p_k]` through a per-point MLP to a
//! scale/shift pair. The semantic sub-pipe squeezes `x` into a short code `z`
//! and expands it through a bank of orthonormal directions:
//! `s = sum_j z_j * l_j * u_j + b`.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{check_stage, ModelConfig, Task, Variant};
use crate::encoders::GlobalFeature;
use crate::geometry::PointCloud;
use crate::nn::{leaky_relu, softplus, tensor_from_f64, to_f64_vec, Init, Linear, ParamStore};
use crate::{Error, Result};

/// Per-stage geometric styles, each `rows x channels`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StylePair {
    pub stage: usize,
    pub rows: usize,
    pub channels: usize,
    pub sigma: Vec<f64>,
    pub mu: Vec<f64>,
}

/// Per-stage semantic code `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeCode {
    pub stage: usize,
    pub values: Vec<f64>,
}

/// Output of the subspace projection, `rows x channels`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticFeature {
    pub stage: usize,
    pub rows: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

/// Basis `U` stored as an `(N*C, d)` matrix, weights `l` of length `d` and
/// bias `b` of shape `(N, C)`.
#[derive(Clone, Debug)]
pub struct SubspaceBank {
    basis: Tensor,
    weights: Tensor,
    bias: Tensor,
    rows: usize,
    channels: usize,
}

impl SubspaceBank {
    pub fn new(store: &mut ParamStore, prefix: &str, rows: usize, channels: usize, code_dim: usize) -> Result<Self> {
        let basis = store.create(&format!("{prefix}.basis"), &[rows * channels, code_dim], Init::OrthonormalColumns)?;
        let weights = store.create(&format!("{prefix}.weights"), &[code_dim], Init::Ones)?;
        let bias = store.create(&format!("{prefix}.bias"), &[rows, channels], Init::Zeros)?;
        Ok(Self {
            basis,
            weights,
            bias,
            rows,
            channels,
        })
    }

    /// Builds a bank from explicit tensors: basis `(N*C, d)`, weights `(d)`,
    /// bias `(N, C)`.
    pub fn from_tensors(basis: Tensor, weights: Tensor, bias: Tensor) -> Result<Self> {
        let (flat, d) = basis.dims2()?;
        let (rows, channels) = bias.dims2()?;
        if flat != rows * channels || weights.dims() != [d] {
            return Err(Error::invalid(format!(
                "bank shapes disagree: basis {:?}, weights {:?}, bias {:?}",
                basis.dims(),
                weights.dims(),
                bias.dims()
            )));
        }
        Ok(Self {
            basis,
            weights,
            bias,
            rows,
            channels,
        })
    }

    pub fn code_dim(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn basis(&self) -> &Tensor {
        &self.basis
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    /// `(B, d)` codes to `(B, N, C)` semantic features.
    pub fn project(&self, z: &Tensor) -> Result<Tensor> {
        let (b, d) = z.dims2()?;
        if d != self.code_dim() {
            return Err(Error::invalid(format!(
                "code has {d} entries but the bank has {} directions",
                self.code_dim()
            )));
        }
        let scaled = z.broadcast_mul(&self.weights)?;
        let s = scaled.matmul(&self.basis.t()?)?.reshape((b, self.rows, self.channels))?;
        Ok(s.broadcast_add(&self.bias)?)
    }

    /// `U^T U` as a `(d, d)` tensor.
    pub fn gram(&self) -> Result<Tensor> {
        Ok(self.basis.t()?.matmul(&self.basis)?)
    }

    /// `||U^T U - I||_F` evaluated in double precision.
    pub fn orthogonality_deviation(&self) -> Result<f64> {
        let d = self.code_dim();
        let u = self.basis.to_dtype(DType::F64)?;
        let g = to_f64_vec(&u.t()?.matmul(&u)?)?;
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                let e = g[i * d + j] - if i == j { 1.0 } else { 0.0 };
                acc += e * e;
            }
        }
        Ok(acc.sqrt())
    }
}

/// Projects one code through a bank.
pub fn attribute_project(code: &AttributeCode, bank: &SubspaceBank) -> Result<SemanticFeature> {
    let dtype = bank.basis.dtype();
    let z = tensor_from_f64(code.values.clone(), &[1, code.values.len()], dtype)?;
    let s = bank.project(&z)?;
    Ok(SemanticFeature {
        stage: code.stage,
        rows: bank.rows,
        channels: bank.channels,
        values: to_f64_vec(&s)?,
    })
}

/// Per-point MLP over `[x : p]` with two hidden layers of width `2C`. The
/// first layer is split into a condition part and a location part so the
/// repeated condition is never materialised.
#[derive(Clone, Debug)]
pub struct GeometricSubPipe {
    cond: Linear,
    loc: Linear,
    hidden: Linear,
    out: Linear,
    channels: usize,
    sigma_offset: f64,
}

impl GeometricSubPipe {
    pub fn new(store: &mut ParamStore, prefix: &str, input: usize, channels: usize, sigma_offset: f64) -> Result<Self> {
        let width = 2 * channels;
        // Fan-in of the joint [x : p] layer.
        let init = Init::Uniform { fan_in: input + 3 };
        Ok(Self {
            cond: Linear::with_init(store, &format!("{prefix}.cond"), input, width, init, true)?,
            loc: Linear::with_init(store, &format!("{prefix}.loc"), 3, width, init, false)?,
            hidden: Linear::new(store, &format!("{prefix}.hidden"), width, width)?,
            out: Linear::new(store, &format!("{prefix}.out"), width, width)?,
            channels,
            sigma_offset,
        })
    }

    /// `cond` is `(B, 1, Din)` for a repeated global feature or `(B, N, Din)`
    /// for per-point features; `prior` is `(N, 3)`. Returns `(sigma, mu)`,
    /// each `(B, N, C)`.
    pub fn forward(&self, cond: &Tensor, prior: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.cond.forward(cond)?.broadcast_add(&self.loc.forward(prior)?)?;
        let h = leaky_relu(&h)?;
        let h = leaky_relu(&self.hidden.forward(&h)?)?;
        let o = self.out.forward(&h)?;
        let c = self.channels;
        let sigma = (softplus(&o.narrow(2, 0, c)?)? + self.sigma_offset)?;
        let mu = o.narrow(2, c, c)?;
        Ok((sigma, mu))
    }
}

/// `z = tanh(W x + b)` followed by the stage's subspace bank.
#[derive(Clone, Debug)]
pub struct SemanticSubPipe {
    squeeze: Linear,
    bank: SubspaceBank,
}

impl SemanticSubPipe {
    pub fn new(store: &mut ParamStore, prefix: &str, feature_dim: usize, rows: usize, channels: usize, code_dim: usize) -> Result<Self> {
        Ok(Self {
            squeeze: Linear::new(store, &format!("{prefix}.squeeze"), feature_dim, code_dim)?,
            bank: SubspaceBank::new(store, &format!("{prefix}.bank"), rows, channels, code_dim)?,
        })
    }

    /// `(B, D)` to `(B, d)`.
    pub fn squeeze(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.squeeze.forward(x)?.tanh()?)
    }

    pub fn bank(&self) -> &SubspaceBank {
        &self.bank
    }
}

/// Two-layer MLP from the global feature to a per-channel offset, broadcast
/// over points. Stands in for a removed sub-pipe in the ablation variants.
#[derive(Clone, Debug)]
pub struct MlpAdd {
    first: Linear,
    second: Linear,
}

impl MlpAdd {
    pub fn new(store: &mut ParamStore, prefix: &str, feature_dim: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            first: Linear::new(store, &format!("{prefix}.0"), feature_dim, channels)?,
            second: Linear::new(store, &format!("{prefix}.1"), channels, channels)?,
        })
    }

    /// `(B, D)` to `(B, C)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.second.forward(&leaky_relu(&self.first.forward(x)?)?)
    }
}

/// Batched conditioning for one stage. Absent entries belong to sub-pipes
/// the variant does not have.
#[derive(Clone, Debug)]
pub struct StageCodes {
    /// `(B, d)`.
    pub z: Option<Tensor>,
    /// `(B, N, C)`.
    pub sigma: Option<Tensor>,
    /// `(B, N, C)`.
    pub mu: Option<Tensor>,
    /// `(B, C)` replacement for the geometric sub-pipe.
    pub geo_add: Option<Tensor>,
    /// `(B, C)` replacement for the semantic sub-pipe.
    pub sem_add: Option<Tensor>,
}

/// One stage of the attribute flow.
#[derive(Clone, Debug)]
pub struct AfModule {
    stage: usize,
    channels: usize,
    geometric: Option<GeometricSubPipe>,
    semantic: Option<SemanticSubPipe>,
    geometric_mlp: Option<MlpAdd>,
    semantic_mlp: Option<MlpAdd>,
}

impl AfModule {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, stage: usize) -> Result<Self> {
        check_stage(stage)?;
        let c = config.stage_channels(stage)?;
        let prefix = format!("stage{stage}");
        let variant: Variant = config.variant;
        let geo_input = match config.task {
            Task::Reconstruction => config.feature_dim,
            Task::Completion => config.point_feature_dim,
        };
        let geometric = if variant.has_geometric() {
            Some(GeometricSubPipe::new(store, &format!("{prefix}.geometric"), geo_input, c, config.sigma_offset)?)
        } else {
            None
        };
        let semantic = if variant.has_semantic() {
            Some(SemanticSubPipe::new(
                store,
                &format!("{prefix}.semantic"),
                config.feature_dim,
                config.num_points,
                c,
                config.code_dim,
            )?)
        } else {
            None
        };
        let geometric_mlp = if variant.has_geometric_mlp() {
            Some(MlpAdd::new(store, &format!("{prefix}.geometric_mlp"), config.feature_dim, c)?)
        } else {
            None
        };
        let semantic_mlp = if variant.has_semantic_mlp() {
            Some(MlpAdd::new(store, &format!("{prefix}.semantic_mlp"), config.feature_dim, c)?)
        } else {
            None
        };
        Ok(Self {
            stage,
            channels: c,
            geometric,
            semantic,
            geometric_mlp,
            semantic_mlp,
        })
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn geometric(&self) -> Option<&GeometricSubPipe> {
        self.geometric.as_ref()
    }

    pub fn semantic(&self) -> Option<&SemanticSubPipe> {
        self.semantic.as_ref()
    }

    pub fn bank(&self) -> Option<&SubspaceBank> {
        self.semantic.as_ref().map(|s| s.bank())
    }

    /// Batched conditioning. `global` is `(B, D)`; `geo_input` is `(B, 1, D)`
    /// or `(B, N, F)`; `prior` is `(N, 3)`.
    pub fn condition(&self, global: &Tensor, geo_input: &Tensor, prior: &Tensor) -> Result<StageCodes> {
        let (sigma, mu) = match &self.geometric {
            Some(g) => {
                let (s, m) = g.forward(geo_input, prior)?;
                (Some(s), Some(m))
            }
            None => (None, None),
        };
        Ok(StageCodes {
            z: self.semantic.as_ref().map(|s| s.squeeze(global)).transpose()?,
            sigma,
            mu,
            geo_add: self.geometric_mlp.as_ref().map(|m| m.forward(global)).transpose()?,
            sem_add: self.semantic_mlp.as_ref().map(|m| m.forward(global)).transpose()?,
        })
    }

    /// Geometric styles for a single global feature on `prior`.
    pub fn geometric_styles(&self, x: &GlobalFeature, prior: &PointCloud) -> Result<StylePair> {
        let g = self
            .geometric
            .as_ref()
            .ok_or_else(|| Error::invalid("this variant has no geometric sub-pipe"))?;
        let dtype = g.out.weight().dtype();
        let cond = tensor_from_f32_row(&x.values, dtype)?.unsqueeze(0)?;
        let p = tensor_from_f64(prior.to_flat_f64(), &[prior.len(), 3], dtype)?;
        let (s, m) = g.forward(&cond, &p)?;
        Ok(StylePair {
            stage: self.stage,
            rows: prior.len(),
            channels: self.channels,
            sigma: to_f64_vec(&s)?,
            mu: to_f64_vec(&m)?,
        })
    }

    pub fn squeeze_code(&self, x: &GlobalFeature) -> Result<AttributeCode> {
        let s = self
            .semantic
            .as_ref()
            .ok_or_else(|| Error::invalid("this variant has no semantic sub-pipe"))?;
        let dtype = s.bank.basis.dtype();
        let z = s.squeeze(&tensor_from_f32_row(&x.values, dtype)?)?;
        Ok(AttributeCode {
            stage: self.stage,
            values: to_f64_vec(&z)?,
        })
    }

    /// Styles, semantic feature and code for one sample.
    pub fn run(&self, x: &GlobalFeature, prior: &PointCloud) -> Result<(StylePair, SemanticFeature, AttributeCode)> {
        let styles = self.geometric_styles(x, prior)?;
        let code = self.squeeze_code(x)?;
        let bank = self.bank().expect("semantic sub-pipe checked by squeeze_code");
        let s = attribute_project(&code, bank)?;
        Ok((styles, s, code))
    }
}

fn tensor_from_f32_row(values: &[f32], dtype: DType) -> Result<Tensor> {
    crate::nn::tensor_from_f32(values.to_vec(), &[1, values.len()], dtype)
}
