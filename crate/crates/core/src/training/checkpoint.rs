//! Single-file checkpoints: a JSON header followed by raw little-endian
//! tensor data.
//!
//! Layout: `b"AFCK"`, `u32` version, `u64` header length, header JSON,
//! tensor payloads in header order. Tensors are kept in name order, so
//! saving a loaded checkpoint reproduces the original bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainHistory};
use crate::config::{ModelConfig, STAGES};
use crate::deformation::{Model, NormStats};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const NORM_PREFIX: &str = "norm.";

#[derive(Clone, Debug, PartialEq)]
enum Values {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
struct StoredTensor {
    shape: Vec<usize>,
    values: Values,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    epoch: usize,
    history: TrainHistory,
    norm_momentum: Vec<f64>,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to rebuild a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub epoch: usize,
    pub history: TrainHistory,
    norm_momentum: Vec<f64>,
    tensors: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, train_config: TrainConfig, epoch: usize, history: TrainHistory) -> Result<Self> {
        let mut tensors = BTreeMap::new();
        for (name, var) in model.params().vars() {
            let t = var.as_tensor();
            let values = match t.dtype() {
                DType::F64 => Values::F64(t.flatten_all()?.to_vec1()?),
                _ => Values::F32(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?),
            };
            tensors.insert(
                name.to_string(),
                StoredTensor {
                    shape: t.dims().to_vec(),
                    values,
                },
            );
        }
        for (i, s) in model.norm_stats().iter().enumerate() {
            let c = s.channels();
            for (field, v) in [("running_mean", &s.running_mean), ("running_var", &s.running_var)] {
                tensors.insert(
                    format!("{NORM_PREFIX}stage{}.{field}", i + 1),
                    StoredTensor {
                        shape: vec![c],
                        values: Values::F64(v.clone()),
                    },
                );
            }
        }
        Ok(Self {
            model_config: model.config().clone(),
            train_config,
            epoch,
            history,
            norm_momentum: model.norm_stats().iter().map(|s| s.momentum).collect(),
            tensors,
        })
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Rebuilds the model with the stored parameters and statistics.
    pub fn to_model(&self) -> Result<Model> {
        let dtype = self
            .tensors
            .iter()
            .find(|(k, _)| !k.starts_with(NORM_PREFIX))
            .map(|(_, t)| match t.values {
                Values::F32(_) => DType::F32,
                Values::F64(_) => DType::F64,
            })
            .unwrap_or(DType::F32);
        let mut model = Model::new(self.model_config.clone(), 0, dtype)?;
        let expected: Vec<String> = model.params().names().map(str::to_string).collect();
        for name in &expected {
            let stored = self
                .tensors
                .get(name)
                .ok_or_else(|| Error::format("checkpoint", format!("missing parameter {name}")))?;
            let t = match &stored.values {
                Values::F32(v) => Tensor::from_vec(v.clone(), stored.shape.as_slice(), &Device::Cpu)?,
                Values::F64(v) => Tensor::from_vec(v.clone(), stored.shape.as_slice(), &Device::Cpu)?,
            };
            model.params().set(name, &t)?;
        }
        let extra = self
            .tensors
            .keys()
            .filter(|k| !k.starts_with(NORM_PREFIX) && !expected.contains(k))
            .count();
        if extra > 0 {
            return Err(Error::format("checkpoint", format!("{extra} parameters do not belong to the model")));
        }
        if self.norm_momentum.len() != STAGES {
            return Err(Error::format("checkpoint", "wrong number of normalisation stages"));
        }
        let mut stats = Vec::with_capacity(STAGES);
        for stage in 1..=STAGES {
            let get = |field: &str| -> Result<Vec<f64>> {
                match self.tensors.get(&format!("{NORM_PREFIX}stage{stage}.{field}")) {
                    Some(StoredTensor {
                        values: Values::F64(v), ..
                    }) => Ok(v.clone()),
                    _ => Err(Error::format("checkpoint", format!("missing stage {stage} {field}"))),
                }
            };
            stats.push(NormStats {
                running_mean: get("running_mean")?,
                running_var: get("running_var")?,
                momentum: self.norm_momentum[stage - 1],
            });
        }
        model.set_norm_stats(stats)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model_config.clone(),
            train: self.train_config.clone(),
            epoch: self.epoch,
            history: self.history.clone(),
            norm_momentum: self.norm_momentum.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    dtype: match t.values {
                        Values::F32(_) => "f32".into(),
                        Values::F64(_) => "f64".into(),
                    },
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            match &t.values {
                Values::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Values::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |detail: &str| Error::format("checkpoint", detail.to_string());
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..len])?;
        let mut data = &body[len..];
        let mut tensors = BTreeMap::new();
        for entry in header.tensors {
            let count: usize = entry.shape.iter().product();
            let width = match entry.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(bad(&format!("unknown dtype {other}"))),
            };
            if data.len() < count * width {
                return Err(bad("truncated tensor data"));
            }
            let (chunk, rest) = data.split_at(count * width);
            data = rest;
            let values = if width == 4 {
                Values::F32(chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
            } else {
                Values::F64(chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect())
            };
            tensors.insert(entry.name, StoredTensor { shape: entry.shape, values });
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            model_config: header.model,
            train_config: header.train,
            epoch: header.epoch,
            history: header.history,
            norm_momentum: header.norm_momentum,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
