//! Condition encoders: a strided CNN for silhouettes and a shared-MLP point
//! encoder with inverse-distance feature propagation for partial clouds.

use candle_core::{Tensor, D};

use crate::config::ModelConfig;
use crate::geometry::{sq_dist, Point, PointCloud};
use crate::image::Image;
use crate::nn::{leaky_relu, tensor_from_f32, tensor_from_f64, to_f32_vec, Init, Linear, ParamStore};
use crate::{Error, Result};

/// Image feature `x` (or point-cloud feature `x̂`), one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalFeature {
    pub values: Vec<f32>,
}

/// `N x F` per-point features aligned with the sphere prior.
#[derive(Clone, Debug, PartialEq)]
pub struct PerPointFeatures {
    pub rows: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

pub struct ImageEncoder {
    blocks: Vec<(Tensor, Tensor)>,
    head: Linear,
    resolution: usize,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, config: &ModelConfig) -> Result<Self> {
        let mut blocks = Vec::with_capacity(config.encoder_channels.len());
        let mut cin = 1;
        for (i, &cout) in config.encoder_channels.iter().enumerate() {
            let fan_in = cin * 9;
            let w = store.create(&format!("image_encoder.conv{i}.weight"), &[cout, cin, 3, 3], Init::Uniform { fan_in })?;
            let b = store.create(&format!("image_encoder.conv{i}.bias"), &[cout], Init::Uniform { fan_in })?;
            blocks.push((w, b));
            cin = cout;
        }
        let head = Linear::new(store, "image_encoder.head", cin, config.feature_dim)?;
        Ok(Self {
            blocks,
            head,
            resolution: config.image_resolution,
        })
    }

    /// `(B, 1, H, W)` images to `(B, D)` features.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 1 || h != self.resolution || w != self.resolution {
            return Err(Error::invalid(format!(
                "encoder expects 1x{r}x{r} images, got {c}x{h}x{w}",
                r = self.resolution
            )));
        }
        let mut x = images.clone();
        for (w, b) in &self.blocks {
            x = x.conv2d(w, 1, 2, 1, 1)?;
            x = leaky_relu(&x.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?)?;
        }
        let pooled = x.mean(D::Minus1)?.mean(D::Minus1)?;
        self.head.forward(&pooled)
    }

    pub fn encode(&self, image: &Image) -> Result<GlobalFeature> {
        let dtype = self.head.weight().dtype();
        let r = image.resolution();
        let t = tensor_from_f32(image.pixels().to_vec(), &[1, 1, r, r], dtype)?;
        Ok(GlobalFeature {
            values: to_f32_vec(&self.forward(&t)?)?,
        })
    }
}

/// Stacks images into a `(B, 1, H, W)` batch.
pub fn image_batch(images: &[&Image], dtype: candle_core::DType) -> Result<Tensor> {
    let r = images
        .first()
        .ok_or_else(|| Error::invalid("empty image batch"))?
        .resolution();
    let mut data = Vec::with_capacity(images.len() * r * r);
    for img in images {
        if img.resolution() != r {
            return Err(Error::invalid("images in a batch must share one resolution"));
        }
        data.extend_from_slice(img.pixels());
    }
    tensor_from_f32(data, &[images.len(), 1, r, r], dtype)
}

/// Stacks equally sized clouds into a `(B, M, 3)` batch.
pub fn cloud_batch(clouds: &[&PointCloud], dtype: candle_core::DType) -> Result<Tensor> {
    let m = clouds
        .first()
        .ok_or_else(|| Error::invalid("empty cloud batch"))?
        .len();
    let mut data = Vec::with_capacity(clouds.len() * m * 3);
    for c in clouds {
        if c.len() != m {
            return Err(Error::invalid("clouds in a batch must share one size"));
        }
        data.extend(c.to_flat_f64());
    }
    tensor_from_f64(data, &[clouds.len(), m, 3], dtype)
}

/// PointNet-style encoder: shared per-point MLP, max pool, linear head.
pub struct PointEncoder {
    first: Linear,
    second: Linear,
    head: Linear,
    neighbors: usize,
}

/// Output of [`PointEncoder::forward`].
pub struct PointEncoding {
    /// `(B, D)` pooled feature.
    pub global: Tensor,
    /// `(B, M, F)` features of the input points.
    pub point_features: Tensor,
}

impl PointEncoder {
    pub fn new(store: &mut ParamStore, config: &ModelConfig) -> Result<Self> {
        Ok(Self {
            first: Linear::new(store, "point_encoder.mlp0", 3, config.point_hidden_dim)?,
            second: Linear::new(store, "point_encoder.mlp1", config.point_hidden_dim, config.point_feature_dim)?,
            head: Linear::new(store, "point_encoder.head", config.point_feature_dim, config.feature_dim)?,
            neighbors: config.propagation_neighbors,
        })
    }

    /// `(B, M, 3)` partial clouds in.
    pub fn forward(&self, points: &Tensor) -> Result<PointEncoding> {
        let (_, m, three) = points.dims3()?;
        if m == 0 || three != 3 {
            return Err(Error::invalid("point encoder expects a non-empty (B, M, 3) batch"));
        }
        let h = leaky_relu(&self.first.forward(points)?)?;
        let f = leaky_relu(&self.second.forward(&h)?)?;
        let pooled = f.max(1)?;
        Ok(PointEncoding {
            global: self.head.forward(&pooled)?,
            point_features: f,
        })
    }

    /// Interpolates `(B, M, F)` source features onto the `N` prior points.
    /// Each target takes the `k` nearest sources weighted by
    /// `1 / (d^2 + 1e-8)`, normalised to sum to one.
    pub fn propagate(&self, point_features: &Tensor, sources: &[Vec<Point>], targets: &PointCloud) -> Result<Tensor> {
        propagate_features(point_features, sources, targets, self.neighbors)
    }

    pub fn encode(&self, partial: &PointCloud, prior: &PointCloud) -> Result<(GlobalFeature, PerPointFeatures)> {
        let dtype = self.head.weight().dtype();
        let batch = cloud_batch(&[partial], dtype)?;
        let enc = self.forward(&batch)?;
        let per_point = self.propagate(&enc.point_features, &[partial.points().to_vec()], prior)?;
        let (_, rows, dim) = per_point.dims3()?;
        Ok((
            GlobalFeature {
                values: to_f32_vec(&enc.global)?,
            },
            PerPointFeatures {
                rows,
                dim,
                values: to_f32_vec(&per_point)?,
            },
        ))
    }
}

pub(crate) const PROPAGATION_EPS: f64 = 1e-8;

/// Neighbour indices and normalised weights for inverse-distance
/// interpolation from `sources` onto `targets`.
pub(crate) fn propagation_weights(sources: &[Point], targets: &[Point], k: usize) -> Vec<(usize, f64)> {
    let k = k.min(sources.len());
    let mut out = Vec::with_capacity(targets.len() * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(sources.len());
    for t in targets {
        cand.clear();
        cand.extend(sources.iter().enumerate().map(|(j, s)| (sq_dist(t, s), j)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if cand.len() > k {
            cand.select_nth_unstable_by(k - 1, cmp);
            cand.truncate(k);
        }
        cand.sort_unstable_by(cmp);
        let inv: Vec<f64> = cand.iter().map(|(d, _)| 1.0 / (d + PROPAGATION_EPS)).collect();
        let total: f64 = inv.iter().sum();
        out.extend(cand.iter().zip(&inv).map(|(&(_, j), w)| (j, w / total)));
    }
    out
}

pub(crate) fn propagate_features(point_features: &Tensor, sources: &[Vec<Point>], targets: &PointCloud, k: usize) -> Result<Tensor> {
    let (b, m, f) = point_features.dims3()?;
    if sources.len() != b || sources.iter().any(|s| s.len() != m) {
        return Err(Error::invalid("source coordinates do not match the feature batch"));
    }
    let n = targets.len();
    let k = k.min(m);
    let mut index = Vec::with_capacity(b * n * k);
    let mut weight = Vec::with_capacity(b * n * k);
    for (bi, src) in sources.iter().enumerate() {
        for (j, w) in propagation_weights(src, targets.points(), k) {
            index.push((bi * m + j) as u32);
            weight.push(w);
        }
    }
    let index = Tensor::from_vec(index, b * n * k, point_features.device())?;
    let weight = tensor_from_f64(weight, &[b, n, k, 1], point_features.dtype())?;
    let gathered = point_features
        .reshape((b * m, f))?
        .index_select(&index, 0)?
        .reshape((b, n, k, f))?;
    Ok(gathered.broadcast_mul(&weight)?.sum(2)?)
}
