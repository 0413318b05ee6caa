//! In-memory views of dataset splits for training and evaluation.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::{ModelConfig, Task};
use crate::geometry::PointCloud;
use crate::image::Image;
use crate::synthgen::{make_partial, AttributeSpec, DatasetManifest, Family, Split};
use crate::{Error, Result};

/// One dataset record with its files loaded.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub spec: AttributeSpec,
    pub seed: u64,
    pub image: Image,
    /// The stored dense ground-truth sampling.
    pub dense: PointCloud,
    /// Partial input for completion models.
    pub partial: Option<PointCloud>,
}

impl Sample {
    pub fn family(&self) -> Family {
        self.spec.family
    }
}

/// Draws `n` points from `cloud`, without replacement when it has at least
/// `n` points.
pub fn resample(cloud: &PointCloud, n: usize, rng: &mut impl Rng) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::invalid("cannot resample to zero points"));
    }
    let idx: Vec<usize> = if cloud.len() >= n {
        let mut v = sample(rng, cloud.len(), n).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..n).map(|_| rng.random_range(0..cloud.len())).collect()
    };
    cloud.select(&idx)
}

/// A random unit viewing direction.
pub fn random_direction(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Partial input for a completion sample: `points` drawn from the dense
/// cloud, then cropped to `keep_fraction` from a per-sample random view.
/// Depends only on the sample seed.
pub fn partial_for(dense: &PointCloud, sample_seed: u64, points: usize, keep_fraction: f64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed ^ 0x5041_5254);
    let source = resample(dense, points, &mut rng)?;
    make_partial(&source, random_direction(&mut rng), keep_fraction)
}

/// Loads a split, checking it against the model configuration.
pub fn load_split(manifest: &DatasetManifest, split: Split, config: &ModelConfig, keep_fraction: f64) -> Result<Vec<Sample>> {
    if manifest.resolution != config.image_resolution {
        return Err(Error::invalid(format!(
            "dataset images are {}px but the model expects {}px",
            manifest.resolution, config.image_resolution
        )));
    }
    manifest
        .split(split)
        .par_iter()
        .map(|rec| {
            let dense = manifest.load_shape(rec)?;
            let partial = match config.task {
                Task::Completion => Some(partial_for(&dense, rec.seed, config.num_points, keep_fraction)?),
                Task::Reconstruction => None,
            };
            Ok(Sample {
                id: rec.id.clone(),
                spec: rec.spec.clone(),
                seed: rec.seed,
                image: manifest.load_image(rec)?,
                dense,
                partial,
            })
        })
        .collect()
}
