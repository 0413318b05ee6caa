use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_shape, render_silhouette, AttributeSpec, Family, View};
use crate::geometry::{read_apc, write_apc, PointCloud};
use crate::image::Image;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub out_dir: PathBuf,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub resolution: usize,
    /// Dense ground-truth points stored per shape.
    pub n_points: usize,
    pub view: View,
    pub families: Vec<Family>,
}

impl DatasetConfig {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            train: 512,
            val: 64,
            test: 128,
            seed: 0,
            resolution: 128,
            n_points: 8192,
            view: View::default(),
            families: Family::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    /// Paths relative to the dataset root.
    pub shape: String,
    pub image: String,
    pub spec: AttributeSpec,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub seed: u64,
    pub resolution: usize,
    pub n_points: usize,
    pub view: View,
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
    pub test: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> &[SampleRecord] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn shape_path(&self, rec: &SampleRecord) -> PathBuf {
        self.root.join(&rec.shape)
    }

    pub fn image_path(&self, rec: &SampleRecord) -> PathBuf {
        self.root.join(&rec.image)
    }

    pub fn load_shape(&self, rec: &SampleRecord) -> Result<PointCloud> {
        read_apc(self.shape_path(rec))
    }

    pub fn load_image(&self, rec: &SampleRecord) -> Result<Image> {
        Image::load_png(self.image_path(rec))
    }

    /// Reads a manifest; `root` is re-anchored to the manifest's directory so
    /// datasets can be moved.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Checks split disjointness and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for rec in self.train.iter().chain(&self.val).chain(&self.test) {
            if !ids.insert(&rec.id) {
                return Err(Error::format("manifest", format!("sample {} appears twice", rec.id)));
            }
            rec.spec.validate()?;
            for p in [self.shape_path(rec), self.image_path(rec)] {
                if !p.is_file() {
                    return Err(Error::io(
                        p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "referenced file is missing"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Generates and writes every sample, then the manifest. Sample `i` gets
/// family `families[i % len]` and a spec and seed drawn from the master
/// seed, so the whole dataset is a function of the config.
pub fn build_dataset(config: &DatasetConfig) -> Result<DatasetManifest> {
    if config.families.is_empty() {
        return Err(Error::invalid("dataset needs at least one shape family"));
    }
    let root = &config.out_dir;
    for sub in ["shapes", "images"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let total = config.train + config.val + config.test;
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let plans: Vec<(String, AttributeSpec, u64)> = (0..total)
        .map(|i| {
            let family = config.families[i % config.families.len()];
            let spec = AttributeSpec::sample(family, &mut master);
            (format!("{i:06}"), spec, master.random())
        })
        .collect();

    let records = plans
        .into_par_iter()
        .map(|(id, spec, seed)| {
            let cloud = generate_shape(&spec, config.n_points, seed)?;
            let image = render_silhouette(&cloud, config.view, config.resolution)?;
            let rec = SampleRecord {
                shape: format!("shapes/{id}.apc"),
                image: format!("images/{id}.png"),
                id,
                spec,
                seed,
            };
            write_apc(root.join(&rec.shape), &cloud)?;
            image.save_png(root.join(&rec.image))?;
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut it = records.into_iter();
    let manifest = DatasetManifest {
        root: root.clone(),
        seed: config.seed,
        resolution: config.resolution,
        n_points: config.n_points,
        view: config.view,
        train: it.by_ref().take(config.train).collect(),
        val: it.by_ref().take(config.val).collect(),
        test: it.collect(),
    };
    manifest.save(root.join(MANIFEST_FILE))?;
    Ok(manifest)
}
