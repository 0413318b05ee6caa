use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Number of attribute-flow / deformation stages.
pub const STAGES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Silhouette image in, point cloud out.
    Reconstruction,
    /// Partial point cloud in, completed cloud out.
    Completion,
}

/// Population over which train-mode normalisation statistics are taken.
/// Eval mode always uses the running averages, which estimate `Batch`
/// statistics; `Sample` trains on per-sample statistics that eval mode
/// cannot reproduce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// Each sample's own points.
    Sample,
    /// All points of all samples in the batch.
    Batch,
}

/// Which conditioning paths a model uses. `Full` is the complete AF module;
/// the others remove or replace one or both of its sub-pipes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoSemantic,
    NoGeometric,
    SemanticMlp,
    GeometricMlp,
    OnlyMlp,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::NoSemantic,
        Variant::NoGeometric,
        Variant::SemanticMlp,
        Variant::GeometricMlp,
        Variant::OnlyMlp,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSemantic => "no_semantic",
            Variant::NoGeometric => "no_geometric",
            Variant::SemanticMlp => "semantic_mlp",
            Variant::GeometricMlp => "geometric_mlp",
            Variant::OnlyMlp => "only_mlp",
        }
    }

    /// Geometric styles modulate features through AdaIN.
    pub fn has_geometric(self) -> bool {
        matches!(self, Variant::Full | Variant::NoSemantic | Variant::SemanticMlp)
    }

    /// Attribute codes and subspace banks feed the semantic injection.
    pub fn has_semantic(self) -> bool {
        matches!(self, Variant::Full | Variant::NoGeometric | Variant::GeometricMlp)
    }

    /// A plain MLP of the global feature is added in place of the geometric sub-pipe.
    pub fn has_geometric_mlp(self) -> bool {
        matches!(self, Variant::GeometricMlp | Variant::OnlyMlp)
    }

    pub fn has_semantic_mlp(self) -> bool {
        matches!(self, Variant::SemanticMlp | Variant::OnlyMlp)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().replace('-', "_").to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown model variant {s:?}")))
    }
}

/// Architecture hyperparameters. Everything needed to rebuild a model's
/// parameter layout lives here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub task: Task,
    pub variant: Variant,
    pub image_resolution: usize,
    /// Output channels of the strided convolution blocks.
    pub encoder_channels: Vec<usize>,
    /// Width of the global feature x.
    pub feature_dim: usize,
    /// Hidden width of the shared per-point MLP in the point encoder.
    pub point_hidden_dim: usize,
    /// Width of the propagated per-point features (completion only).
    pub point_feature_dim: usize,
    /// Point count N of the sphere prior and of every output cloud.
    pub num_points: usize,
    pub prior_seed: u64,
    /// Per-stage feature widths C_i.
    pub channels: Vec<usize>,
    /// Attribute code length d.
    pub code_dim: usize,
    pub k_neighbors: usize,
    pub head_hidden: usize,
    /// Added after softplus so style scales stay bounded away from zero.
    pub sigma_offset: f64,
    pub norm_momentum: f64,
    pub norm_eps: f64,
    pub norm_scope: NormScope,
    pub propagation_neighbors: usize,
    /// Zero the last displacement layer so an untrained model returns its prior.
    pub zero_init_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            task: Task::Reconstruction,
            variant: Variant::Full,
            image_resolution: 128,
            encoder_channels: vec![16, 32, 64, 128],
            feature_dim: 256,
            point_hidden_dim: 64,
            point_feature_dim: 128,
            num_points: 2048,
            prior_seed: 0,
            channels: vec![32, 64, 128],
            code_dim: 18,
            k_neighbors: 8,
            head_hidden: 64,
            sigma_offset: 0.1,
            norm_momentum: 0.9,
            norm_eps: 1e-5,
            norm_scope: NormScope::Batch,
            propagation_neighbors: 3,
            zero_init_head: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != STAGES {
            return Err(Error::invalid(format!(
                "expected {STAGES} stage widths, got {}",
                self.channels.len()
            )));
        }
        if self.channels.contains(&0) || self.code_dim == 0 || self.feature_dim == 0 {
            return Err(Error::invalid("widths and code dimension must be positive"));
        }
        if self.k_neighbors == 0 || self.k_neighbors >= self.num_points {
            return Err(Error::invalid(format!(
                "k_neighbors = {} must lie in [1, num_points)",
                self.k_neighbors
            )));
        }
        if self.encoder_channels.is_empty() {
            return Err(Error::invalid("image encoder needs at least one block"));
        }
        if self.image_resolution >> self.encoder_channels.len() == 0 {
            return Err(Error::invalid("image too small for the number of strided blocks"));
        }
        if !(0.0..1.0).contains(&self.norm_momentum) || self.norm_momentum == 0.0 {
            return Err(Error::invalid("norm momentum must lie in (0, 1)"));
        }
        if self.propagation_neighbors == 0 {
            return Err(Error::invalid("feature propagation needs at least one neighbour"));
        }
        for &c in &self.channels {
            if self.code_dim > self.num_points * c {
                return Err(Error::invalid("code dimension exceeds the basis ambient dimension"));
            }
        }
        Ok(())
    }

    pub fn stage_channels(&self, stage: usize) -> Result<usize> {
        check_stage(stage)?;
        Ok(self.channels[stage - 1])
    }
}

/// Stages are numbered 1..=3.
pub fn check_stage(stage: usize) -> Result<()> {
    if (1..=STAGES).contains(&stage) {
        Ok(())
    } else {
        Err(Error::invalid(format!("stage must be in 1..={STAGES}, got {stage}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("only-MLP".parse::<Variant>().unwrap(), Variant::OnlyMlp);
        assert!("partial".parse::<Variant>().is_err());
    }

    #[test]
    fn only_mlp_replaces_both_sub_pipes() {
        let v = Variant::OnlyMlp;
        assert!(!v.has_geometric() && !v.has_semantic());
        assert!(v.has_geometric_mlp() && v.has_semantic_mlp());
        let f = Variant::Full;
        assert!(f.has_geometric() && f.has_semantic() && !f.has_geometric_mlp() && !f.has_semantic_mlp());
    }

    #[test]
    fn default_config_is_valid_and_stage_checked() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.stage_channels(3).unwrap(), 128);
        assert!(c.stage_channels(0).is_err());
        assert!(c.stage_channels(4).is_err());
        let bad = ModelConfig { k_neighbors: 2048, ..ModelConfig::default() };
        assert!(bad.validate().is_err());
    }
}
