//! Parametric shape families with known generative factors, silhouette
//! rendering, occlusion-style partial crops, and on-disk datasets.

mod dataset;
mod render;
mod shapes;

pub use dataset::{build_dataset, DatasetConfig, DatasetManifest, SampleRecord, Split};
pub use render::{make_partial, render_silhouette, View};
pub use shapes::{generate_labeled, generate_shape, leg_extent, LabeledShape, Part};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Table,
    Chair,
    Plane,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Table, Family::Chair, Family::Plane];

    pub fn name(self) -> &'static str {
        match self {
            Family::Table => "table",
            Family::Chair => "chair",
            Family::Plane => "plane",
        }
    }

    /// `(name, min, max)` for every factor of this family.
    pub fn factor_ranges(self) -> &'static [(&'static str, f64, f64)] {
        const SHARED_LEN: f64 = 1.0;
        match self {
            Family::Table => &[
                ("leg_length", 0.3, SHARED_LEN),
                ("leg_bend", -0.4, 0.4),
                ("top_width", 0.4, 1.2),
                ("top_depth", 0.4, 1.0),
            ],
            Family::Chair => &[
                ("leg_length", 0.3, SHARED_LEN),
                ("leg_bend", -0.4, 0.4),
                ("top_width", 0.4, 1.2),
                ("back_height", 0.3, 0.8),
            ],
            // Wings play the role of legs: half-span and sweep.
            Family::Plane => &[
                ("leg_length", 0.3, SHARED_LEN),
                ("leg_bend", -0.4, 0.4),
                ("top_width", 0.4, 1.2),
                ("tail_height", 0.15, 0.4),
            ],
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown shape family {s:?}")))
    }
}

/// Every factor name used by any family, in report column order.
pub const FACTOR_NAMES: [&str; 6] = [
    "leg_length",
    "leg_bend",
    "top_width",
    "top_depth",
    "back_height",
    "tail_height",
];

/// A shape family with one value per generative factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub family: Family,
    pub factors: BTreeMap<String, f64>,
}

impl AttributeSpec {
    /// Checks that exactly the family's factors are present and in range.
    pub fn new(family: Family, factors: BTreeMap<String, f64>) -> Result<Self> {
        let spec = Self { family, factors };
        spec.validate()?;
        Ok(spec)
    }

    /// Every factor at the middle of its range.
    pub fn midpoint(family: Family) -> Self {
        let factors = family
            .factor_ranges()
            .iter()
            .map(|&(name, lo, hi)| (name.to_string(), 0.5 * (lo + hi)))
            .collect();
        Self { family, factors }
    }

    pub fn sample(family: Family, rng: &mut impl Rng) -> Self {
        let factors = family
            .factor_ranges()
            .iter()
            .map(|&(name, lo, hi)| (name.to_string(), rng.random_range(lo..=hi)))
            .collect();
        Self { family, factors }
    }

    /// Returns a copy with one factor replaced, validating the result.
    pub fn with(&self, name: &str, value: f64) -> Result<Self> {
        let mut next = self.clone();
        match next.factors.get_mut(name) {
            Some(v) => *v = value,
            None => {
                return Err(Error::invalid(format!(
                    "family {} has no factor {name:?}",
                    self.family
                )))
            }
        }
        next.validate()?;
        Ok(next)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.factors.get(name).copied()
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = self.family.factor_ranges();
        if self.factors.len() != ranges.len() {
            return Err(Error::invalid(format!(
                "family {} takes {} factors, got {}",
                self.family,
                ranges.len(),
                self.factors.len()
            )));
        }
        for &(name, lo, hi) in ranges {
            let v = self
                .factors
                .get(name)
                .ok_or_else(|| Error::invalid(format!("missing factor {name:?}")))?;
            if !(lo..=hi).contains(v) {
                return Err(Error::invalid(format!(
                    "factor {name} = {v} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    fn factor(&self, name: &str) -> f64 {
        self.factors[name]
    }
}
