//! Point-cloud primitives: the cloud type, the unit-sphere prior, Chamfer
//! distances and nearest-neighbour graphs.
//!
//! Everything here works on `f64` coordinates and is pure; the tensor-side
//! counterparts used during training live next to the model code and call
//! back into the matching routines in this module.

mod chamfer;
mod io;
mod knn;

pub use chamfer::{
    bidirectional_matches, chamfer_l1, chamfer_l1_grad, chamfer_l2, chamfer_l2_grad,
    nearest_neighbors_bruteforce, ChamferGrad, ChamferKind,
};
pub use io::{read_apc, read_xyz, write_apc, write_xyz, APC_MAGIC};
pub use knn::{knn_graph, NeighborGraph};
pub(crate) use knn::knn_from_sq_distances;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::{Error, Result};

pub type Point = [f64; 3];

/// A non-empty set of finite 3-D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self { points })
    }

    /// Builds a cloud from a flat `[x0, y0, z0, x1, ...]` buffer.
    pub fn from_flat<T: Copy + Into<f64>>(flat: &[T]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::invalid(format!(
                "flat coordinate buffer length {} is not a multiple of 3",
                flat.len()
            )));
        }
        Self::new(
            flat.chunks_exact(3)
                .map(|c| [c[0].into(), c[1].into(), c[2].into()])
                .collect(),
        )
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_flat_f32(&self) -> Vec<f32> {
        self.points
            .iter()
            .flat_map(|p| p.iter().map(|&c| c as f32))
            .collect()
    }

    pub fn to_flat_f64(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    /// Axis-aligned bounds as `(min, max)`.
    pub fn bounds(&self) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    pub fn centroid(&self) -> Point {
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        let n = self.points.len() as f64;
        c.map(|v| v / n)
    }

    /// Reorders points so that output row `i` is input row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.len() {
            return Err(Error::invalid("permutation length does not match cloud size"));
        }
        let mut seen = vec![false; perm.len()];
        for &i in perm {
            if i >= perm.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::invalid("not a permutation"));
            }
        }
        Ok(Self {
            points: perm.iter().map(|&i| self.points[i]).collect(),
        })
    }

    /// Picks the given rows; indices may repeat.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let points = indices
            .iter()
            .map(|&i| {
                self.points
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(points)
    }
}

impl AsRef<[Point]> for PointCloud {
    fn as_ref(&self) -> &[Point] {
        &self.points
    }
}

/// Samples `n` points on the unit sphere by normalising isotropic Gaussian
/// draws. Identical `(n, seed)` pairs give bit-identical clouds.
pub fn sample_sphere(n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::invalid("sphere sample count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    while points.len() < n {
        let v: Point = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let norm = norm3(&v);
        if norm < 1e-9 {
            continue;
        }
        points.push(v.map(|c| c / norm));
    }
    PointCloud::new(points)
}

#[inline]
pub(crate) fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub(crate) fn norm3(v: &Point) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_points_have_unit_norm() {
        let cloud = sample_sphere(2048, 7).unwrap();
        assert_eq!(cloud.len(), 2048);
        for p in cloud.points() {
            assert!((norm3(p) - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn sphere_is_centered() {
        // Each coordinate of a uniform unit-sphere point has variance 1/3, so
        // the standard error of the mean at n = 4096 is about 0.009.
        let c = sample_sphere(4096, 0).unwrap().centroid();
        for v in c {
            assert!(v.abs() < 0.05, "centroid component {v}");
        }
    }

    #[test]
    fn single_point_sphere() {
        let cloud = sample_sphere(1, 3).unwrap();
        assert_eq!(cloud.len(), 1);
        assert!((norm3(&cloud.points()[0]) - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn zero_count_is_rejected() {
        assert!(matches!(sample_sphere(0, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn sphere_is_deterministic() {
        let a = sample_sphere(500, 42).unwrap();
        let b = sample_sphere(500, 42).unwrap();
        let bits = |c: &PointCloud| c.to_flat_f64().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a, sample_sphere(500, 43).unwrap());
    }

    #[test]
    fn cloud_rejects_bad_input() {
        assert!(PointCloud::new(vec![]).is_err());
        assert!(PointCloud::new(vec![[0.0, f64::NAN, 0.0]]).is_err());
        assert!(PointCloud::from_flat(&[1.0f32, 2.0]).is_err());
    }

    #[test]
    fn permutation_validation() {
        let c = PointCloud::new(vec![[0.0; 3], [1.0; 3]]).unwrap();
        assert!(c.permuted(&[0, 0]).is_err());
        assert_eq!(c.permuted(&[1, 0]).unwrap().points()[0], [1.0; 3]);
    }
}
