use std::cmp::Ordering;

use crate::{Error, Result};

/// `k` neighbour indices per node, stored row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborGraph {
    indices: Vec<usize>,
    n: usize,
    k: usize,
}

impl NeighborGraph {
    /// Validates that each row holds `k` distinct in-range indices and never
    /// the node itself.
    pub fn new(indices: Vec<usize>, n: usize, k: usize) -> Result<Self> {
        if indices.len() != n * k {
            return Err(Error::invalid(format!(
                "neighbour table has {} entries, expected {n}x{k}",
                indices.len()
            )));
        }
        for (i, row) in indices.chunks(k.max(1)).enumerate().take(n) {
            for (a, &j) in row.iter().enumerate() {
                if j >= n || j == i || row[..a].contains(&j) {
                    return Err(Error::invalid(format!("row {i} of neighbour table is malformed")));
                }
            }
        }
        Ok(Self { indices, n, k })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// The graph after relabelling nodes so that new node `i` is old node
    /// `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n {
            return Err(Error::invalid("permutation length does not match graph size"));
        }
        let mut inverse = vec![usize::MAX; self.n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let indices = perm
            .iter()
            .flat_map(|&old| self.row(old).iter().map(|&j| inverse[j]))
            .collect();
        Self::new(indices, self.n, self.k)
    }
}

fn by_distance_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

fn select_row(candidates: &mut Vec<(f64, usize)>, k: usize, out: &mut Vec<usize>) {
    if candidates.len() > k {
        candidates.select_nth_unstable_by(k - 1, by_distance_then_index);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(by_distance_then_index);
    out.extend(candidates.iter().map(|c| c.1));
}

fn check_k(n: usize, k: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(Error::invalid(format!(
            "neighbour count k = {k} must satisfy 1 <= k < N = {n}"
        )));
    }
    Ok(())
}

/// Builds the `k`-nearest-neighbour graph of the rows of an `N x dim`
/// feature matrix under Euclidean distance. A node never lists itself, even
/// when duplicated rows sit at distance zero; ties go to the lower index.
pub fn knn_graph<T: Copy + Into<f64>>(features: &[T], dim: usize, k: usize) -> Result<NeighborGraph> {
    if dim == 0 || features.len() % dim != 0 {
        return Err(Error::invalid("feature buffer does not divide into rows of the given width"));
    }
    let n = features.len() / dim;
    check_k(n, k)?;
    let row = |i: usize| &features[i * dim..(i + 1) * dim];

    let mut indices = Vec::with_capacity(n * k);
    let mut candidates = Vec::with_capacity(n);
    for i in 0..n {
        candidates.clear();
        let a = row(i);
        for j in (0..n).filter(|&j| j != i) {
            let d: f64 = a
                .iter()
                .zip(row(j))
                .map(|(&x, &y)| {
                    let t = x.into() - y.into();
                    t * t
                })
                .sum();
            candidates.push((d, j));
        }
        select_row(&mut candidates, k, &mut indices);
    }
    Ok(NeighborGraph { indices, n, k })
}

/// Graph from a precomputed row-major `N x N` squared-distance matrix; the
/// diagonal is ignored.
pub(crate) fn knn_from_sq_distances<T: Copy + Into<f64>>(dist: &[T], n: usize, k: usize) -> Result<NeighborGraph> {
    check_k(n, k)?;
    if dist.len() != n * n {
        return Err(Error::invalid("distance matrix is not N x N"));
    }
    let mut indices = Vec::with_capacity(n * k);
    let mut candidates = Vec::with_capacity(n);
    for i in 0..n {
        candidates.clear();
        candidates.extend(
            dist[i * n..(i + 1) * n]
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, &d)| (d.into(), j)),
        );
        select_row(&mut candidates, k, &mut indices);
    }
    Ok(NeighborGraph { indices, n, k })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_points() {
        let g = knn_graph(&[0.0f64, 1.0, 3.0], 1, 1).unwrap();
        assert_eq!(g.indices(), &[1, 0, 1]);
    }

    #[test]
    fn full_neighbourhood_is_a_permutation_of_the_others() {
        let feats: Vec<f64> = (0..5 * 2).map(|i| ((i * 7919) % 13) as f64).collect();
        let g = knn_graph(&feats, 2, 4).unwrap();
        for i in 0..5 {
            let mut row = g.row(i).to_vec();
            row.sort();
            let expected: Vec<usize> = (0..5).filter(|&j| j != i).collect();
            assert_eq!(row, expected);
        }
    }

    #[test]
    fn duplicates_never_select_self() {
        let feats = [1.0f32, 1.0, 1.0, 1.0, 5.0, 5.0];
        let g = knn_graph(&feats, 2, 1).unwrap();
        assert_eq!(g.indices(), &[1, 0, 0]);
    }

    #[test]
    fn k_must_be_below_n() {
        assert!(matches!(knn_graph(&[0.0f64, 1.0], 1, 2), Err(Error::InvalidArgument(_))));
        assert!(knn_graph(&[0.0f64, 1.0], 1, 0).is_err());
    }

    #[test]
    fn distance_matrix_path_agrees() {
        let feats: Vec<f32> = (0..40 * 3).map(|i| ((i as f32) * 0.7311).sin()).collect();
        let n = 40;
        let mut dist = vec![0f32; n * n];
        for i in 0..n {
            for j in 0..n {
                dist[i * n + j] = (0..3).map(|a| (feats[i * 3 + a] - feats[j * 3 + a]).powi(2)).sum();
            }
        }
        assert_eq!(knn_from_sq_distances(&dist, n, 6).unwrap(), knn_graph(&feats, 3, 6).unwrap());
    }

    #[test]
    fn graph_validation_and_permutation() {
        assert!(NeighborGraph::new(vec![0, 1], 2, 1).is_err());
        let g = NeighborGraph::new(vec![1, 2, 0, 2, 0, 1], 3, 2).unwrap();
        let p = g.permuted(&[2, 0, 1]).unwrap();
        // New node 0 is old node 2 whose neighbours were old 0 and 1 (new 1 and 2).
        assert_eq!(p.row(0), &[1, 2]);
    }
}
