use rayon::prelude::*;

use super::{sq_dist, Point};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChamferKind {
    /// Mean of nearest-neighbour Euclidean norms.
    L1,
    /// Mean of squared nearest-neighbour norms.
    L2,
}

/// Value of a Chamfer distance together with its gradient with respect to
/// every point of both clouds.
#[derive(Clone, Debug)]
pub struct ChamferGrad {
    pub value: f64,
    pub grad_p: Vec<Point>,
    pub grad_q: Vec<Point>,
}

const PAR_THRESHOLD: usize = 256;

fn check_non_empty(p: &[Point], q: &[Point]) -> Result<()> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::invalid("chamfer distance needs two non-empty clouds"));
    }
    Ok(())
}

/// For every `p[i]` the index of its nearest `q`, and for every `q[j]` the
/// index of its nearest `p`. Ties go to the lowest index.
///
/// Both directions come out of one sweep over the pair matrix, processed in
/// row blocks so the column minima can be merged afterwards.
pub fn bidirectional_matches(p: &[Point], q: &[Point]) -> Result<(Vec<usize>, Vec<usize>)> {
    check_non_empty(p, q)?;
    const BLOCK: usize = 64;

    let sweep = |start: usize, rows: &[Point]| {
        let mut row_best = vec![(f64::INFINITY, 0usize); rows.len()];
        let mut col_best = vec![(f64::INFINITY, 0usize); q.len()];
        for (r, a) in rows.iter().enumerate() {
            let i = start + r;
            let best = &mut row_best[r];
            for (j, b) in q.iter().enumerate() {
                let d = sq_dist(a, b);
                if d < best.0 {
                    *best = (d, j);
                }
                if d < col_best[j].0 {
                    col_best[j] = (d, i);
                }
            }
        }
        (row_best, col_best)
    };

    let blocks: Vec<_> = if p.len() * q.len() >= PAR_THRESHOLD * PAR_THRESHOLD {
        p.par_chunks(BLOCK)
            .enumerate()
            .map(|(b, rows)| sweep(b * BLOCK, rows))
            .collect()
    } else {
        p.chunks(BLOCK)
            .enumerate()
            .map(|(b, rows)| sweep(b * BLOCK, rows))
            .collect()
    };

    let mut p_to_q = Vec::with_capacity(p.len());
    let mut q_best = vec![(f64::INFINITY, 0usize); q.len()];
    // Blocks arrive in row order, so a strict comparison keeps the lowest index.
    for (rows, cols) in blocks {
        p_to_q.extend(rows.into_iter().map(|(_, j)| j));
        for (best, cand) in q_best.iter_mut().zip(cols) {
            if cand.0 < best.0 {
                *best = cand;
            }
        }
    }
    Ok((p_to_q, q_best.into_iter().map(|(_, i)| i).collect()))
}

/// Exact nearest neighbour in `q` for every point of `p`, by exhaustive
/// search. Ties go to the lowest index.
pub fn nearest_neighbors_bruteforce(p: &[Point], q: &[Point]) -> Result<Vec<usize>> {
    if q.is_empty() {
        return Err(Error::invalid("nearest-neighbour target cloud is empty"));
    }
    if p.is_empty() {
        return Err(Error::invalid("nearest-neighbour query cloud is empty"));
    }
    Ok(p.iter()
        .map(|a| {
            let mut best = 0;
            let mut best_d = sq_dist(a, &q[0]);
            for (j, b) in q.iter().enumerate().skip(1) {
                let d = sq_dist(a, b);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        })
        .collect())
}

fn term(kind: ChamferKind, d2: f64) -> f64 {
    match kind {
        ChamferKind::L1 => d2.sqrt(),
        ChamferKind::L2 => d2,
    }
}

fn chamfer_value(kind: ChamferKind, p: &[Point], q: &[Point]) -> Result<f64> {
    let (p_to_q, q_to_p) = bidirectional_matches(p, q)?;
    let forward: f64 = p
        .iter()
        .zip(&p_to_q)
        .map(|(a, &j)| term(kind, sq_dist(a, &q[j])))
        .sum();
    let backward: f64 = q
        .iter()
        .zip(&q_to_p)
        .map(|(b, &i)| term(kind, sq_dist(b, &p[i])))
        .sum();
    Ok(forward / (2.0 * p.len() as f64) + backward / (2.0 * q.len() as f64))
}

/// Symmetric Chamfer distance with Euclidean norms. Each direction is
/// averaged over its own source cloud and weighted by one half.
pub fn chamfer_l1(p: impl AsRef<[Point]>, q: impl AsRef<[Point]>) -> Result<f64> {
    chamfer_value(ChamferKind::L1, p.as_ref(), q.as_ref())
}

/// As [`chamfer_l1`] with squared norms.
pub fn chamfer_l2(p: impl AsRef<[Point]>, q: impl AsRef<[Point]>) -> Result<f64> {
    chamfer_value(ChamferKind::L2, p.as_ref(), q.as_ref())
}

fn chamfer_with_grad(kind: ChamferKind, p: &[Point], q: &[Point]) -> Result<ChamferGrad> {
    let (p_to_q, q_to_p) = bidirectional_matches(p, q)?;
    let mut grad_p = vec![[0.0; 3]; p.len()];
    let mut grad_q = vec![[0.0; 3]; q.len()];
    let mut value = 0.0;

    let accumulate = |src: &[Point],
                          dst: &[Point],
                          matches: &[usize],
                          g_src: &mut [Point],
                          g_dst: &mut [Point]| {
        let w = 0.5 / src.len() as f64;
        let mut sum = 0.0;
        for (i, (a, &j)) in src.iter().zip(matches).enumerate() {
            let b = &dst[j];
            let diff = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
            let d2 = diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2];
            // Coincident pairs take the zero subgradient.
            let scale = match kind {
                ChamferKind::L1 => {
                    let d = d2.sqrt();
                    sum += d;
                    if d > 0.0 {
                        w / d
                    } else {
                        0.0
                    }
                }
                ChamferKind::L2 => {
                    sum += d2;
                    2.0 * w
                }
            };
            for a in 0..3 {
                g_src[i][a] += scale * diff[a];
                g_dst[j][a] -= scale * diff[a];
            }
        }
        sum * w
    };

    value += accumulate(p, q, &p_to_q, &mut grad_p, &mut grad_q);
    value += accumulate(q, p, &q_to_p, &mut grad_q, &mut grad_p);
    Ok(ChamferGrad {
        value,
        grad_p,
        grad_q,
    })
}

/// [`chamfer_l1`] plus its gradient. Nearest-neighbour assignments are held
/// fixed, so at ties this is the subgradient of the selected match.
pub fn chamfer_l1_grad(p: impl AsRef<[Point]>, q: impl AsRef<[Point]>) -> Result<ChamferGrad> {
    chamfer_with_grad(ChamferKind::L1, p.as_ref(), q.as_ref())
}

pub fn chamfer_l2_grad(p: impl AsRef<[Point]>, q: impl AsRef<[Point]>) -> Result<ChamferGrad> {
    chamfer_with_grad(ChamferKind::L2, p.as_ref(), q.as_ref())
}

impl ChamferKind {
    pub fn distance(self, p: impl AsRef<[Point]>, q: impl AsRef<[Point]>) -> Result<f64> {
        chamfer_value(self, p.as_ref(), q.as_ref())
    }
}
