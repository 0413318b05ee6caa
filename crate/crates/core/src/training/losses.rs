//! Reconstruction and regularisation losses, in exact `f64` form for
//! evaluation and as differentiable tensors for training.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::attribute_flow::SubspaceBank;
use crate::geometry::{bidirectional_matches, chamfer_l1, ChamferKind, Point, PointCloud};
use crate::nn::to_f64_vec;
use crate::{Error, Result};

/// How the orthogonality penalty reads a bank's Gram matrix `G = U^T U`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrthForm {
    /// `||G - I||_F`, zero exactly for orthonormal columns.
    #[default]
    Frobenius,
    /// `||G||_F - 1`, which stays at `sqrt(d) - 1` for orthonormal columns.
    Literal,
}

fn gram_f64(bank: &SubspaceBank) -> Result<(Vec<f64>, usize)> {
    let u = bank.basis().to_dtype(DType::F64)?;
    Ok((to_f64_vec(&u.t()?.matmul(&u)?)?, bank.code_dim()))
}

/// Sum of the per-bank penalties, in double precision.
pub fn orthogonality_loss(banks: &[&SubspaceBank], form: OrthForm) -> Result<f64> {
    let mut total = 0.0;
    for bank in banks {
        let (g, d) = gram_f64(bank)?;
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                let target = match form {
                    OrthForm::Frobenius if i == j => 1.0,
                    _ => 0.0,
                };
                let e = g[i * d + j] - target;
                acc += e * e;
            }
        }
        total += match form {
            OrthForm::Frobenius => acc.sqrt(),
            OrthForm::Literal => acc.sqrt() - 1.0,
        };
    }
    Ok(total)
}

/// `chamfer_l1(output, target) + alpha * orthogonality_loss(banks)`.
pub fn total_loss(
    output: &PointCloud,
    target: &PointCloud,
    banks: &[&SubspaceBank],
    alpha: f64,
    form: OrthForm,
) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid(format!("alpha must be non-negative, got {alpha}")));
    }
    let cd = chamfer_l1(output, target)?;
    if alpha == 0.0 {
        return Ok(cd);
    }
    Ok(cd + alpha * orthogonality_loss(banks, form)?)
}

/// Differentiable orthogonality penalty. A tiny constant under the square
/// root keeps the gradient finite at exact orthonormality.
pub fn orthogonality_loss_tensor(banks: &[&SubspaceBank], form: OrthForm) -> Result<Option<Tensor>> {
    let mut total: Option<Tensor> = None;
    for bank in banks {
        let g = bank.gram()?;
        let d = bank.code_dim();
        let term = match form {
            OrthForm::Frobenius => {
                let eye = Tensor::eye(d, g.dtype(), g.device())?;
                ((g - eye)?.sqr()?.sum_all()? + 1e-12)?.sqrt()?
            }
            OrthForm::Literal => ((g.sqr()?.sum_all()? + 1e-12)?.sqrt()? - 1.0)?,
        };
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total)
}

/// Batched Chamfer distance between `(B, N, 3)` predictions and `B` target
/// clouds of a common size, averaged over the batch. Correspondences are
/// found on detached values (lowest index wins ties); gradients flow
/// through the matched differences only.
pub fn chamfer_tensor(pred: &Tensor, targets: &[&PointCloud], kind: ChamferKind) -> Result<Tensor> {
    let (b, n, three) = pred.dims3()?;
    if three != 3 || targets.len() != b {
        return Err(Error::invalid("prediction batch and target list disagree"));
    }
    let m = targets[0].len();
    if targets.iter().any(|t| t.len() != m) {
        return Err(Error::invalid("batched targets must share one size"));
    }
    let flat = to_f64_vec(pred)?;
    let mut forward = Vec::with_capacity(b * n);
    let mut backward = Vec::with_capacity(b * m);
    let mut target_flat = Vec::with_capacity(b * m * 3);
    for (bi, t) in targets.iter().enumerate() {
        let p: Vec<Point> = flat[bi * n * 3..(bi + 1) * n * 3]
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        let (pq, qp) = bidirectional_matches(&p, t.points())?;
        forward.extend(pq.iter().map(|&j| (bi * m + j) as u32));
        backward.extend(qp.iter().map(|&i| (bi * n + i) as u32));
        target_flat.extend(t.to_flat_f64());
    }
    let dtype = pred.dtype();
    let dev = pred.device();
    let target = Tensor::from_vec(target_flat, (b * m, 3), dev)?.to_dtype(dtype)?;
    let pred_flat = pred.reshape((b * n, 3))?;
    let forward = Tensor::from_vec(forward, b * n, dev)?;
    let backward = Tensor::from_vec(backward, b * m, dev)?;

    let tiny = if dtype == DType::F64 { 1e-200 } else { 1e-30 };
    let dist = |a: &Tensor, c: &Tensor| -> Result<Tensor> {
        let sq = (a - c)?.sqr()?.sum(1)?;
        Ok(match kind {
            ChamferKind::L2 => sq,
            ChamferKind::L1 => sq.maximum(tiny)?.sqrt()?,
        })
    };
    let d_pq = dist(&pred_flat, &target.index_select(&forward, 0)?)?;
    let d_qp = dist(&target, &pred_flat.index_select(&backward, 0)?)?;
    let side_pq = (d_pq.sum_all()? / (2.0 * (b * n) as f64))?;
    let side_qp = (d_qp.sum_all()? / (2.0 * (b * m) as f64))?;
    Ok((side_pq + side_qp)?)
}
