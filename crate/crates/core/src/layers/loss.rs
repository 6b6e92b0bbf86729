//! Per-sample losses. Each maps a `[B, ...]` prediction to a `[B]` tensor;
//! the seed adjoint `w` (one weight per sample, all ones for the plain batch
//! loss) scales every backward and second-order quantity.

use alloc::vec;
use alloc::vec::Vec;

use libm::{exp, log};

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

pub(crate) fn mse_forward(x: &Tensor, target: &Tensor) -> Result<Tensor> {
    if !x.same_shape(target) {
        return Err(Error::shape("mse target", x.shape(), target.shape()));
    }
    let out = (0..x.sample_count())
        .map(|b| {
            let mut acc = 0.0;
            for (p, t) in x.row(b).iter().zip(target.row(b)) {
                acc += (p - t) * (p - t);
            }
            0.5 * acc
        })
        .collect();
    Ok(Tensor::from_vec(out))
}

pub(crate) fn mse_residual(x: &Tensor, target: &Tensor) -> Tensor {
    x.zip_map(target, |p, t| p - t).expect("validated in forward")
}

/// Class ids stored as `f64`, validated against `classes`.
pub(crate) fn class_ids(target: &Tensor, batch: usize, classes: usize) -> Result<Vec<usize>> {
    if target.shape() != [batch] {
        return Err(Error::shape("class targets", &[batch], target.shape()));
    }
    target
        .data()
        .iter()
        .map(|&v| {
            let id = v as usize;
            if v < 0.0 || libm::trunc(v) != v || id >= classes {
                Err(Error::contract(alloc::format!("class id {v} outside 0..{classes}")))
            } else {
                Ok(id)
            }
        })
        .collect()
}

/// Returns (per-sample loss, softmax probabilities).
pub(crate) fn cross_entropy_forward(x: &Tensor, target: &Tensor) -> Result<(Tensor, Tensor)> {
    let batch = x.sample_count();
    let classes = x.sample_len();
    let ids = class_ids(target, batch, classes)?;
    let mut probs = Vec::with_capacity(x.len());
    let mut losses = Vec::with_capacity(batch);
    for (b, &y) in ids.iter().enumerate() {
        let row = x.row(b);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row {
            z += exp(v - max);
        }
        for v in row {
            probs.push(exp(v - max) / z);
        }
        losses.push(max + log(z) - row[y]);
    }
    Ok((Tensor::from_vec(losses), Tensor::new(x.shape().to_vec(), probs)?))
}

/// `p - onehot(y)`
pub(crate) fn cross_entropy_residual(probs: &Tensor, target: &Tensor) -> Tensor {
    let classes = probs.sample_len();
    let mut r = probs.clone();
    for (b, &y) in target.data().iter().enumerate() {
        r.data_mut()[b * classes + y as usize] -= 1.0;
    }
    r
}

/// Per-sample `<H xd, xd>` of the softmax cross-entropy:
/// `sum p xd^2 - (sum p xd)^2`.
pub fn cross_entropy_hessian_form(probs: &Tensor, xdot: &Tensor) -> Vec<f64> {
    (0..probs.sample_count())
        .map(|b| {
            let (p, d) = (probs.row(b), xdot.row(b));
            let mut s2 = 0.0;
            for (pi, di) in p.iter().zip(d) {
                s2 += pi * di * di;
            }
            let s1 = dot(p, d);
            s2 - s1 * s1
        })
        .collect()
}

/// `(diag(p) - p p^T) xd` row by row.
pub(crate) fn cross_entropy_hessian_apply(probs: &Tensor, xdot: &Tensor) -> Tensor {
    let mut out = vec![0.0; probs.len()];
    let w = probs.sample_len();
    for b in 0..probs.sample_count() {
        let (p, d) = (probs.row(b), xdot.row(b));
        let s1 = dot(p, d);
        for i in 0..w {
            out[b * w + i] = p[i] * d[i] - p[i] * s1;
        }
    }
    Tensor::new(probs.shape().to_vec(), out).expect("same shape as probs")
}

/// Multiply every row `b` of `t` by `w[b]`.
pub(crate) fn scale_rows(t: &Tensor, w: &[f64]) -> Tensor {
    let mut out = t.clone();
    for (b, &wb) in w.iter().enumerate() {
        out.row_mut(b).iter_mut().for_each(|v| *v *= wb);
    }
    out
}
