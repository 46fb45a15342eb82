//! Masked-patch cross-entropy objectives.
//!
//! Both losses average `-Σ_k target[i,k] · log softmax(logits_i)_k` over the
//! masked rows only; the hard-label loss is the soft one with one-hot
//! targets.

use ndarray::Array2;

use crate::masking::MaskSpec;
use crate::real::{log_sum_exp, Real};
use crate::targets::one_hot;
use crate::{Error, Result};

/// Loss value and its gradient w.r.t. the logits (zero on unmasked rows).
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub loss: T,
    pub grad: Array2<T>,
}

/// Soft-label cross-entropy over `rows` of `logits`, averaged over `rows`.
pub fn soft_cross_entropy<T: Real>(
    logits: &Array2<T>,
    targets: &Array2<T>,
    rows: &[usize],
) -> Result<LossOutput<T>> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("masked set is empty".into()));
    }
    if logits.dim() != targets.dim() {
        return Err(Error::Shape(format!(
            "logits {:?} vs targets {:?}",
            logits.dim(),
            targets.dim()
        )));
    }
    let inv_m = T::one() / T::lit(rows.len() as f64);
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = T::zero();
    for &i in rows {
        if i >= logits.nrows() {
            return Err(Error::InvalidArgument(format!(
                "masked row {i} out of range for {} rows",
                logits.nrows()
            )));
        }
        let l = logits.row(i);
        let t = targets.row(i);
        let lse = log_sum_exp(l);
        let mut row_loss = T::zero();
        for (&lk, &tk) in l.iter().zip(t.iter()) {
            row_loss += tk * (lse - lk);
        }
        total += row_loss;
        let tsum: T = t.iter().copied().sum();
        for ((g, &lk), &tk) in grad.row_mut(i).iter_mut().zip(l.iter()).zip(t.iter()) {
            // d/dl_k of Σ_j t_j (lse − l_j) = softmax_k · Σ t − t_k
            *g = ((lk - lse).exp() * tsum - tk) * inv_m;
        }
    }
    if !total.is_finite() {
        return Err(Error::NonFinite {
            stage: "masked-patch loss".into(),
            layer: None,
        });
    }
    Ok(LossOutput {
        loss: total * inv_m,
        grad,
    })
}

/// Multi-choice MIM loss on one image.
pub fn mc_mim_loss<T: Real>(
    logits: &Array2<T>,
    z_hat: &Array2<T>,
    m: &MaskSpec,
) -> Result<LossOutput<T>> {
    soft_cross_entropy(logits, z_hat, &m.masked)
}

/// Single-choice (hard-label) MIM loss on one image.
pub fn hard_mim_loss<T: Real>(
    logits: &Array2<T>,
    ids: &[usize],
    m: &MaskSpec,
) -> Result<LossOutput<T>> {
    hard_cross_entropy(logits, ids, &m.masked)
}

pub fn hard_cross_entropy<T: Real>(
    logits: &Array2<T>,
    ids: &[usize],
    rows: &[usize],
) -> Result<LossOutput<T>> {
    if ids.len() != logits.nrows() {
        return Err(Error::Shape(format!(
            "{} token ids for {} logit rows",
            ids.len(),
            logits.nrows()
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&k| k >= logits.ncols()) {
        return Err(Error::InvalidArgument(format!(
            "token id {bad} outside vocabulary of {}",
            logits.ncols()
        )));
    }
    soft_cross_entropy(logits, &one_hot(ids, logits.ncols()), rows)
}
