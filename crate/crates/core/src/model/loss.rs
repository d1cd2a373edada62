//! Multi-label sigmoid cross-entropy.

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check(logits: &Tensor, labels: &Tensor) -> Result<()> {
    logits.dims2()?;
    if logits.shape() != labels.shape() {
        return Err(dim_err!("logits {:?} vs labels {:?}", logits.shape(), labels.shape()));
    }
    if let Some(bad) = labels.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::Domain(format!("label {bad} is not 0 or 1")));
    }
    Ok(())
}

/// Mean over the batch of `Σ_c softplus(l) − y·l`. Each term is evaluated as
/// `softplus(−l)` (label 1) or `softplus(l)` (label 0), which never cancels.
pub fn sigmoid_xent(logits: &Tensor, labels: &Tensor) -> Result<f64> {
    check(logits, labels)?;
    let b = logits.rows() as f64;
    let total: f64 = logits
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&l, &y)| if y == 1.0 { softplus(-l) } else { softplus(l) })
        .sum();
    Ok(total / b)
}

/// `(σ(l) − y) / B`.
pub fn sigmoid_xent_backward(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    check(logits, labels)?;
    let b = logits.rows() as f64;
    let data = logits
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&l, &y)| (1.0 / (1.0 + (-l).exp()) - y) / b)
        .collect();
    Tensor::new(logits.shape(), data)
}
