//! Batch normalization over the last axis, pooled across every leading axis.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EPSILON: f64 = 1e-5;
pub const MOMENTUM: f64 = 0.99;

pub(crate) struct BnCache {
    pub x_hat: Tensor,
    pub inv_std: Vec<f64>,
    pub train: bool,
}

fn features(x: &Tensor, gamma: &Tensor) -> Result<usize> {
    let c = *x.shape().last().unwrap_or(&0);
    if x.rank() < 2 || c != gamma.len() {
        return Err(Error::ShapeMismatch {
            left: x.shape().to_vec(),
            right: gamma.shape().to_vec(),
            context: "batchnorm features",
        });
    }
    Ok(c)
}

/// Train-mode normalization with batch statistics; updates the running buffers.
pub(crate) fn forward_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &mut Tensor,
    running_var: &mut Tensor,
) -> Result<(Tensor, BnCache)> {
    let c = features(x, gamma)?;
    if x.batch_size() < 2 {
        return Err(Error::invalid("batch normalization in train mode needs a batch of at least 2"));
    }
    let m = (x.len() / c) as f64;
    let mut mean = vec![0.0; c];
    for row in x.data().chunks_exact(c) {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += v;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m);
    let mut var = vec![0.0; c];
    for row in x.data().chunks_exact(c) {
        for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            *a += (v - mu) * (v - mu);
        }
    }
    var.iter_mut().for_each(|a| *a /= m);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + EPSILON).sqrt()).collect();

    let mut x_hat = x.clone();
    let mut out = x.clone();
    for (hrow, orow) in x_hat
        .data_mut()
        .chunks_exact_mut(c)
        .zip(out.data_mut().chunks_exact_mut(c))
    {
        for j in 0..c {
            hrow[j] = (hrow[j] - mean[j]) * inv_std[j];
            orow[j] = gamma.data()[j] * hrow[j] + beta.data()[j];
        }
    }
    for j in 0..c {
        let rm = &mut running_mean.data_mut()[j];
        *rm = MOMENTUM * *rm + (1.0 - MOMENTUM) * mean[j];
        let rv = &mut running_var.data_mut()[j];
        *rv = MOMENTUM * *rv + (1.0 - MOMENTUM) * var[j];
    }
    Ok((
        out,
        BnCache {
            x_hat,
            inv_std,
            train: true,
        },
    ))
}

pub(crate) fn forward_inference(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    running_mean: &Tensor,
    running_var: &Tensor,
) -> Result<(Tensor, BnCache)> {
    let c = features(x, gamma)?;
    let inv_std: Vec<f64> = running_var
        .data()
        .iter()
        .map(|v| 1.0 / (v + EPSILON).sqrt())
        .collect();
    let mut x_hat = x.clone();
    let mut out = x.clone();
    for (hrow, orow) in x_hat
        .data_mut()
        .chunks_exact_mut(c)
        .zip(out.data_mut().chunks_exact_mut(c))
    {
        for j in 0..c {
            hrow[j] = (hrow[j] - running_mean.data()[j]) * inv_std[j];
            orow[j] = gamma.data()[j] * hrow[j] + beta.data()[j];
        }
    }
    Ok((
        out,
        BnCache {
            x_hat,
            inv_std,
            train: false,
        },
    ))
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn backward(cache: &BnCache, gamma: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    if grad.shape() != cache.x_hat.shape() {
        return Err(Error::ShapeMismatch {
            left: grad.shape().to_vec(),
            right: cache.x_hat.shape().to_vec(),
            context: "batchnorm backward",
        });
    }
    let c = gamma.len();
    let m = (grad.len() / c) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (grow, hrow) in grad.data().chunks_exact(c).zip(cache.x_hat.data().chunks_exact(c)) {
        for j in 0..c {
            dgamma[j] += grow[j] * hrow[j];
            dbeta[j] += grow[j];
        }
    }
    let mut dx = grad.clone();
    for (drow, hrow) in dx.data_mut().chunks_exact_mut(c).zip(cache.x_hat.data().chunks_exact(c)) {
        for j in 0..c {
            let g = gamma.data()[j];
            drow[j] = if cache.train {
                // dxhat = g * gamma, summed terms: sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
                g * cache.inv_std[j] / m * (m * drow[j] - dbeta[j] - hrow[j] * dgamma[j])
            } else {
                g * cache.inv_std[j] * drow[j]
            };
        }
    }
    Ok((dx, Tensor::from_vec(dgamma), Tensor::from_vec(dbeta)))
}
