//! Loss functions with analytic gradients w.r.t. the prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Loss {
    Bce,
    /// Categorical cross-entropy over the last axis, averaged over rows.
    Cce,
    Mse,
    Mae,
    /// Binary cross-entropy with the positive-class term scaled by `pos_weight`.
    WeightedBce { pos_weight: f64 },
}

impl Loss {
    pub fn name(&self) -> &'static str {
        match self {
            Loss::Bce => "bce",
            Loss::Cce => "cce",
            Loss::Mse => "mse",
            Loss::Mae => "mae",
            Loss::WeightedBce { .. } => "weighted_bce",
        }
    }

    /// Mean loss and its gradient w.r.t. `y_hat`.
    pub fn loss_and_grad(&self, y_hat: &Tensor, y: &Tensor) -> Result<(f64, Tensor)> {
        if y_hat.shape() != y.shape() {
            return Err(Error::ShapeMismatch {
                left: y_hat.shape().to_vec(),
                right: y.shape().to_vec(),
                context: "loss prediction vs target",
            });
        }
        if y_hat.is_empty() {
            return Err(Error::invalid("loss over an empty batch"));
        }
        let n = y_hat.len() as f64;
        let mut grad = Tensor::zeros(y_hat.shape());
        let mut total = 0.0;
        let clamp = |p: f64| p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        match *self {
            Loss::Bce | Loss::WeightedBce { .. } => {
                let w = match *self {
                    Loss::WeightedBce { pos_weight } => pos_weight,
                    _ => 1.0,
                };
                for ((g, &p), &t) in grad.data_mut().iter_mut().zip(y_hat.data()).zip(y.data()) {
                    let p = clamp(p);
                    total -= w * t * p.ln() + (1.0 - t) * (1.0 - p).ln();
                    *g = (-w * t / p + (1.0 - t) / (1.0 - p)) / n;
                }
                Ok((total / n, grad))
            }
            Loss::Cce => {
                let c = *y_hat.shape().last().unwrap();
                let rows = (y_hat.len() / c) as f64;
                for ((g, &p), &t) in grad.data_mut().iter_mut().zip(y_hat.data()).zip(y.data()) {
                    let p = clamp(p);
                    total -= t * p.ln();
                    *g = -t / p / rows;
                }
                Ok((total / rows, grad))
            }
            Loss::Mse => {
                for ((g, &p), &t) in grad.data_mut().iter_mut().zip(y_hat.data()).zip(y.data()) {
                    let d = p - t;
                    total += d * d;
                    *g = 2.0 * d / n;
                }
                Ok((total / n, grad))
            }
            Loss::Mae => {
                for ((g, &p), &t) in grad.data_mut().iter_mut().zip(y_hat.data()).zip(y.data()) {
                    let d = p - t;
                    total += d.abs();
                    *g = if d > 0.0 {
                        1.0 / n
                    } else if d < 0.0 {
                        -1.0 / n
                    } else {
                        0.0
                    };
                }
                Ok((total / n, grad))
            }
        }
    }
}
