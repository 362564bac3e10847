use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Relu,
    Linear,
    /// Row-wise over the last axis.
    Softmax,
    /// `ln(1 + e^z)`; keeps regression maps non-negative.
    Softplus,
}

/// Logistic function; the input is clamped to `[-36, 36]` so the result stays strictly inside (0, 1).
pub fn sigmoid(z: f64) -> f64 {
    let z = z.clamp(-36.0, 36.0);
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl Activation {
    pub fn apply(self, z: &Tensor) -> Tensor {
        match self {
            Activation::Sigmoid => z.map(sigmoid),
            Activation::Relu => z.map(|v| v.max(0.0)),
            Activation::Linear => z.clone(),
            Activation::Softplus => z.map(softplus),
            Activation::Softmax => {
                let mut out = z.clone();
                let c = *z.shape().last().unwrap_or(&1);
                for row in out.data_mut().chunks_exact_mut(c) {
                    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        total += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= total;
                    }
                }
                out
            }
        }
    }

    /// Gradient w.r.t. the pre-activation `z`, given the output `a` and upstream `grad`.
    pub fn backward(self, z: &Tensor, a: &Tensor, grad: &Tensor) -> Tensor {
        let mut out = grad.clone();
        let g = out.data_mut();
        match self {
            Activation::Linear => {}
            Activation::Sigmoid => {
                for (gi, &ai) in g.iter_mut().zip(a.data()) {
                    *gi *= ai * (1.0 - ai);
                }
            }
            Activation::Relu => {
                for (gi, &zi) in g.iter_mut().zip(z.data()) {
                    if zi <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            Activation::Softplus => {
                for (gi, &zi) in g.iter_mut().zip(z.data()) {
                    *gi *= sigmoid(zi);
                }
            }
            Activation::Softmax => {
                let c = *a.shape().last().unwrap_or(&1);
                for (grow, arow) in g.chunks_exact_mut(c).zip(a.data().chunks_exact(c)) {
                    let dot: f64 = grow.iter().zip(arow).map(|(x, y)| x * y).sum();
                    for (gi, &ai) in grow.iter_mut().zip(arow) {
                        *gi = ai * (*gi - dot);
                    }
                }
            }
        }
        out
    }

    /// Whether the forward map is linear (all gradients independent of the input).
    pub fn is_linear(self) -> bool {
        self == Activation::Linear
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn ranges() {
        let mut rng = Rng::new(3);
        let z = Tensor::uniform(&[50, 7], -40.0, 40.0, &mut rng);
        let s = Activation::Sigmoid.apply(&z);
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let sm = Activation::Softmax.apply(&z);
        for row in sm.data().chunks_exact(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        assert_eq!(Activation::Linear.apply(&z), z);
        assert!(Activation::Softplus.apply(&z).data().iter().all(|&v| v >= 0.0));
        assert_eq!(sigmoid(0.0), 0.5);
    }
}
