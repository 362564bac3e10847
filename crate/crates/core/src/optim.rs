//! Gradient-descent optimizers: plain SGD, Adam and RMSprop.
//!
//! All three step *against* the gradient: `theta <- theta - lr * update`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const RMSPROP_RHO: f64 = 0.9;
pub const OPT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Rmsprop,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Completed steps (drives Adam's bias correction).
    pub t: u64,
    /// First moments (Adam) per parameter; empty until the first step.
    pub m: Vec<Tensor>,
    /// Second moments (Adam, RMSprop) per parameter; empty until the first step.
    pub v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            kind,
            lr,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    /// Applies one update to every parameter.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                    context: "parameter vs gradient",
                });
            }
            g.check_finite(&format!("gradient of parameter {i}"))?;
        }
        if self.kind != OptimizerKind::Sgd && self.v.is_empty() {
            self.v = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            if self.kind == OptimizerKind::Adam {
                self.m = self.v.clone();
            }
        }
        self.t += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    for (((pv, &gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * gv;
                        *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * gv * gv;
                        let m_hat = *mv / c1;
                        let v_hat = *vv / c2;
                        *pv -= lr * m_hat / (v_hat.sqrt() + OPT_EPSILON);
                    }
                }
            }
            OptimizerKind::Rmsprop => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.v) {
                    for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *vv = RMSPROP_RHO * *vv + (1.0 - RMSPROP_RHO) * gv * gv;
                        *pv -= lr * gv / (vv.sqrt() + OPT_EPSILON);
                    }
                }
            }
        }
        Ok(())
    }
}
