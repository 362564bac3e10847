//! Differentiable layers.
//!
//! A [`LayerNode`] owns its parameters and the forward cache that its
//! `backward` consumes. Gradients are returned rather than accumulated so the
//! model graph decides how they are combined.

mod activation;
mod batchnorm;
mod conv;
mod pool;

pub use activation::{sigmoid, softplus, Activation};
pub use batchnorm::{EPSILON as BN_EPSILON, MOMENTUM as BN_MOMENTUM};
pub use conv::{conv2d, conv2d_backward};
pub use pool::{pool2, pool2_backward, upsample2, upsample2_backward, PoolMode};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Inference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Dense {
        inputs: usize,
        units: usize,
        activation: Activation,
    },
    Conv2d {
        kernel: usize,
        in_channels: usize,
        filters: usize,
        activation: Activation,
    },
    Pool {
        mode: PoolMode,
    },
    Upsample,
    /// Channel concatenation of every input, in order.
    Concat,
    Activation {
        activation: Activation,
    },
    Dropout {
        rate: f64,
    },
    BatchNorm {
        features: usize,
    },
    Flatten,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense { .. } => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Pool { .. } => "pool",
            LayerKind::Upsample => "upsample",
            LayerKind::Concat => "concat",
            LayerKind::Activation { .. } => "activation",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Flatten => "flatten",
        }
    }

    pub fn arity(&self) -> Option<usize> {
        match self {
            LayerKind::Concat => None,
            _ => Some(1),
        }
    }

    /// Output shape (without the batch axis) for the given input shapes.
    pub fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        if let Some(n) = self.arity() {
            if inputs.len() != n {
                return Err(Error::Spec(format!(
                    "{} takes {n} input(s), got {}",
                    self.name(),
                    inputs.len()
                )));
            }
        }
        let first = inputs
            .first()
            .ok_or_else(|| Error::Spec(format!("{} has no inputs", self.name())))?;
        let image = |ctx: &str| -> Result<(usize, usize, usize)> {
            match first[..] {
                [h, w, c] => Ok((h, w, c)),
                _ => Err(Error::Spec(format!("{ctx} needs an [H, W, C] input, got {first:?}"))),
            }
        };
        match self {
            LayerKind::Dense { inputs: n, units, .. } => {
                if first[..] != [*n] {
                    return Err(Error::Spec(format!("dense expects [{n}], got {first:?}")));
                }
                Ok(vec![*units])
            }
            LayerKind::Conv2d {
                kernel,
                in_channels,
                filters,
                ..
            } => {
                conv::check_kernel(*kernel).map_err(|e| Error::Spec(e.to_string()))?;
                let (h, w, c) = image("conv2d")?;
                if c != *in_channels {
                    return Err(Error::Spec(format!(
                        "conv2d expects {in_channels} input channels, got {c}"
                    )));
                }
                Ok(vec![h, w, *filters])
            }
            LayerKind::Pool { .. } => {
                let (h, w, c) = image("pool")?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::Spec(format!("pooling needs even extents, got {h}x{w}")));
                }
                Ok(vec![h / 2, w / 2, c])
            }
            LayerKind::Upsample => {
                let (h, w, c) = image("upsample")?;
                Ok(vec![2 * h, 2 * w, c])
            }
            LayerKind::Concat => {
                let (h, w, _) = image("concat")?;
                let mut total = 0;
                for s in inputs {
                    match s[..] {
                        [sh, sw, sc] if sh == h && sw == w => total += sc,
                        _ => {
                            return Err(Error::Spec(format!(
                                "concat spatial mismatch: {first:?} vs {s:?}"
                            )))
                        }
                    }
                }
                Ok(vec![h, w, total])
            }
            LayerKind::Activation { .. } | LayerKind::Dropout { .. } => Ok(first.to_vec()),
            LayerKind::BatchNorm { features } => {
                if first.last() != Some(features) {
                    return Err(Error::Spec(format!(
                        "batchnorm over {features} features got {first:?}"
                    )));
                }
                Ok(first.to_vec())
            }
            LayerKind::Flatten => Ok(vec![first.iter().product()]),
        }
    }
}

/// Forward intermediates retained for `backward`.
enum Cache {
    Affine { x: Tensor, z: Tensor, a: Tensor },
    Pool { input_shape: Vec<usize>, argmax: Vec<usize> },
    Upsample,
    Concat { channels: Vec<usize> },
    Activation { z: Tensor, a: Tensor },
    Dropout { mask: Option<Vec<f64>> },
    BatchNorm(batchnorm::BnCache),
    Flatten { input_shape: Vec<usize> },
}

/// Gradients of one node: one tensor per input and per trainable parameter.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub inputs: Vec<Tensor>,
    pub params: Vec<Tensor>,
}

pub struct LayerNode {
    pub kind: LayerKind,
    /// Trainable parameters: `[W, b]` for dense/conv, `[gamma, beta]` for batchnorm.
    pub params: Vec<Tensor>,
    /// Non-trainable state: batchnorm running mean and variance.
    pub buffers: Vec<Tensor>,
    cache: Option<Cache>,
    out_shape: Vec<usize>,
}

impl std::fmt::Debug for LayerNode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LayerNode")
            .field("kind", &self.kind)
            .field("params", &self.params.iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>())
            .finish()
    }
}

impl Clone for LayerNode {
    fn clone(&self) -> Self {
        Self {
            kind: self.kind.clone(),
            params: self.params.clone(),
            buffers: self.buffers.clone(),
            cache: None,
            out_shape: self.out_shape.clone(),
        }
    }
}

impl LayerNode {
    /// Creates a node for the given per-item input shapes, He-uniform
    /// initializing weights from `rng` and zeroing biases.
    pub fn new(kind: LayerKind, input_shapes: &[&[usize]], rng: &mut Rng) -> Result<Self> {
        if let LayerKind::Dropout { rate } = kind {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Spec(format!("dropout rate {rate} outside [0, 1)")));
            }
        }
        let out_shape = kind.output_shape(input_shapes)?;
        let he = |shape: &[usize], fan_in: usize, rng: &mut Rng| {
            let limit = (6.0 / fan_in as f64).sqrt();
            Tensor::uniform(shape, -limit, limit, rng)
        };
        let (params, buffers) = match &kind {
            LayerKind::Dense { inputs, units, .. } => (
                vec![he(&[*inputs, *units], *inputs, rng), Tensor::zeros(&[*units])],
                vec![],
            ),
            LayerKind::Conv2d {
                kernel,
                in_channels,
                filters,
                ..
            } => (
                vec![
                    he(
                        &[*kernel, *kernel, *in_channels, *filters],
                        kernel * kernel * in_channels,
                        rng,
                    ),
                    Tensor::zeros(&[*filters]),
                ],
                vec![],
            ),
            LayerKind::BatchNorm { features } => (
                vec![Tensor::ones(&[*features]), Tensor::zeros(&[*features])],
                vec![Tensor::zeros(&[*features]), Tensor::ones(&[*features])],
            ),
            _ => (vec![], vec![]),
        };
        Ok(Self {
            kind,
            params,
            buffers,
            cache: None,
            out_shape,
        })
    }

    /// Per-item output shape fixed at build time.
    pub fn output_shape(&self) -> &[usize] {
        &self.out_shape
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Runs the layer on a batch. `rng` drives dropout in train mode.
    pub fn forward(&mut self, inputs: &[&Tensor], mode: Mode, rng: &mut Rng) -> Result<Tensor> {
        if let Some(n) = self.kind.arity() {
            if inputs.len() != n {
                return Err(Error::invalid(format!(
                    "{} takes {n} input(s), got {}",
                    self.kind.name(),
                    inputs.len()
                )));
            }
        }
        let x = inputs[0];
        let (out, cache) = match &self.kind {
            LayerKind::Dense { inputs: n, activation, .. } => {
                if x.rank() != 2 || x.shape()[1] != *n {
                    return Err(Error::ShapeMismatch {
                        left: x.shape().to_vec(),
                        right: vec![x.batch_size(), *n],
                        context: "dense input width",
                    });
                }
                let z = x.matmul(&self.params[0])?.add_channel_bias(&self.params[1])?;
                let a = activation.apply(&z);
                (
                    a.clone(),
                    Cache::Affine {
                        x: x.clone(),
                        z,
                        a,
                    },
                )
            }
            LayerKind::Conv2d { activation, .. } => {
                let z = conv2d(x, &self.params[0], &self.params[1])?;
                let a = activation.apply(&z);
                (
                    a.clone(),
                    Cache::Affine {
                        x: x.clone(),
                        z,
                        a,
                    },
                )
            }
            LayerKind::Pool { mode: pm } => {
                let (out, argmax) = pool2(x, *pm)?;
                (
                    out,
                    Cache::Pool {
                        input_shape: x.shape().to_vec(),
                        argmax,
                    },
                )
            }
            LayerKind::Upsample => (upsample2(x)?, Cache::Upsample),
            LayerKind::Concat => {
                let (out, channels) = concat_channels(inputs)?;
                (out, Cache::Concat { channels })
            }
            LayerKind::Activation { activation } => {
                let a = activation.apply(x);
                (
                    a.clone(),
                    Cache::Activation {
                        z: x.clone(),
                        a,
                    },
                )
            }
            LayerKind::Dropout { rate } => {
                if mode == Mode::Inference || *rate == 0.0 {
                    (x.clone(), Cache::Dropout { mask: None })
                } else {
                    let keep = 1.0 / (1.0 - rate);
                    let mask: Vec<f64> = (0..x.len())
                        .map(|_| if rng.bernoulli(*rate) { 0.0 } else { keep })
                        .collect();
                    let mut out = x.clone();
                    for (v, m) in out.data_mut().iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    (out, Cache::Dropout { mask: Some(mask) })
                }
            }
            LayerKind::BatchNorm { .. } => {
                let (gamma, beta) = (&self.params[0], &self.params[1]);
                let (out, cache) = match mode {
                    Mode::Train => {
                        let (rm, rv) = self.buffers.split_at_mut(1);
                        batchnorm::forward_train(x, gamma, beta, &mut rm[0], &mut rv[0])?
                    }
                    Mode::Inference => {
                        batchnorm::forward_inference(x, gamma, beta, &self.buffers[0], &self.buffers[1])?
                    }
                };
                (out, Cache::BatchNorm(cache))
            }
            LayerKind::Flatten => {
                let b = x.batch_size();
                let n = x.item_len();
                (
                    x.clone().reshape(&[b, n])?,
                    Cache::Flatten {
                        input_shape: x.shape().to_vec(),
                    },
                )
            }
        };
        self.cache = Some(cache);
        Ok(out)
    }

    /// Consumes the cache from the last forward and returns exact gradients.
    pub fn backward(&mut self, grad: &Tensor) -> Result<LayerGrads> {
        let cache = self.cache.take().ok_or(Error::MissingCache(self.kind.name()))?;
        let no_params = |inputs| LayerGrads {
            inputs,
            params: vec![],
        };
        match (&self.kind, cache) {
            (LayerKind::Dense { activation, .. }, Cache::Affine { x, z, a }) => {
                check_grad(grad, &a, "dense")?;
                let dz = activation.backward(&z, &a, grad);
                let dw = x.transpose()?.matmul(&dz)?;
                let db = dz.reduce(crate::tensor::Reduce::Sum, &crate::tensor::Axes::These(vec![0]), false)?;
                let dx = dz.matmul(&self.params[0].transpose()?)?;
                Ok(LayerGrads {
                    inputs: vec![dx],
                    params: vec![dw, db],
                })
            }
            (LayerKind::Conv2d { activation, .. }, Cache::Affine { x, z, a }) => {
                check_grad(grad, &a, "conv2d")?;
                let dz = activation.backward(&z, &a, grad);
                let (dx, dw, db) = conv2d_backward(&x, &self.params[0], &dz)?;
                Ok(LayerGrads {
                    inputs: vec![dx],
                    params: vec![dw, db],
                })
            }
            (LayerKind::Pool { mode }, Cache::Pool { input_shape, argmax }) => Ok(no_params(vec![
                pool2_backward(&input_shape, *mode, &argmax, grad)?,
            ])),
            (LayerKind::Upsample, Cache::Upsample) => Ok(no_params(vec![upsample2_backward(grad)?])),
            (LayerKind::Concat, Cache::Concat { channels }) => Ok(no_params(split_channels(grad, &channels)?)),
            (LayerKind::Activation { activation }, Cache::Activation { z, a }) => {
                check_grad(grad, &a, "activation")?;
                Ok(no_params(vec![activation.backward(&z, &a, grad)]))
            }
            (LayerKind::Dropout { .. }, Cache::Dropout { mask }) => {
                let mut dx = grad.clone();
                if let Some(mask) = mask {
                    if mask.len() != dx.len() {
                        return Err(Error::invalid("dropout gradient shape differs from forward"));
                    }
                    for (v, m) in dx.data_mut().iter_mut().zip(&mask) {
                        *v *= m;
                    }
                }
                Ok(no_params(vec![dx]))
            }
            (LayerKind::BatchNorm { .. }, Cache::BatchNorm(c)) => {
                let (dx, dg, db) = batchnorm::backward(&c, &self.params[0], grad)?;
                Ok(LayerGrads {
                    inputs: vec![dx],
                    params: vec![dg, db],
                })
            }
            (LayerKind::Flatten, Cache::Flatten { input_shape }) => {
                Ok(no_params(vec![grad.clone().reshape(&input_shape)?]))
            }
            _ => Err(Error::MissingCache(self.kind.name())),
        }
    }
}

fn check_grad(grad: &Tensor, out: &Tensor, context: &'static str) -> Result<()> {
    if grad.shape() != out.shape() {
        return Err(Error::ShapeMismatch {
            left: grad.shape().to_vec(),
            right: out.shape().to_vec(),
            context,
        });
    }
    Ok(())
}

/// Concatenates `[B, H, W, C_i]` tensors along channels; returns the channel split.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<(Tensor, Vec<usize>)> {
    let first = inputs.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
    let lead = &first.shape()[..first.rank().saturating_sub(1)];
    let mut channels = Vec::with_capacity(inputs.len());
    for t in inputs {
        if t.rank() != first.rank() || &t.shape()[..t.rank() - 1] != lead {
            return Err(Error::ShapeMismatch {
                left: first.shape().to_vec(),
                right: t.shape().to_vec(),
                context: "concat spatial extents",
            });
        }
        channels.push(*t.shape().last().unwrap());
    }
    let total: usize = channels.iter().sum();
    let pixels = first.len() / channels[0].max(1);
    let mut out = Vec::with_capacity(pixels * total);
    for p in 0..pixels {
        for (t, &c) in inputs.iter().zip(&channels) {
            out.extend_from_slice(&t.data()[p * c..(p + 1) * c]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok((Tensor::new(shape, out)?, channels))
}

/// Splits a channel-last tensor at the given channel counts.
pub fn split_channels(t: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let total: usize = channels.iter().sum();
    if t.shape().last() != Some(&total) {
        return Err(Error::invalid(format!(
            "cannot split {:?} into channels {channels:?}",
            t.shape()
        )));
    }
    let pixels = t.len() / total;
    let mut parts: Vec<Vec<f64>> = channels.iter().map(|c| Vec::with_capacity(pixels * c)).collect();
    for p in 0..pixels {
        let row = &t.data()[p * total..(p + 1) * total];
        let mut off = 0;
        for (part, &c) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&row[off..off + c]);
            off += c;
        }
    }
    let lead = &t.shape()[..t.rank() - 1];
    parts
        .into_iter()
        .zip(channels)
        .map(|(d, &c)| {
            let mut shape = lead.to_vec();
            shape.push(c);
            Tensor::new(shape, d)
        })
        .collect()
}
