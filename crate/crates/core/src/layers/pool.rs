//! 2x2 pooling and its nearest-neighbour inverse.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Average,
}

fn image_dims(x: &Tensor, context: &str) -> Result<(usize, usize, usize, usize)> {
    match x.shape()[..] {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: format!("{context} expects [B, H, W, C]"),
        }),
    }
}

/// Non-overlapping 2x2 pooling. For max mode also returns the flat input
/// index that won each window.
pub fn pool2(x: &Tensor, mode: PoolMode) -> Result<(Tensor, Vec<usize>)> {
    let (b, h, w, c) = image_dims(x, "pool")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "pooling needs even spatial extents".into(),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = vec![0.0; b * oh * ow * c];
    let mut argmax = if mode == PoolMode::Max {
        vec![0usize; out.len()]
    } else {
        Vec::new()
    };
    for bi in 0..b {
        for y in 0..oh {
            for xx in 0..ow {
                for ch in 0..c {
                    let o = ((bi * oh + y) * ow + xx) * c + ch;
                    let idx = |dy: usize, dx: usize| ((bi * h + 2 * y + dy) * w + 2 * xx + dx) * c + ch;
                    let cand = [idx(0, 0), idx(0, 1), idx(1, 0), idx(1, 1)];
                    match mode {
                        PoolMode::Max => {
                            let mut best = cand[0];
                            for &i in &cand[1..] {
                                if xd[i] > xd[best] {
                                    best = i;
                                }
                            }
                            out[o] = xd[best];
                            argmax[o] = best;
                        }
                        PoolMode::Average => {
                            out[o] = (xd[cand[0]] + xd[cand[1]] + xd[cand[2]] + xd[cand[3]]) / 4.0;
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::new(vec![b, oh, ow, c], out)?, argmax))
}

pub fn pool2_backward(
    input_shape: &[usize],
    mode: PoolMode,
    argmax: &[usize],
    grad: &Tensor,
) -> Result<Tensor> {
    let mut dx = Tensor::zeros(input_shape);
    let (b, h, w, c) = image_dims(&dx, "pool backward")?;
    if grad.shape() != [b, h / 2, w / 2, c] {
        return Err(Error::ShapeMismatch {
            left: grad.shape().to_vec(),
            right: vec![b, h / 2, w / 2, c],
            context: "pool backward",
        });
    }
    let gd = grad.data();
    let d = dx.data_mut();
    match mode {
        PoolMode::Max => {
            for (&i, &g) in argmax.iter().zip(gd) {
                d[i] += g;
            }
        }
        PoolMode::Average => {
            let (oh, ow) = (h / 2, w / 2);
            for bi in 0..b {
                for y in 0..h {
                    for xx in 0..w {
                        for ch in 0..c {
                            let o = ((bi * oh + y / 2) * ow + xx / 2) * c + ch;
                            d[((bi * h + y) * w + xx) * c + ch] = gd[o] / 4.0;
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Replicates each pixel into a 2x2 block.
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = image_dims(x, "upsample")?;
    let (oh, ow) = (2 * h, 2 * w);
    let xd = x.data();
    let mut out = vec![0.0; b * oh * ow * c];
    for bi in 0..b {
        for y in 0..oh {
            for xx in 0..ow {
                let src = ((bi * h + y / 2) * w + xx / 2) * c;
                let dst = ((bi * oh + y) * ow + xx) * c;
                out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
            }
        }
    }
    Tensor::new(vec![b, oh, ow, c], out)
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub fn upsample2_backward(grad: &Tensor) -> Result<Tensor> {
    let (b, oh, ow, c) = image_dims(grad, "upsample backward")?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(Error::InvalidShape {
            shape: grad.shape().to_vec(),
            reason: "upsample gradient must have even extents".into(),
        });
    }
    let (h, w) = (oh / 2, ow / 2);
    let gd = grad.data();
    let mut out = vec![0.0; b * h * w * c];
    for bi in 0..b {
        for y in 0..oh {
            for xx in 0..ow {
                let src = ((bi * oh + y) * ow + xx) * c;
                let dst = ((bi * h + y / 2) * w + xx / 2) * c;
                for ch in 0..c {
                    out[dst + ch] += gd[src + ch];
                }
            }
        }
    }
    Tensor::new(vec![b, h, w, c], out)
}
