//! Stride-1 "same" convolution over channel-last batches.
//!
//! Weights are laid out `[K, K, C_in, C_out]` so the innermost loop runs over
//! contiguous output channels.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) fn check_kernel(kernel: usize) -> Result<()> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::invalid(format!(
            "convolution kernel size must be odd, got {kernel}"
        )));
    }
    Ok(())
}

fn dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (b, h, wd, ci) = match x.shape()[..] {
        [b, h, w, c] => (b, h, w, c),
        _ => {
            return Err(Error::InvalidShape {
                shape: x.shape().to_vec(),
                reason: "conv2d expects [B, H, W, C]".into(),
            })
        }
    };
    let (k, co) = match w.shape()[..] {
        [k, k2, wc, co] if k == k2 && wc == ci => (k, co),
        _ => {
            return Err(Error::ShapeMismatch {
                left: x.shape().to_vec(),
                right: w.shape().to_vec(),
                context: "conv2d input channels vs kernel",
            })
        }
    };
    check_kernel(k)?;
    Ok((b, h, wd, ci, k, co))
}

/// Pre-activation output: bias plus the windowed sum over the zero-padded input.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, h, wd, ci, k, co) = dims(x, w)?;
    let half = k / 2;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; b * h * wd * co];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..wd {
                let o_off = ((bi * h + y) * wd + xx) * co;
                let o = &mut out[o_off..o_off + co];
                o.copy_from_slice(bias.data());
                for dy in 0..k {
                    let iy = y + dy;
                    if iy < half || iy - half >= h {
                        continue;
                    }
                    let iy = iy - half;
                    for dx in 0..k {
                        let ix = xx + dx;
                        if ix < half || ix - half >= wd {
                            continue;
                        }
                        let ix = ix - half;
                        let i_off = ((bi * h + iy) * wd + ix) * ci;
                        let w_off = (dy * k + dx) * ci * co;
                        for c in 0..ci {
                            let a = xd[i_off + c];
                            let wrow = &wdat[w_off + c * co..w_off + (c + 1) * co];
                            for (ov, &wv) in o.iter_mut().zip(wrow) {
                                *ov += a * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, h, wd, co], out)
}

/// Gradients of [`conv2d`] w.r.t. input, kernel and bias.
pub fn conv2d_backward(x: &Tensor, w: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, h, wd, ci, k, co) = dims(x, w)?;
    if grad.shape() != [b, h, wd, co] {
        return Err(Error::ShapeMismatch {
            left: grad.shape().to_vec(),
            right: vec![b, h, wd, co],
            context: "conv2d backward",
        });
    }
    let half = k / 2;
    let xd = x.data();
    let wdat = w.data();
    let gd = grad.data();
    let mut dx = vec![0.0; xd.len()];
    let mut dw = vec![0.0; wdat.len()];
    let mut db = vec![0.0; co];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..wd {
                let g_off = ((bi * h + y) * wd + xx) * co;
                let g = &gd[g_off..g_off + co];
                for (d, &gv) in db.iter_mut().zip(g) {
                    *d += gv;
                }
                for dy in 0..k {
                    let iy = y + dy;
                    if iy < half || iy - half >= h {
                        continue;
                    }
                    let iy = iy - half;
                    for dxk in 0..k {
                        let ix = xx + dxk;
                        if ix < half || ix - half >= wd {
                            continue;
                        }
                        let ix = ix - half;
                        let i_off = ((bi * h + iy) * wd + ix) * ci;
                        let w_off = (dy * k + dxk) * ci * co;
                        for c in 0..ci {
                            let a = xd[i_off + c];
                            let wrow = &wdat[w_off + c * co..w_off + (c + 1) * co];
                            let dwrow = &mut dw[w_off + c * co..w_off + (c + 1) * co];
                            let mut acc = 0.0;
                            for ((dwv, &wv), &gv) in dwrow.iter_mut().zip(wrow).zip(g) {
                                *dwv += a * gv;
                                acc += wv * gv;
                            }
                            dx[i_off + c] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(w.shape().to_vec(), dw)?,
        Tensor::new(vec![co], db)?,
    ))
}
