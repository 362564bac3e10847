//! Dense row-major `f64` tensors and the seeded generator used across the crate.
//!
//! Images follow the channel-last convention `[H, W, C]`, batched as
//! `[B, H, W, C]`. Every reduction sums left to right in row-major order so
//! results are reproducible bit for bit.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Poisson, StandardNormal};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Reduction operator for [`Tensor::reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Max,
    Mean,
}

/// Axes selected by a reduction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Axes {
    All,
    These(Vec<usize>),
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            let reason = format!("expected {} elements, got {}", numel(&shape), data.len());
            return Err(Error::InvalidShape { shape, reason });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Uniform draws in `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let data = (0..numel(shape)).map(|_| rng.uniform_in(lo, hi)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::ShapeMismatch {
                left: self.shape,
                right: shape.to_vec(),
                context: "reshape",
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    fn same_shape(&self, other: &Tensor, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
                context,
            });
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, context: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, context)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `bias` along the last axis (the only broadcast supported).
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let c = *self.shape.last().unwrap_or(&0);
        if bias.rank() != 1 || bias.len() != c {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: bias.shape.clone(),
                context: "channel bias",
            });
        }
        let mut out = self.clone();
        for row in out.data.chunks_exact_mut(c) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// `[m,k] x [k,n] -> [m,n]`, each entry summed over `k` in ascending order.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
                context: "matmul",
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let a_row = &self.data[i * k..(i + 1) * k];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (c, &b) in row.iter_mut().zip(b_row) {
                    *c += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "transpose needs rank 2".into(),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    fn expect_image(&self, context: &str) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("{context} expects an [H, W, C] image"),
            }),
        }
    }

    /// Surrounds an `[H, W, C]` image with `k` rings of zeros.
    pub fn pad_zero(&self, k: usize) -> Result<Tensor> {
        let (h, w, c) = self.expect_image("pad_zero")?;
        let (ph, pw) = (h + 2 * k, w + 2 * k);
        let mut out = vec![0.0; ph * pw * c];
        for y in 0..h {
            let src = &self.data[y * w * c..(y + 1) * w * c];
            let start = ((y + k) * pw + k) * c;
            out[start..start + w * c].copy_from_slice(src);
        }
        Tensor::new(vec![ph, pw, c], out)
    }

    /// Inverse of [`Tensor::pad_zero`]: drops `k` border rings.
    pub fn crop(&self, k: usize) -> Result<Tensor> {
        let (h, w, c) = self.expect_image("crop")?;
        if 2 * k > h || 2 * k > w {
            return Err(Error::invalid(format!("cannot crop {k} rings from {h}x{w}")));
        }
        let (oh, ow) = (h - 2 * k, w - 2 * k);
        let mut out = Vec::with_capacity(oh * ow * c);
        for y in 0..oh {
            let start = ((y + k) * w + k) * c;
            out.extend_from_slice(&self.data[start..start + ow * c]);
        }
        Tensor::new(vec![oh, ow, c], out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Reduces over `axes`; reduced extents are dropped unless `keep_dims`.
    pub fn reduce(&self, op: Reduce, axes: &Axes, keep_dims: bool) -> Result<Tensor> {
        let rank = self.rank();
        let reduced: Vec<bool> = match axes {
            Axes::All => vec![true; rank],
            Axes::These(list) => {
                let mut mask = vec![false; rank];
                for &a in list {
                    if a >= rank {
                        return Err(Error::AxisOutOfRange { axis: a, rank });
                    }
                    mask[a] = true;
                }
                mask
            }
        };
        let out_full: Vec<usize> = self
            .shape
            .iter()
            .zip(&reduced)
            .map(|(&d, &r)| if r { 1 } else { d })
            .collect();
        let count = self
            .shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product::<usize>();
        let init = match op {
            Reduce::Max => f64::NEG_INFINITY,
            _ => 0.0,
        };
        let mut acc = vec![init; numel(&out_full)];
        let mut idx = vec![0usize; rank];
        for &v in &self.data {
            let mut flat = 0;
            for d in 0..rank {
                let i = if reduced[d] { 0 } else { idx[d] };
                flat = flat * out_full[d] + i;
            }
            match op {
                Reduce::Max => acc[flat] = acc[flat].max(v),
                _ => acc[flat] += v,
            }
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < self.shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        if op == Reduce::Mean {
            for a in &mut acc {
                *a /= count as f64;
            }
        }
        let shape = if keep_dims {
            out_full
        } else {
            self.shape
                .iter()
                .zip(&reduced)
                .filter(|(_, &r)| !r)
                .map(|(&d, _)| d)
                .collect()
        };
        Tensor::new(shape, acc)
    }

    /// Errors if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Size of one item along the leading (batch) axis.
    pub fn item_len(&self) -> usize {
        if self.shape.is_empty() {
            return 1;
        }
        self.shape[1..].iter().product()
    }

    pub fn batch_size(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Borrow item `i` along the leading axis.
    pub fn item(&self, i: usize) -> &[f64] {
        let n = self.item_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.item_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    /// Items at `indices` along the leading axis, in the given order.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let b = self.batch_size();
        let n = self.item_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= b {
                return Err(Error::invalid(format!("index {i} out of range for batch of {b}")));
            }
            data.extend_from_slice(self.item(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(shape, data)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack an empty list"))?;
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            first.same_shape(t, "stack")?;
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    /// Drops the leading axis of a single-item batch view.
    pub fn unbatch(&self, i: usize) -> Tensor {
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.item(i).to_vec(),
        }
    }
}

/// Linear-interpolation percentile with rank `q/100 * (n - 1)` on sorted values.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty set"));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::invalid(format!("percentile {q} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, q))
}

/// As [`percentile`] for input that is already sorted ascending.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Splitmix64 finalizer, used to derive independent stream seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combines a base seed with stream identifiers into a new seed.
pub fn derive_seed(seed: u64, streams: &[u64]) -> u64 {
    streams.iter().fold(mix64(seed), |acc, &s| mix64(acc ^ mix64(s)))
}

/// Deterministic generator: xoshiro256** seeded through splitmix64.
#[derive(Debug, Clone)]
pub struct Rng(Xoshiro256StarStar);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(Xoshiro256StarStar::seed_from_u64(seed))
    }

    /// Independent generator for a sub-stream of `seed`.
    pub fn derive(seed: u64, streams: &[u64]) -> Self {
        Rng::new(derive_seed(seed, streams))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.0.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    pub fn poisson(&mut self, lambda: f64) -> u64 {
        if lambda <= 0.0 {
            return 0;
        }
        match Poisson::new(lambda) {
            Ok(d) => {
                let v: f64 = d.sample(&mut self.0);
                v as u64
            }
            Err(_) => 0,
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.0);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    /// `k` distinct indices from `0..n` in random order.
    pub fn choose(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut p = self.permutation(n);
        p.truncate(k);
        p
    }
}
