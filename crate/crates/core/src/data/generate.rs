//! Deterministic synthetic storm generator.
//!
//! Each sample holds 0-4 elliptical Gaussian storm cells. The radar-like
//! `vil` channel is their sum; `ir` shows cold tops as a blurred, noisy
//! inverse of `vil`; `wv` is a further-blurred correlate of `ir`; `vis`
//! is a noisy cloud mask. Flashes are Poisson with rate `alpha * vil^2`
//! inside storm cores, with `alpha` calibrated to a target positive-pixel
//! rate.

use serde::{Deserialize, Serialize};

use super::sample::StormSample;
use crate::error::{Error, Result};
use crate::tensor::{derive_seed, Rng, Tensor};

pub const GENERATOR_VERSION: u32 = 1;
pub const IMAGE_SIZE: usize = 48;
pub const CHANNEL_COUNT: usize = 4;
pub const DEFAULT_POS_RATE: f64 = 0.01;
/// `vil` level above which a pixel can produce flashes.
pub const CORE_THRESHOLD: f64 = 0.5;
const MAX_CELLS: usize = 4;
const CALIBRATION_SAMPLES: usize = 512;
const CALIBRATION_SPLIT: u64 = 3;
const FIELD_STREAM: u64 = 0;
const FLASH_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub const ALL: [SplitKind; 3] = [SplitKind::Train, SplitKind::Val, SplitKind::Test];

    pub fn id(self) -> u64 {
        match self {
            SplitKind::Train => 0,
            SplitKind::Val => 1,
            SplitKind::Test => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split `{s}`")))
    }
}

/// A batch of samples stored as `[N, H, W, C]` images and `[N, H, W]` counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub images: Tensor,
    pub flashes: Tensor,
}

impl Split {
    pub fn new(images: Tensor, flashes: Tensor) -> Result<Self> {
        let ok = images.rank() == 4 && flashes.rank() == 3 && images.shape()[..3] == flashes.shape()[..];
        if !ok {
            return Err(Error::ShapeMismatch {
                left: images.shape().to_vec(),
                right: flashes.shape().to_vec(),
                context: "split images vs flashes",
            });
        }
        Ok(Self { images, flashes })
    }

    pub fn from_samples(samples: &[StormSample]) -> Result<Self> {
        let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
        let flashes: Vec<Tensor> = samples.iter().map(|s| s.flashes.clone()).collect();
        Self::new(Tensor::stack(&images)?, Tensor::stack(&flashes)?)
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample(&self, i: usize) -> StormSample {
        StormSample {
            image: self.images.unbatch(i),
            flashes: self.flashes.unbatch(i),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(self.images.gather(indices)?, self.flashes.gather(indices)?)
    }

    pub fn flash_counts(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.flashes.item(i).iter().sum()).collect()
    }

    pub fn positive_pixel_rate(&self) -> f64 {
        let pos = self.flashes.data().iter().filter(|&&f| f >= 1.0).count();
        pos as f64 / self.flashes.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub pixel_pos_rate_target: f64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 2000,
            n_val: 400,
            n_test: 400,
            pixel_pos_rate_target: DEFAULT_POS_RATE,
        }
    }
}

impl GenerateConfig {
    pub fn count(&self, split: SplitKind) -> usize {
        match split {
            SplitKind::Train => self.n_train,
            SplitKind::Val => self.n_val,
            SplitKind::Test => self.n_test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GenerateConfig,
    /// Calibrated flash-rate coefficient.
    pub alpha: f64,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    pub fn split(&self, kind: SplitKind) -> &Split {
        match kind {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }

    pub fn positive_pixel_rate(&self) -> f64 {
        let (mut pos, mut total) = (0usize, 0usize);
        for k in SplitKind::ALL {
            let f = &self.split(k).flashes;
            pos += f.data().iter().filter(|&&v| v >= 1.0).count();
            total += f.len();
        }
        pos as f64 / total.max(1) as f64
    }
}

/// Seed of sample `index` in `split`; distinct splits never share a stream.
pub fn sample_seed(seed: u64, split: u64, index: u64) -> u64 {
    derive_seed(seed, &[split, index])
}

/// Separable Gaussian blur of one `[n, n]` field with clamped borders.
fn blur(field: &[f64], n: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|d| (-0.5 * (d as f64 / sigma).powi(2)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let clamp = |i: isize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            tmp[y * n + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * field[y * n + clamp(x as isize + k as isize - r)])
                .sum::<f64>()
                / norm;
        }
    }
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            out[y * n + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clamp(y as isize + k as isize - r) * n + x])
                .sum::<f64>()
                / norm;
        }
    }
    out
}

/// The four image channels of one sample, channel-last.
fn fields(rng: &mut Rng) -> Vec<f64> {
    let n = IMAGE_SIZE;
    let cells = rng.below(MAX_CELLS + 1);
    let mut vil = vec![0.0; n * n];
    for _ in 0..cells {
        let cy = rng.uniform_in(4.0, n as f64 - 4.0);
        let cx = rng.uniform_in(4.0, n as f64 - 4.0);
        let sa = rng.uniform_in(2.0, 6.0);
        let sb = rng.uniform_in(2.0, 6.0);
        let theta = rng.uniform_in(0.0, std::f64::consts::PI);
        let amp = rng.uniform_in(0.2, 1.0);
        let (s, c) = theta.sin_cos();
        for y in 0..n {
            for x in 0..n {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let u = (c * dx + s * dy) / sa;
                let v = (-s * dx + c * dy) / sb;
                vil[y * n + x] += amp * (-0.5 * (u * u + v * v)).exp();
            }
        }
    }
    vil.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));

    let smooth = blur(&vil, n, 2.5);
    let ir: Vec<f64> = smooth
        .iter()
        .map(|s| (0.85 - 0.7 * s + 0.08 * rng.normal()).clamp(0.0, 1.0))
        .collect();
    let ir_blur = blur(&ir, n, 3.0);
    let wv: Vec<f64> = ir_blur
        .iter()
        .map(|b| (0.15 + 0.7 * b + 0.08 * rng.normal()).clamp(0.0, 1.0))
        .collect();
    let brightness = rng.uniform_in(0.6, 1.0);
    let vis: Vec<f64> = smooth
        .iter()
        .map(|&s| {
            let cloud = if s > 0.05 { 0.8 } else { 0.25 };
            (brightness * cloud + 0.1 * rng.normal()).clamp(0.0, 1.0)
        })
        .collect();

    let mut image = Vec::with_capacity(n * n * CHANNEL_COUNT);
    for p in 0..n * n {
        image.extend_from_slice(&[vil[p], ir[p], wv[p], vis[p]]);
    }
    image
}

fn flash_rate(alpha: f64, vil: f64) -> f64 {
    if vil > CORE_THRESHOLD {
        alpha * vil * vil
    } else {
        0.0
    }
}

/// Generates sample `index` of `split` in isolation.
pub fn generate_sample(seed: u64, split: SplitKind, index: usize, alpha: f64) -> StormSample {
    let s = sample_seed(seed, split.id(), index as u64);
    let image = fields(&mut Rng::derive(s, &[FIELD_STREAM]));
    let mut rng = Rng::derive(s, &[FLASH_STREAM]);
    let flashes: Vec<f64> = (0..IMAGE_SIZE * IMAGE_SIZE)
        .map(|p| {
            let lambda = flash_rate(alpha, image[p * CHANNEL_COUNT]);
            (rng.poisson(lambda).min(u16::MAX as u64)) as f64
        })
        .collect();
    StormSample {
        image: Tensor::new(vec![IMAGE_SIZE, IMAGE_SIZE, CHANNEL_COUNT], image).expect("generator shape"),
        flashes: Tensor::new(vec![IMAGE_SIZE, IMAGE_SIZE], flashes).expect("generator shape"),
    }
}

/// Expected positive-pixel rate for each `alpha`, over a fixed calibration set.
struct Calibration {
    core_vil: Vec<f64>,
    pixels: usize,
}

impl Calibration {
    fn new(seed: u64) -> Self {
        let mut core_vil = Vec::new();
        for i in 0..CALIBRATION_SAMPLES {
            let s = sample_seed(seed, CALIBRATION_SPLIT, i as u64);
            let image = fields(&mut Rng::derive(s, &[FIELD_STREAM]));
            core_vil.extend(image.iter().step_by(CHANNEL_COUNT).filter(|&&v| v > CORE_THRESHOLD));
        }
        Self {
            core_vil,
            pixels: CALIBRATION_SAMPLES * IMAGE_SIZE * IMAGE_SIZE,
        }
    }

    fn rate(&self, alpha: f64) -> f64 {
        let hit: f64 = self.core_vil.iter().map(|&v| 1.0 - (-alpha * v * v).exp()).sum();
        hit / self.pixels as f64
    }

    /// Bisection on `log(alpha)`; the rate is monotone in `alpha`.
    fn solve(&self, target: f64) -> Result<f64> {
        let (mut lo, mut hi) = (-12.0f64, 12.0f64);
        let ceiling = self.rate(hi.exp());
        if ceiling < target || self.rate(lo.exp()) > target {
            return Err(Error::invalid(format!(
                "positive-pixel rate {target} is unreachable: calibration achieves at most {ceiling:.6}"
            )));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.rate(mid.exp()) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok((0.5 * (lo + hi)).exp())
    }
}

/// Flash-rate coefficient that hits `target` in expectation.
pub fn calibrate_alpha(seed: u64, target: f64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::invalid(format!("positive-pixel rate {target} outside (0, 1)")));
    }
    Calibration::new(seed).solve(target)
}

pub fn generate_split(seed: u64, split: SplitKind, count: usize, alpha: f64) -> Result<Split> {
    let samples: Vec<StormSample> = (0..count).map(|i| generate_sample(seed, split, i, alpha)).collect();
    Split::from_samples(&samples)
}

pub fn generate(config: &GenerateConfig) -> Result<Dataset> {
    for k in SplitKind::ALL {
        if config.count(k) == 0 {
            return Err(Error::invalid(format!("{} count must be at least 1", k.name())));
        }
    }
    let alpha = calibrate_alpha(config.seed, config.pixel_pos_rate_target)?;
    Ok(Dataset {
        config: *config,
        alpha,
        train: generate_split(config.seed, SplitKind::Train, config.n_train, alpha)?,
        val: generate_split(config.seed, SplitKind::Val, config.n_val, alpha)?,
        test: generate_split(config.seed, SplitKind::Test, config.n_test, alpha)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn pair_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            if !labels[i] {
                continue;
            }
            for (j, &sj) in scores.iter().enumerate() {
                if labels[j] {
                    continue;
                }
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
        num / den
    }

    #[test]
    fn samples_are_reproducible_in_isolation() {
        let a = generate_sample(7, SplitKind::Val, 13, 1.0);
        assert_eq!(a, generate_sample(7, SplitKind::Val, 13, 1.0));
        let split = generate_split(7, SplitKind::Val, 15, 1.0).unwrap();
        assert_eq!(split.sample(13), a);
        assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn flashes_only_in_cores() {
        let mut zero_cell_seen = false;
        for i in 0..200 {
            let s = generate_sample(3, SplitKind::Train, i, 2.0);
            for p in 0..IMAGE_SIZE * IMAGE_SIZE {
                if s.flashes.data()[p] > 0.0 {
                    assert!(s.image.data()[p * 4] > CORE_THRESHOLD);
                }
            }
            if s.image.data().iter().step_by(4).all(|&v| v == 0.0) {
                zero_cell_seen = true;
                assert!(!s.has_lightning());
            }
        }
        assert!(zero_cell_seen);
    }

    #[test]
    fn split_seeds_are_disjoint() {
        let mut seen = HashSet::new();
        for seed in [0u64, 1, 12345] {
            seen.clear();
            for split in 0..=CALIBRATION_SPLIT {
                for i in 0..5000 {
                    assert!(seen.insert(sample_seed(seed, split, i)));
                }
            }
        }
    }

    #[test]
    fn unreachable_rate_is_reported() {
        let err = calibrate_alpha(0, 0.5).unwrap_err().to_string();
        assert!(err.contains("achieves at most"), "{err}");
        assert!(calibrate_alpha(0, 0.0).is_err());
    }

    #[test]
    fn default_generation_hits_target_and_has_signal() {
        let cfg = GenerateConfig {
            n_train: 600,
            n_val: 400,
            n_test: 10,
            ..GenerateConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let rate = ds.positive_pixel_rate();
        assert!((0.005..=0.015).contains(&rate), "rate {rate}");
        let val = &ds.val;
        let labels: Vec<bool> = val.flash_counts().iter().map(|&c| c >= 1.0).collect();
        let max_vil: Vec<f64> = (0..val.len())
            .map(|i| val.images.item(i).iter().step_by(4).cloned().fold(0.0, f64::max))
            .collect();
        let pos = labels.iter().filter(|&&l| l).count();
        assert!(pos > 40 && pos < 360, "{pos} positives");
        let auc = pair_auc(&max_vil, &labels);
        assert!(auc >= 0.97, "max(vil) AUC {auc}");
    }
}
