//! Single-sample operations: resolution reduction, percentile features,
//! patching and augmentation.

use crate::error::{Error, Result};
use crate::tensor::{percentile_sorted, Rng, Tensor};

pub const CHANNELS: [&str; 4] = ["vil", "ir", "wv", "vis"];
pub const PERCENTILES: [f64; 9] = [0.0, 1.0, 10.0, 25.0, 50.0, 75.0, 90.0, 99.0, 100.0];
pub const FEATURE_COUNT: usize = CHANNELS.len() * PERCENTILES.len();

/// One storm image with its per-pixel flash counts.
#[derive(Debug, Clone, PartialEq)]
pub struct StormSample {
    /// `[H, W, 4]`, channels `vil, ir, wv, vis`, each in `[0, 1]`.
    pub image: Tensor,
    /// `[H, W]` non-negative integer counts.
    pub flashes: Tensor,
}

impl StormSample {
    pub fn new(image: Tensor, flashes: Tensor) -> Result<Self> {
        let (h, w) = match image.shape() {
            [h, w, _] => (*h, *w),
            s => {
                return Err(Error::InvalidShape {
                    shape: s.to_vec(),
                    reason: "sample image must be [H, W, C]".into(),
                })
            }
        };
        if flashes.shape() != [h, w] {
            return Err(Error::ShapeMismatch {
                left: image.shape().to_vec(),
                right: flashes.shape().to_vec(),
                context: "sample flashes",
            });
        }
        Ok(Self { image, flashes })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn image_flash_count(&self) -> f64 {
        self.flashes.sum()
    }

    pub fn has_lightning(&self) -> bool {
        self.image_flash_count() >= 1.0
    }

    pub fn positive_pixels(&self) -> usize {
        self.flashes.data().iter().filter(|&&f| f >= 1.0).count()
    }
}

/// Block-mean resampling by an integer factor.
pub fn coarsen(img: &Tensor, factor: usize) -> Result<Tensor> {
    let [h, w, c] = *img.shape() else {
        return Err(Error::InvalidShape {
            shape: img.shape().to_vec(),
            reason: "coarsen expects [H, W, C]".into(),
        });
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(format!("{h}x{w} is not divisible by factor {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = vec![0.0; oh * ow * c];
    let x = img.data();
    for y in 0..h {
        for xx in 0..w {
            let o = ((y / factor) * ow + xx / factor) * c;
            let i = (y * w + xx) * c;
            for ch in 0..c {
                out[o + ch] += x[i + ch];
            }
        }
    }
    let inv = 1.0 / (factor * factor) as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(vec![oh, ow, c], out)
}

/// The nine percentiles of each channel, channel-major.
pub fn extract_percentiles(image: &Tensor) -> Result<Tensor> {
    let [h, w, c] = *image.shape() else {
        return Err(Error::InvalidShape {
            shape: image.shape().to_vec(),
            reason: "percentile features expect [H, W, C]".into(),
        });
    };
    let mut out = Vec::with_capacity(c * PERCENTILES.len());
    let mut values = vec![0.0; h * w];
    for ch in 0..c {
        for (p, v) in values.iter_mut().enumerate() {
            *v = image.data()[p * c + ch];
        }
        values.sort_by(f64::total_cmp);
        out.extend(PERCENTILES.iter().map(|&q| percentile_sorted(&values, q)));
    }
    Ok(Tensor::from_vec(out))
}

/// A tile of a sample and where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub row: usize,
    pub col: usize,
    pub sample: StormSample,
}

/// Non-overlapping `size`-square tiles whose positive-pixel fraction is at least `min_pos_fraction`.
pub fn patch(sample: &StormSample, size: usize, min_pos_fraction: f64) -> Result<Vec<Patch>> {
    let (h, w, c) = (sample.height(), sample.width(), sample.channels());
    if size == 0 || h % size != 0 || w % size != 0 {
        return Err(Error::invalid(format!("patch size {size} does not tile {h}x{w}")));
    }
    if !(0.0..=1.0).contains(&min_pos_fraction) {
        return Err(Error::invalid(format!("min_pos_fraction {min_pos_fraction} outside [0, 1]")));
    }
    let mut out = Vec::new();
    for row in (0..h).step_by(size) {
        for col in (0..w).step_by(size) {
            let mut img = Vec::with_capacity(size * size * c);
            let mut fl = Vec::with_capacity(size * size);
            for y in row..row + size {
                let s = (y * w + col) * c;
                img.extend_from_slice(&sample.image.data()[s..s + size * c]);
                fl.extend_from_slice(&sample.flashes.data()[y * w + col..y * w + col + size]);
            }
            let positive = fl.iter().filter(|&&f| f >= 1.0).count() as f64 / (size * size) as f64;
            if positive >= min_pos_fraction {
                out.push(Patch {
                    row,
                    col,
                    sample: StormSample {
                        image: Tensor::new(vec![size, size, c], img)?,
                        flashes: Tensor::new(vec![size, size], fl)?,
                    },
                });
            }
        }
    }
    Ok(out)
}

/// Reassembles patches into an `h x w` sample; uncovered pixels stay zero.
pub fn stitch(patches: &[Patch], h: usize, w: usize) -> Result<StormSample> {
    let c = patches
        .first()
        .ok_or_else(|| Error::invalid("nothing to stitch"))?
        .sample
        .channels();
    let mut img = Tensor::zeros(&[h, w, c]);
    let mut fl = Tensor::zeros(&[h, w]);
    for p in patches {
        let (ph, pw) = (p.sample.height(), p.sample.width());
        if p.sample.channels() != c || p.row + ph > h || p.col + pw > w {
            return Err(Error::invalid(format!("patch at ({}, {}) does not fit {h}x{w}x{c}", p.row, p.col)));
        }
        for y in 0..ph {
            let dst = ((p.row + y) * w + p.col) * c;
            img.data_mut()[dst..dst + pw * c].copy_from_slice(&p.sample.image.data()[y * pw * c..(y + 1) * pw * c]);
            let dst = (p.row + y) * w + p.col;
            fl.data_mut()[dst..dst + pw].copy_from_slice(&p.sample.flashes.data()[y * pw..(y + 1) * pw]);
        }
    }
    StormSample::new(img, fl)
}

pub const AUGMENT_NOISE: f64 = 0.01;

/// One draw of the augmentation composition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    /// Counter-clockwise quarter turns.
    pub quarter_turns: usize,
    pub flip_ud: bool,
    pub flip_lr: bool,
    pub noise_sigma: f64,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation {
        quarter_turns: 0,
        flip_ud: false,
        flip_lr: false,
        noise_sigma: 0.0,
    };

    pub fn draw(rng: &mut Rng) -> Self {
        Self {
            quarter_turns: rng.below(4),
            flip_ud: rng.bernoulli(0.5),
            flip_lr: rng.bernoulli(0.5),
            noise_sigma: AUGMENT_NOISE,
        }
    }

    /// Source pixel for output pixel `(y, x)` of a square `n x n` grid.
    fn source(&self, n: usize, y: usize, x: usize) -> (usize, usize) {
        let (mut y, mut x) = (y, x);
        // undo the flips, then the rotation
        if self.flip_lr {
            x = n - 1 - x;
        }
        if self.flip_ud {
            y = n - 1 - y;
        }
        for _ in 0..self.quarter_turns % 4 {
            // inverse of a counter-clockwise turn (y, x) -> (n-1-x, y)
            (y, x) = (x, n - 1 - y);
        }
        (y, x)
    }

    /// Applies the draw to one `[n, n, c]` image and `[n, n]` count map.
    pub fn apply(&self, sample: &StormSample, rng: &mut Rng) -> Result<StormSample> {
        let (n, w, c) = (sample.height(), sample.width(), sample.channels());
        if n != w {
            return Err(Error::invalid(format!("augmentation needs a square sample, got {n}x{w}")));
        }
        let mut img = vec![0.0; n * n * c];
        let mut fl = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let (sy, sx) = self.source(n, y, x);
                let (d, s) = (y * n + x, sy * n + sx);
                img[d * c..(d + 1) * c].copy_from_slice(&sample.image.data()[s * c..(s + 1) * c]);
                fl[d] = sample.flashes.data()[s];
            }
        }
        if self.noise_sigma > 0.0 {
            for v in &mut img {
                *v = (*v + self.noise_sigma * rng.normal()).clamp(0.0, 1.0);
            }
        }
        StormSample::new(Tensor::new(vec![n, n, c], img)?, Tensor::new(vec![n, n], fl)?)
    }
}

/// Randomly rotated, flipped and noised copy of `sample`.
pub fn augment(sample: &StormSample, rng: &mut Rng) -> Result<StormSample> {
    Augmentation::draw(rng).apply(sample, rng)
}
