use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Activation, PoolMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Perceptron,
    Mlp,
    Cnn,
    Unet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputKind {
    SigmoidScalar,
    LinearScalar,
    SigmoidMap,
    LinearMap,
    /// Non-negative map for per-pixel counts.
    SoftplusMap,
}

impl OutputKind {
    pub fn is_map(self) -> bool {
        matches!(self, OutputKind::SigmoidMap | OutputKind::LinearMap | OutputKind::SoftplusMap)
    }

    pub fn is_probability(self) -> bool {
        matches!(self, OutputKind::SigmoidScalar | OutputKind::SigmoidMap)
    }

    pub fn activation(self) -> Activation {
        match self {
            OutputKind::SigmoidScalar | OutputKind::SigmoidMap => Activation::Sigmoid,
            OutputKind::LinearScalar | OutputKind::LinearMap => Activation::Linear,
            OutputKind::SoftplusMap => Activation::Softplus,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub filters: usize,
    /// Convolutions before the block's pooling step.
    pub convs: usize,
}

/// Declarative architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Per-sample input shape: `[n]` for feature vectors, `[H, W, C]` for images.
    pub input_shape: Vec<usize>,
    /// Hidden dense widths (MLP body, CNN head).
    pub hidden_layers: Vec<usize>,
    pub conv_blocks: Vec<ConvBlock>,
    /// U-Net pooling depth.
    pub depth: usize,
    /// U-Net filters at full resolution; doubled per level.
    pub base_filters: usize,
    pub kernel: usize,
    pub activation: Activation,
    pub pool: PoolMode,
    pub dropout_rate: f64,
    pub use_batchnorm: bool,
    pub output: OutputKind,
    pub seed: u64,
}

impl ModelSpec {
    fn base(kind: ModelKind, input_shape: Vec<usize>, output: OutputKind) -> Self {
        Self {
            kind,
            input_shape,
            hidden_layers: Vec::new(),
            conv_blocks: Vec::new(),
            depth: 0,
            base_filters: 0,
            kernel: 3,
            activation: Activation::Relu,
            pool: PoolMode::Max,
            dropout_rate: 0.0,
            use_batchnorm: false,
            output,
            seed: 0,
        }
    }

    /// Single weighted sum plus activation over `features` inputs.
    pub fn perceptron(features: usize, output: OutputKind) -> Self {
        Self::base(ModelKind::Perceptron, vec![features], output)
    }

    /// Dense stack; image inputs are flattened first.
    pub fn mlp(input_shape: &[usize], hidden: &[usize], output: OutputKind) -> Self {
        Self {
            hidden_layers: hidden.to_vec(),
            ..Self::base(ModelKind::Mlp, input_shape.to_vec(), output)
        }
    }

    /// Three conv/pool blocks with 8, 16 and 32 filters and a 64-unit head.
    pub fn cnn(input_shape: &[usize], output: OutputKind) -> Self {
        Self {
            conv_blocks: vec![
                ConvBlock { filters: 8, convs: 1 },
                ConvBlock { filters: 16, convs: 1 },
                ConvBlock { filters: 32, convs: 1 },
            ],
            hidden_layers: vec![64],
            ..Self::base(ModelKind::Cnn, input_shape.to_vec(), output)
        }
    }

    /// Encoder/decoder with `depth` poolings and `base_filters` at full resolution.
    pub fn unet(input_shape: &[usize], depth: usize, base_filters: usize, output: OutputKind) -> Self {
        Self {
            depth,
            base_filters,
            ..Self::base(ModelKind::Unet, input_shape.to_vec(), output)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub(crate) fn image_input(&self) -> Result<(usize, usize, usize)> {
        match self.input_shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::Spec(format!(
                "{:?} needs an [H, W, C] input, got {:?}",
                self.kind, self.input_shape
            ))),
        }
    }

    /// Checks the spec for internal consistency before any layer is built.
    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Spec(format!("input shape {:?} has empty extents", self.input_shape)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Spec(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.hidden_layers.contains(&0) {
            return Err(Error::Spec("hidden layer of width 0".into()));
        }
        match self.kind {
            ModelKind::Perceptron => {
                if self.input_shape.len() != 1 {
                    return Err(Error::Spec(format!(
                        "perceptron takes a feature vector, got {:?}",
                        self.input_shape
                    )));
                }
                if self.output.is_map() {
                    return Err(Error::Spec("perceptron has a scalar output".into()));
                }
            }
            ModelKind::Mlp => {
                if self.output.is_map() {
                    return Err(Error::Spec("mlp has a scalar output".into()));
                }
            }
            ModelKind::Cnn => {
                let (mut h, mut w, _) = self.image_input()?;
                if self.output.is_map() {
                    return Err(Error::Spec("cnn has a scalar output".into()));
                }
                if self.conv_blocks.is_empty() {
                    return Err(Error::Spec("cnn needs at least one conv block".into()));
                }
                for (i, b) in self.conv_blocks.iter().enumerate() {
                    if b.filters == 0 || b.convs == 0 {
                        return Err(Error::Spec(format!("conv block {i} is empty")));
                    }
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::Spec(format!(
                            "conv block {i}: pooling a {h}x{w} map needs even extents"
                        )));
                    }
                    h /= 2;
                    w /= 2;
                }
            }
            ModelKind::Unet => {
                let (h, w, _) = self.image_input()?;
                if !self.output.is_map() {
                    return Err(Error::Spec("unet produces a map output".into()));
                }
                if self.depth == 0 || self.base_filters == 0 {
                    return Err(Error::Spec("unet needs depth >= 1 and base_filters >= 1".into()));
                }
                let scale = 1usize << self.depth;
                if h % scale != 0 || w % scale != 0 || h / scale < 3 || w / scale < 3 {
                    return Err(Error::Spec(format!(
                        "unet depth {}: {h}x{w} / 2^{} must be whole and at least 3",
                        self.depth, self.depth
                    )));
                }
            }
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Spec(format!("kernel size {} must be odd", self.kernel)));
        }
        Ok(())
    }

    /// Trainable parameter count, computed from the spec alone.
    pub fn parameter_count(&self) -> Result<usize> {
        self.validate()?;
        let dense = |i: usize, o: usize| i * o + o;
        let conv = |k: usize, i: usize, o: usize| k * k * i * o + o;
        let bn = |f: usize| if self.use_batchnorm { 2 * f } else { 0 };
        let head = |mut width: usize| {
            let mut total = 0;
            for &h in &self.hidden_layers {
                total += dense(width, h) + bn(h);
                width = h;
            }
            total + dense(width, 1)
        };
        Ok(match self.kind {
            ModelKind::Perceptron => dense(self.input_shape[0], 1),
            ModelKind::Mlp => head(self.input_shape.iter().product()),
            ModelKind::Cnn => {
                let (mut h, mut w, mut c) = self.image_input()?;
                let mut total = 0;
                for b in &self.conv_blocks {
                    for _ in 0..b.convs {
                        total += conv(self.kernel, c, b.filters) + bn(b.filters);
                        c = b.filters;
                    }
                    h /= 2;
                    w /= 2;
                }
                total + head(h * w * c)
            }
            ModelKind::Unet => {
                let (_, _, c0) = self.image_input()?;
                let f = |l: usize| self.base_filters << l;
                let mut total = 0;
                let mut c = c0;
                for l in 0..=self.depth {
                    total += conv(self.kernel, c, f(l)) + bn(f(l));
                    c = f(l);
                }
                for l in (0..self.depth).rev() {
                    total += conv(self.kernel, c + f(l), f(l)) + bn(f(l));
                    c = f(l);
                }
                total + conv(1, c, 1)
            }
        })
    }
}
