//! Turning a split into model inputs and targets for each learning task.

use serde::{Deserialize, Serialize};

use super::generate::Split;
use super::sample::{extract_percentiles, PERCENTILES};
use crate::error::{Error, Result};
use crate::loss::Loss;
use crate::models::{ModelSpec, OutputKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Does the image contain any lightning?
    Cls,
    /// How many flashes does the image contain?
    Reg,
    /// Which pixels contain lightning?
    SegCls,
    /// How many flashes in each pixel?
    SegReg,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "cls" => Task::Cls,
            "reg" => Task::Reg,
            "seg_cls" => Task::SegCls,
            "seg_reg" => Task::SegReg,
            _ => return Err(Error::invalid(format!("unknown task `{s}`"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Cls => "cls",
            Task::Reg => "reg",
            Task::SegCls => "seg_cls",
            Task::SegReg => "seg_reg",
        }
    }

    pub fn is_map(self) -> bool {
        matches!(self, Task::SegCls | Task::SegReg)
    }

    pub fn is_classification(self) -> bool {
        matches!(self, Task::Cls | Task::SegCls)
    }

    pub fn output(self) -> OutputKind {
        match self {
            Task::Cls => OutputKind::SigmoidScalar,
            Task::Reg => OutputKind::LinearScalar,
            Task::SegCls => OutputKind::SigmoidMap,
            Task::SegReg => OutputKind::SoftplusMap,
        }
    }

    pub fn default_loss(self) -> Loss {
        if self.is_classification() {
            Loss::Bce
        } else {
            Loss::Mse
        }
    }
}

/// The model families compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Perceptron,
    /// MLP on percentile features.
    MlpEng,
    /// MLP on raw pixels.
    MlpPix,
    Cnn,
    Unet,
}

impl Architecture {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "perceptron" => Architecture::Perceptron,
            "mlp_eng" => Architecture::MlpEng,
            "mlp_pix" => Architecture::MlpPix,
            "cnn" => Architecture::Cnn,
            "unet" => Architecture::Unet,
            _ => return Err(Error::invalid(format!("unknown model `{s}`"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Perceptron => "perceptron",
            Architecture::MlpEng => "mlp_eng",
            Architecture::MlpPix => "mlp_pix",
            Architecture::Cnn => "cnn",
            Architecture::Unet => "unet",
        }
    }

    pub fn uses_features(self) -> bool {
        matches!(self, Architecture::Perceptron | Architecture::MlpEng)
    }

    /// Rejects pairings such as a scalar model on a segmentation task.
    pub fn check_task(self, task: Task) -> Result<()> {
        let ok = (self == Architecture::Unet) == task.is_map();
        if ok {
            Ok(())
        } else if task.is_map() {
            Err(Error::Spec(format!(
                "task {} needs per-pixel output; use --model unet",
                task.name()
            )))
        } else {
            Err(Error::Spec(format!(
                "unet produces per-pixel maps; task {} needs an image-level model",
                task.name()
            )))
        }
    }

    /// Declared default architecture for `task` on images shaped `[H, W, C]`.
    pub fn default_spec(self, task: Task, image_shape: &[usize]) -> Result<ModelSpec> {
        self.check_task(task)?;
        let c = image_shape.get(2).copied().unwrap_or(1);
        let features = c * PERCENTILES.len();
        let out = task.output();
        Ok(match self {
            Architecture::Perceptron => ModelSpec::perceptron(features, out),
            Architecture::MlpEng => ModelSpec::mlp(&[features], &[32, 16], out),
            Architecture::MlpPix => ModelSpec::mlp(image_shape, &[16], out),
            Architecture::Cnn => ModelSpec::cnn(image_shape, out),
            Architecture::Unet => ModelSpec::unet(image_shape, 2, 8, out),
        })
    }
}

/// Percentile features for every image: `[N, 9 * C]`.
pub fn feature_matrix(images: &Tensor) -> Result<Tensor> {
    let n = images.batch_size();
    let per: Vec<Tensor> = (0..n)
        .map(|i| extract_percentiles(&images.unbatch(i)))
        .collect::<Result<_>>()?;
    Tensor::stack(&per)
}

/// Model inputs for `arch`.
pub fn inputs(split: &Split, arch: Architecture) -> Result<Tensor> {
    if arch.uses_features() {
        feature_matrix(&split.images)
    } else {
        Ok(split.images.clone())
    }
}

/// Targets for `task`: `[N, 1]` for image-level tasks, `[N, H, W, 1]` for maps.
pub fn targets(split: &Split, task: Task) -> Result<Tensor> {
    let n = split.len();
    match task {
        Task::Cls => Tensor::new(
            vec![n, 1],
            split.flash_counts().iter().map(|&c| f64::from(c >= 1.0)).collect(),
        ),
        Task::Reg => Tensor::new(vec![n, 1], split.flash_counts()),
        Task::SegCls => {
            let s = split.flashes.shape();
            Tensor::new(
                vec![s[0], s[1], s[2], 1],
                split.flashes.data().iter().map(|&f| f64::from(f >= 1.0)).collect(),
            )
        }
        Task::SegReg => split.flashes.clone().reshape(&[n, split.flashes.shape()[1], split.flashes.shape()[2], 1]),
    }
}

/// Indices kept for `task`: image-level regression trains only on images with lightning.
pub fn task_indices(split: &Split, task: Task) -> Vec<usize> {
    match task {
        Task::Reg => split
            .flash_counts()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c >= 1.0)
            .map(|(i, _)| i)
            .collect(),
        _ => (0..split.len()).collect(),
    }
}

/// Inputs and targets ready for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub x: Tensor,
    pub y: Tensor,
    /// Positions in the source split.
    pub indices: Vec<usize>,
}

pub fn prepare(split: &Split, arch: Architecture, task: Task) -> Result<Prepared> {
    arch.check_task(task)?;
    let indices = task_indices(split, task);
    if indices.is_empty() {
        return Err(Error::invalid(format!("no samples left for task {}", task.name())));
    }
    let kept = split.subset(&indices)?;
    Ok(Prepared {
        x: inputs(&kept, arch)?,
        y: targets(&kept, task)?,
        indices,
    })
}
