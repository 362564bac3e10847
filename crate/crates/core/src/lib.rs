//! Neural networks from scratch for storm imagery.
//!
//! The crate covers the full loop of the lightning tasks it was built for:
//!
//! - [`tensor`]: dense `f64` arrays and the seeded generator.
//! - [`layers`]: dense, convolution, pooling, upsampling, concatenation,
//!   activations, dropout and batch normalization, each with an exact
//!   backward pass.
//! - [`loss`], [`optim`], [`gradcheck`]: objectives, SGD/Adam/RMSprop and
//!   finite-difference verification.
//! - [`models`]: perceptron, MLP, CNN and U-Net builders plus the model file.
//! - [`data`]: the synthetic storm generator, features, patches,
//!   augmentation and the on-disk container.
//! - [`train`]: mini-batch training, early stopping, checkpoints and random
//!   hyperparameter search.
//! - [`metrics`]: contingency scores, ROC/AUC, threshold sweeps and
//!   regression scores.
//! - [`xai`]: permutation importance and additive gradient attributions.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod xai;

pub use error::{Error, Result};
pub use layers::{Activation, LayerKind, LayerNode, Mode, PoolMode};
pub use loss::Loss;
pub use models::{Model, ModelKind, ModelSpec, OutputKind};
pub use optim::{Optimizer, OptimizerKind};
pub use tensor::{Rng, Tensor};
