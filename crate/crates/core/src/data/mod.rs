//! Synthetic storm data, sample transforms and the on-disk container format.

pub mod container;
pub mod dataset;
pub mod generate;
pub mod sample;
pub mod tasks;

pub use generate::{generate, Dataset, GenerateConfig, Split, SplitKind};
pub use sample::{augment, coarsen, extract_percentiles, patch, stitch, Augmentation, Patch, StormSample};
pub use dataset::{write_dataset, DatasetDir, DatasetManifest};
pub use tasks::{prepare, Architecture, Prepared, Task};
