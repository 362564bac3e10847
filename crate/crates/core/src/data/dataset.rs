//! Dataset directories: `manifest.json` plus `<split>_images.bin` and
//! `<split>_flashes.bin` for each split.
//!
//! Externally prepared data can be dropped in by writing the same layout:
//! images as `[N, H, W, C]` little-endian `f64` scaled to `[0, 1]`,
//! flashes as `[N, H, W]` little-endian `u16`, and a manifest listing
//! each array with its CRC-32.

use std::cell::RefCell;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::container::{read_array_file, write_array_file, write_atomic, ArrayData, ArrayDescriptor, NamedArray};
use super::generate::{Dataset, GenerateConfig, Split, SplitKind, GENERATOR_VERSION};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: SplitKind) -> usize {
        match split {
            SplitKind::Train => self.train,
            SplitKind::Val => self.val,
            SplitKind::Test => self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    /// Generator provenance; zero for externally converted data.
    #[serde(default)]
    pub generator_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub counts: SplitCounts,
    #[serde(default)]
    pub pixel_pos_rate_target: f64,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub pixel_pos_rate: f64,
    pub arrays: Vec<ArrayDescriptor>,
}

fn images_name(split: SplitKind) -> String {
    format!("{}_images", split.name())
}

fn flashes_name(split: SplitKind) -> String {
    format!("{}_flashes", split.name())
}

fn flashes_to_u16(t: &Tensor) -> Result<Vec<u16>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v <= u16::MAX as f64 && v.fract() == 0.0 {
                Ok(v as u16)
            } else {
                Err(Error::invalid(format!("flash count {v} is not a u16 integer")))
            }
        })
        .collect()
}

/// Writes `ds` as a dataset directory; returns the manifest written.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut arrays = Vec::new();
    for k in SplitKind::ALL {
        let split = ds.split(k);
        arrays.push(write_array_file(dir, &NamedArray::f64(images_name(k), &split.images))?);
        let flashes = NamedArray {
            name: flashes_name(k),
            shape: split.flashes.shape().to_vec(),
            data: ArrayData::U16(flashes_to_u16(&split.flashes)?),
        };
        arrays.push(write_array_file(dir, &flashes)?);
    }
    let manifest = DatasetManifest {
        schema_version: DATASET_SCHEMA,
        generator_version: GENERATOR_VERSION,
        seed: ds.config.seed,
        counts: SplitCounts {
            train: ds.train.len(),
            val: ds.val.len(),
            test: ds.test.len(),
        },
        pixel_pos_rate_target: ds.config.pixel_pos_rate_target,
        alpha: ds.alpha,
        pixel_pos_rate: ds.positive_pixel_rate(),
        arrays,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&dir.join(MANIFEST_FILE), &json)?;
    Ok(manifest)
}

/// Lazily loads splits of a dataset directory and records which arrays were read.
#[derive(Debug)]
pub struct DatasetDir {
    root: PathBuf,
    manifest: DatasetManifest,
    accessed: RefCell<Vec<String>>,
}

impl DatasetDir {
    pub fn open(root: &Path) -> Result<Self> {
        let bytes = fs::read(root.join(MANIFEST_FILE))?;
        let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
        if manifest.schema_version != DATASET_SCHEMA {
            return Err(Error::Format(format!(
                "dataset schema {}, expected {DATASET_SCHEMA}",
                manifest.schema_version
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            accessed: RefCell::new(Vec::new()),
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    /// Names of every array read so far, in order.
    pub fn accessed(&self) -> Vec<String> {
        self.accessed.borrow().clone()
    }

    fn read(&self, name: &str) -> Result<NamedArray> {
        let desc = self
            .manifest
            .arrays
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::Format(format!("dataset has no array `{name}`")))?;
        self.accessed.borrow_mut().push(name.to_string());
        read_array_file(&self.root, desc)
    }

    pub fn load_split(&self, split: SplitKind) -> Result<Split> {
        let images = self.read(&images_name(split))?.to_tensor()?;
        let flashes = self.read(&flashes_name(split))?.to_tensor()?;
        let s = Split::new(images, flashes)?;
        if s.len() != self.manifest.counts.get(split) {
            return Err(Error::Format(format!(
                "{} split holds {} samples, manifest says {}",
                split.name(),
                s.len(),
                self.manifest.counts.get(split)
            )));
        }
        Ok(s)
    }

    /// Loads every split, validating all checksums.
    pub fn load_all(&self) -> Result<Dataset> {
        let m = &self.manifest;
        Ok(Dataset {
            config: GenerateConfig {
                seed: m.seed,
                n_train: m.counts.train,
                n_val: m.counts.val,
                n_test: m.counts.test,
                pixel_pos_rate_target: m.pixel_pos_rate_target,
            },
            alpha: m.alpha,
            train: self.load_split(SplitKind::Train)?,
            val: self.load_split(SplitKind::Val)?,
            test: self.load_split(SplitKind::Test)?,
        })
    }
}
