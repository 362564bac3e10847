//! On-disk container: a JSON manifest plus raw little-endian arrays.
//!
//! Two layouts share the same [`ArrayDescriptor`] schema:
//!
//! - a *directory* with `manifest.json` and one `<name>.bin` per array
//!   (datasets), each array starting at byte offset 0 of its file;
//! - a *single file* (models, checkpoints): an 8-byte magic, `u32` format
//!   version, `u64` manifest length, `u32` CRC-32 of the manifest, the
//!   manifest JSON, then the array payloads back to back. Offsets are
//!   relative to the first payload byte.
//!
//! Every array carries a CRC-32 of its bytes, validated on load.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"STORMNET";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "f64le")]
    F64Le,
    #[serde(rename = "u16le")]
    U16Le,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F64Le => 8,
            DType::U16Le => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayDescriptor {
    pub name: String,
    /// Set for directory layouts only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub byte_offset: u64,
    pub byte_len: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U16(Vec<u16>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F64(_) => DType::F64Le,
            ArrayData::U16(_) => DType::U16Le,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::U16(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::U16(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn from_bytes(dtype: DType, bytes: &[u8]) -> Result<Self> {
        if bytes.len() % dtype.width() != 0 {
            return Err(Error::Format(format!(
                "{} bytes is not a whole number of {dtype:?} elements",
                bytes.len()
            )));
        }
        Ok(match dtype {
            DType::F64Le => ArrayData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U16Le => ArrayData::U16(
                bytes
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        })
    }

    pub fn into_f64(self) -> Vec<f64> {
        match self {
            ArrayData::F64(v) => v,
            ArrayData::U16(v) => v.into_iter().map(f64::from).collect(),
        }
    }
}

/// An array together with its name and shape, ready to be written.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f64(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: ArrayData::F64(t.data().to_vec()),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.clone().into_f64())
    }
}

pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

fn verify(desc: &ArrayDescriptor, bytes: &[u8]) -> Result<NamedArray> {
    if bytes.len() as u64 != desc.byte_len {
        return Err(Error::Checksum(format!(
            "array `{}`: expected {} bytes, found {}",
            desc.name,
            desc.byte_len,
            bytes.len()
        )));
    }
    let crc = crc32(bytes);
    if crc != desc.crc32 {
        return Err(Error::Checksum(format!(
            "array `{}`: crc {crc:08x} != recorded {:08x}",
            desc.name, desc.crc32
        )));
    }
    let data = ArrayData::from_bytes(desc.dtype, bytes)?;
    if data.len() != desc.shape.iter().product::<usize>() {
        return Err(Error::Format(format!(
            "array `{}`: {} elements do not fill shape {:?}",
            desc.name,
            data.len(),
            desc.shape
        )));
    }
    Ok(NamedArray {
        name: desc.name.clone(),
        shape: desc.shape.clone(),
        data,
    })
}

/// Single-file container contents: a manifest plus its arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    /// Caller metadata stored under `meta` in the manifest.
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

#[derive(Serialize, Deserialize)]
struct BundleManifest {
    schema_version: u32,
    meta: serde_json::Value,
    arrays: Vec<ArrayDescriptor>,
}

impl Bundle {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut descriptors = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            let bytes = a.data.to_bytes();
            descriptors.push(ArrayDescriptor {
                name: a.name.clone(),
                file: None,
                shape: a.shape.clone(),
                dtype: a.data.dtype(),
                byte_offset: payload.len() as u64,
                byte_len: bytes.len() as u64,
                crc32: crc32(&bytes),
            });
            payload.extend_from_slice(&bytes);
        }
        let manifest = serde_json::to_vec_pretty(&BundleManifest {
            schema_version: FORMAT_VERSION,
            meta: self.meta.clone(),
            arrays: descriptors,
        })?;
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&crc32(&manifest).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Checksum(format!("container truncated to {} bytes", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Format("not a stormnet container (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "container version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let mcrc = u32::from_le_bytes(bytes[20..24].try_into().unwrap());
        let manifest_end = HEADER_LEN
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checksum("manifest extends past end of container".into()))?;
        let manifest_bytes = &bytes[HEADER_LEN..manifest_end];
        if crc32(manifest_bytes) != mcrc {
            return Err(Error::Checksum("manifest crc mismatch".into()));
        }
        let manifest: BundleManifest = serde_json::from_slice(manifest_bytes)?;
        if manifest.schema_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "manifest schema {}, expected {FORMAT_VERSION}",
                manifest.schema_version
            )));
        }
        let payload = &bytes[manifest_end..];
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for d in &manifest.arrays {
            let start = d.byte_offset as usize;
            let end = start.saturating_add(d.byte_len as usize);
            if end > payload.len() {
                return Err(Error::Checksum(format!(
                    "array `{}` extends past end of container (truncated?)",
                    d.name
                )));
            }
            arrays.push(verify(d, &payload[start..end])?);
        }
        Ok(Bundle {
            meta: manifest.meta,
            arrays,
        })
    }

    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Format(format!("container has no array `{name}`")))
    }
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes each array to `<dir>/<name>.bin` and returns its descriptor.
pub fn write_array_file(dir: &Path, array: &NamedArray) -> Result<ArrayDescriptor> {
    let bytes = array.data.to_bytes();
    let file = format!("{}.bin", array.name);
    write_atomic(&dir.join(&file), &bytes)?;
    Ok(ArrayDescriptor {
        name: array.name.clone(),
        file: Some(file),
        shape: array.shape.clone(),
        dtype: array.data.dtype(),
        byte_offset: 0,
        byte_len: bytes.len() as u64,
        crc32: crc32(&bytes),
    })
}

/// Reads and validates one array of a directory layout.
pub fn read_array_file(dir: &Path, desc: &ArrayDescriptor) -> Result<NamedArray> {
    let file = desc
        .file
        .as_ref()
        .ok_or_else(|| Error::Format(format!("array `{}` has no file", desc.name)))?;
    let bytes = fs::read(dir.join(file))?;
    let start = desc.byte_offset as usize;
    let end = start.saturating_add(desc.byte_len as usize);
    if end > bytes.len() {
        return Err(Error::Checksum(format!("{file} is shorter than recorded")));
    }
    verify(desc, &bytes[start..end])
}
