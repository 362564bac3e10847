use std::path::Path;

use serde_json::json;

use super::{Model, ModelSpec};
use crate::data::container::{write_atomic, Bundle, NamedArray};
use crate::error::{Error, Result};

/// `meta.kind` of a model container.
pub const MODEL_KIND: &str = "model";

fn param_name(node: usize, j: usize) -> String {
    format!("node{node:03}.param{j}")
}

fn buffer_name(node: usize, j: usize) -> String {
    format!("node{node:03}.buffer{j}")
}

pub(crate) fn model_arrays(model: &Model) -> Vec<NamedArray> {
    let mut arrays = Vec::new();
    for (i, n) in model.nodes.iter().enumerate() {
        for (j, p) in n.layer.params.iter().enumerate() {
            arrays.push(NamedArray::f64(param_name(i, j), p));
        }
        for (j, b) in n.layer.buffers.iter().enumerate() {
            arrays.push(NamedArray::f64(buffer_name(i, j), b));
        }
    }
    arrays
}

/// Rebuilds the graph from `spec` and loads every parameter and buffer from `bundle`.
pub(crate) fn load_arrays(spec: &ModelSpec, bundle: &Bundle) -> Result<Model> {
    let mut model = Model::build(spec)?;
    for (i, n) in model.nodes.iter_mut().enumerate() {
        let slots = n
            .layer
            .params
            .iter_mut()
            .enumerate()
            .map(|(j, t)| (param_name(i, j), t))
            .chain(n.layer.buffers.iter_mut().enumerate().map(|(j, t)| (buffer_name(i, j), t)));
        for (name, slot) in slots {
            let stored = bundle.array(&name)?.to_tensor()?;
            if stored.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "array `{name}` has shape {:?}, model expects {:?}",
                    stored.shape(),
                    slot.shape()
                )));
            }
            *slot = stored;
        }
    }
    Ok(model)
}

pub fn model_to_bytes(model: &Model) -> Result<Vec<u8>> {
    Bundle {
        meta: json!({ "kind": MODEL_KIND, "spec": model.spec }),
        arrays: model_arrays(model),
    }
    .to_bytes()
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let bundle = Bundle::from_bytes(bytes)?;
    if bundle.meta.get("kind").and_then(|k| k.as_str()) != Some(MODEL_KIND) {
        return Err(Error::Format("container does not hold a model".into()));
    }
    let spec: ModelSpec = serde_json::from_value(bundle.meta["spec"].clone())?;
    load_arrays(&spec, &bundle)
}

pub fn write_model(path: &Path, model: &Model) -> Result<()> {
    write_atomic(path, &model_to_bytes(model)?)
}

pub fn read_model(path: &Path) -> Result<Model> {
    model_from_bytes(&std::fs::read(path)?)
}
