//! Checkpoints: `params.bin` holds every tensor as little-endian f64 in
//! storage order; `manifest.json` names them and records the model config.

use std::path::Path;

use serde::{Deserialize, Serialize};
use uscale_core::model::{Model, TransformerConfig};
use uscale_core::parametrization::{ParamTag, SchemeKind};
use uscale_core::Tensor;

use crate::error::{Error, Result};
use crate::tokens::{read_file, write_file};

pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub tag: ParamTag,
    /// Offset in f64 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub scheme: SchemeKind,
    pub model: TransformerConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn save(dir: &Path, model: &Model) -> Result<()> {
    let mut bytes = Vec::with_capacity(model.param_count() * 8);
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut offset = 0;
    for (spec, p) in model.specs.iter().zip(&model.params) {
        for v in p.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: spec.name.clone(),
            shape: p.shape().to_vec(),
            tag: spec.tag,
            offset,
            len: p.len(),
        });
        offset += p.len();
    }
    let manifest = Manifest {
        format: String::from("f64-le"),
        scheme: model.cfg.scheme.kind,
        model: model.cfg.clone(),
        tensors,
    };
    write_file(&dir.join(PARAMS_FILE), &bytes)?;
    write_file(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

pub fn load(dir: &Path) -> Result<Model> {
    let mpath = dir.join(MANIFEST_FILE);
    let manifest: Manifest = serde_json::from_slice(&read_file(&mpath)?)?;
    let ppath = dir.join(PARAMS_FILE);
    let bytes = read_file(&ppath)?;
    let bad = |offset: usize, reason: String| Error::Format {
        path: ppath.clone(),
        offset: offset as u64,
        reason,
    };
    if manifest.format != "f64-le" {
        return Err(Error::Format {
            path: mpath,
            offset: 0,
            reason: format!("unknown tensor format {:?}", manifest.format),
        });
    }
    let total: usize = manifest.tensors.iter().map(|t| t.len).sum();
    if bytes.len() != total * 8 {
        return Err(bad(bytes.len(), format!("expected {} bytes for {total} values", total * 8)));
    }
    let specs = manifest.model.param_specs();
    if specs.len() != manifest.tensors.len() {
        return Err(bad(0, format!("config implies {} tensors, manifest lists {}", specs.len(), manifest.tensors.len())));
    }
    let mut params = Vec::with_capacity(specs.len());
    for (spec, t) in specs.iter().zip(&manifest.tensors) {
        if spec.name != t.name || spec.shape != t.shape || t.shape.iter().product::<usize>() != t.len {
            return Err(bad(t.offset * 8, format!("tensor {} does not match the model config", t.name)));
        }
        let data = bytes[t.offset * 8..(t.offset + t.len) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push(Tensor::new(&t.shape, data)?);
    }
    Ok(Model::from_params(manifest.model, params)?)
}
