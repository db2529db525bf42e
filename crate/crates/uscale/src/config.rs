//! The run configuration: one JSON document, with `--set KEY=VALUE`
//! overrides applied to leaf keys after parsing and before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use uscale_core::model::TransformerConfig;
use uscale_core::sweep::{default_grids, SweepSpec};
use uscale_core::train::{TokenStream, TrainConfig};

use crate::corpus::synthetic_corpus;
use crate::error::{invalid, Error, Result};
use crate::tokens::{ingest, IngestMode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generated text, see [`synthetic_corpus`].
    #[default]
    Synthetic,
    /// A text file, one token per byte.
    Text,
    /// A token file.
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub path: Option<PathBuf>,
    pub synthetic_bytes: usize,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            path: None,
            synthetic_bytes: 4 << 20,
            synthetic_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match (self.source, &self.path) {
            (DataSource::Synthetic, _) if self.synthetic_bytes == 0 => {
                Err(Error::Invalid(String::from("data.synthetic_bytes must be positive")))
            }
            (DataSource::Text | DataSource::Binary, None) => {
                Err(Error::Invalid(String::from("data.path is required for text and binary sources")))
            }
            _ => Ok(()),
        }
    }

    pub fn load(&self) -> Result<TokenStream> {
        match self.source {
            DataSource::Synthetic => Ok(TokenStream::from_bytes(
                &synthetic_corpus(self.synthetic_bytes, self.synthetic_seed),
                format!("synthetic:{}:{}", self.synthetic_bytes, self.synthetic_seed),
            )),
            DataSource::Text => ingest(self.path.as_deref().expect("validated"), IngestMode::Text),
            DataSource::Binary => ingest(self.path.as_deref().expect("validated"), IngestMode::Binary),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrTransferConfig {
    pub widths: Vec<usize>,
    /// The LR grid is `2^lo, 2^(lo+step), …, 2^hi`.
    pub lr_log2_lo: f64,
    pub lr_log2_hi: f64,
    pub lr_log2_step: f64,
    pub replicas: usize,
}

impl Default for LrTransferConfig {
    fn default() -> Self {
        Self {
            widths: vec![64, 128, 256],
            lr_log2_lo: -1.0,
            lr_log2_hi: 5.0,
            lr_log2_step: 1.0,
            replicas: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: TransformerConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Empty grids mean the scheme's defaults.
    pub sweep: SweepSpec,
    pub lr_transfer: LrTransferConfig,
}

impl RunConfig {
    /// Parses `file` (if any) over the defaults, then applies `overrides`.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let user: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
            merge(&mut tree, user);
        }
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        serde_path_to_error::deserialize(tree).map_err(|e| {
            let path = e.path().to_string();
            Error::Invalid(format!("{path}: {}", e.into_inner()))
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        self.data.validate()
    }

    /// The sweep spec with empty grids replaced by the scheme defaults.
    pub fn sweep_spec(&self) -> SweepSpec {
        let mut s = self.sweep.clone();
        if s.grids.is_empty() {
            s.grids = default_grids(self.model.scheme.kind);
        }
        s
    }
}

/// Recursively overlays `src` on `dst`. Objects merge key by key; anything
/// else replaces. Keys missing from `dst` are kept so that deserialization
/// can reject them by name.
fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

/// `a.b.c=VALUE`; VALUE is parsed as JSON, falling back to a string.
pub fn apply_override(tree: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Invalid(format!("--set expects KEY=VALUE, got {assignment:?}")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Invalid(format!("--set has an empty key in {assignment:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = tree;
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(Error::Invalid(format!("--set {key}: `{}` is not an object", parts[..i].join("."))));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
    }
    unreachable!("key has at least one part")
}
