//! Versioned tensor container.
//!
//! Layout: 8-byte magic, u64 LE header length, a JSON header (format
//! version, kind, config echo, metadata, tensor names and shapes), then
//! each tensor's values as row-major f64 LE in header order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::io::ensure_parent;
use crate::model::{ModelConfig, ModelParams, ModelVariant};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SGCKPT\0\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: String,
    pub config: Value,
    pub meta: BTreeMap<String, Value>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: Value,
    pub meta: BTreeMap<String, Value>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, config: Value) -> Self {
        Self {
            kind: kind.into(),
            config,
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let mut rest = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n = e.rows * e.cols;
            if rest.len() < n * 8 {
                return Err(Error::Checkpoint(format!("truncated payload for {}", e.name)));
            }
            let data = rest[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            rest = &rest[n * 8..];
            tensors.push((e.name.clone(), Tensor::from_vec(e.rows, e.cols, data)?));
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        ensure_parent(path)?;
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: "run the command that produces this checkpoint first".into(),
            });
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Reads a metadata entry, failing when absent or mistyped.
    pub fn meta_as<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta {key}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }
}

pub const MODEL_KIND: &str = "model";

#[derive(Serialize, Deserialize)]
struct ModelEcho {
    variant: ModelVariant,
    model: ModelConfig,
}

pub fn model_checkpoint(params: &ModelParams) -> Result<Checkpoint> {
    let echo = ModelEcho {
        variant: params.variant,
        model: params.config,
    };
    let mut ck = Checkpoint::new(MODEL_KIND, serde_json::to_value(echo)?);
    ck.tensors = params
        .store
        .iter()
        .map(|(_, n, t)| (n.to_string(), t.clone()))
        .collect();
    Ok(ck)
}

pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<ModelParams> {
    if ck.kind != MODEL_KIND {
        return Err(Error::Checkpoint(format!(
            "expected a model checkpoint, found {:?}",
            ck.kind
        )));
    }
    let echo: ModelEcho = serde_json::from_value(ck.config.clone())?;
    let mut store = ParamStore::new();
    for (n, t) in &ck.tensors {
        store.insert(n.clone(), t.clone());
    }
    let params = ModelParams {
        config: echo.model,
        variant: echo.variant,
        store,
    };
    params.model()?;
    Ok(params)
}
