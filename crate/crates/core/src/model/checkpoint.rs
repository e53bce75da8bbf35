//! Single-file checkpoints.
//!
//! Layout: a line `ASFCKPT1 <n>\n`, then `n` bytes of JSON header (config,
//! entries, payload size and SHA-256), then the payload of little-endian f32
//! values. Entries of the moving-average copy carry the `ema.` prefix.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::atomic::write_atomic;
use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

use super::asf::{Asf, Model};
use super::config::ModelConfig;

pub const MAGIC: &str = "ASFCKPT1";
pub const EMA_PREFIX: &str = "ema.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Trainable,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    pub kind: EntryKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: ModelConfig,
    pub epoch: usize,
    pub entries: Vec<Entry>,
    pub payload_bytes: usize,
    pub sha256: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    tensors: Vec<Tensor<f32>>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Serializes `params` (and `ema` under the `ema.` prefix) with their config.
pub fn encode<T: Scalar>(cfg: &ModelConfig, params: &ParamStore<T>, ema: Option<&ParamStore<T>>, epoch: usize) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut payload = Vec::new();
    let stores = std::iter::once(("", params)).chain(ema.map(|e| (EMA_PREFIX, e)));
    for (prefix, store) in stores {
        if !store.is_materialized() {
            return Err(fmt_err("cannot save a model without parameter values"));
        }
        for (spec, value) in store.specs().iter().zip(store.values()) {
            entries.push(Entry {
                name: format!("{prefix}{}", spec.name),
                dtype: "f32".into(),
                shape: spec.shape.clone(),
                offset: payload.len(),
                kind: match spec.kind {
                    ParamKind::Trainable => EntryKind::Trainable,
                    ParamKind::Buffer => EntryKind::Buffer,
                },
            });
            for v in value.data() {
                payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
    }
    let header = Header {
        config: cfg.clone(),
        epoch,
        entries,
        payload_bytes: payload.len(),
        sha256: hex(&Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header).map_err(|e| fmt_err(e.to_string()))?;
    let mut out = format!("{MAGIC} {}\n", json.len()).into_bytes();
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, cfg: &ModelConfig, params: &ParamStore<T>, ema: Option<&ParamStore<T>>, epoch: usize) -> Result<()> {
    write_atomic(path, &encode(cfg, params, ema, epoch)?)
}

impl Checkpoint {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| fmt_err("missing checkpoint magic line"))?;
        let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| fmt_err("bad checkpoint magic line"))?;
        let len: usize = line
            .strip_prefix(MAGIC)
            .and_then(|rest| rest.trim().parse().ok())
            .ok_or_else(|| fmt_err(format!("not a checkpoint (magic line `{line}`)")))?;
        let start = nl + 1;
        let json = bytes.get(start..start + len).ok_or_else(|| fmt_err("truncated checkpoint header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| fmt_err(format!("checkpoint header: {e}")))?;
        let payload = &bytes[start + len..];
        if payload.len() != header.payload_bytes {
            return Err(fmt_err(format!("payload has {} bytes, header says {}", payload.len(), header.payload_bytes)));
        }
        if hex(&Sha256::digest(payload)) != header.sha256 {
            return Err(fmt_err("checkpoint checksum mismatch"));
        }
        let mut tensors = Vec::with_capacity(header.entries.len());
        for e in &header.entries {
            if e.dtype != "f32" {
                return Err(fmt_err(format!("unsupported dtype {} for {}", e.dtype, e.name)));
            }
            let n: usize = e.shape.iter().product();
            let raw = payload.get(e.offset..e.offset + 4 * n).ok_or_else(|| fmt_err(format!("entry {} out of range", e.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push(Tensor::new(&e.shape, data)?);
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.header.config
    }

    pub fn has_ema(&self) -> bool {
        self.header.entries.iter().any(|e| e.name.starts_with(EMA_PREFIX))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.header.entries.iter().position(|e| e.name == name).map(|i| &self.tensors[i])
    }

    /// Values for every entry of `store`, read under `prefix`.
    pub fn values_for<T: Scalar>(&self, store: &ParamStore<T>, prefix: &str) -> Result<Vec<Tensor<T>>> {
        store
            .specs()
            .iter()
            .map(|s| {
                let name = format!("{prefix}{}", s.name);
                let t = self.tensor(&name).ok_or_else(|| fmt_err(format!("checkpoint lacks {name}")))?;
                if t.shape() != s.shape.as_slice() {
                    return Err(fmt_err(format!("{name}: checkpoint shape {:?}, model {:?}", t.shape(), s.shape)));
                }
                Ok(t.cast())
            })
            .collect()
    }

    /// Rebuilds the model; `expected`, when given, must match the stored config.
    pub fn model<T: Scalar>(&self, expected: Option<&ModelConfig>, use_ema: bool) -> Result<Model<T>> {
        if let Some(cfg) = expected {
            if cfg != self.config() {
                return Err(Error::Config(format!(
                    "checkpoint holds model {}, requested {}",
                    self.config().tag(),
                    cfg.tag()
                )));
            }
        }
        let mut params = ParamStore::new();
        let arch = Asf::build(self.config(), &mut params)?;
        if use_ema && !self.has_ema() {
            return Err(fmt_err("checkpoint has no moving-average weights"));
        }
        let values = self.values_for(&params, if use_ema { EMA_PREFIX } else { "" })?;
        params.load_values(values)?;
        Ok(Model { arch, params })
    }
}
