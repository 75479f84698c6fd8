//! Versioned single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 8 bytes   magic "VOLCKPT\0"
//! u32       container version
//! u64       header length in bytes
//! ...       header: UTF-8 JSON {"meta": {...}, "dtype": "<f4", "tensors": [{name, shape, offset, len}]}
//! ...       payload: tensors back to back, element offsets relative to payload start
//! ```
//!
//! Tensors are stored in name order, so save -> load -> save is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::{EncoderSpec, ProjectionHeadSpec, SegmentationHeadSpec};
use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"VOLCKPT\0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

/// How the encoder weights were obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Pretraining {
    VolumeLabels { num_partitions: usize },
    Simclr,
    RandomInit,
}

impl Pretraining {
    /// Row label used in result tables.
    pub fn label(&self) -> String {
        match self {
            Pretraining::VolumeLabels { num_partitions } => format!("Volume Labels (N={num_partitions})"),
            Pretraining::Simclr => "SimCLR".to_string(),
            Pretraining::RandomInit => "Random init".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub epoch: usize,
    pub seed: u64,
    pub pretraining: Pretraining,
    pub encoder: EncoderSpec,
    pub projection: Option<ProjectionHeadSpec>,
    pub head: Option<SegmentationHeadSpec>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

/// Named parameter arrays plus training metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint<T> {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> ModelCheckpoint<T> {
    pub fn from_model<M: Parameterized<T> + ?Sized>(meta: CheckpointMeta, model: &M) -> Self {
        let tensors = model.named_tensors("").into_iter().collect();
        Self { meta, tensors }
    }

    /// Tensors whose names start with `prefix.`, prefix kept.
    pub fn with_prefix(&self, prefix: &str) -> BTreeMap<String, ArrayD<T>> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter(|(k, _)| k.starts_with(&p))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, arr) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: arr.shape().to_vec(),
                offset,
                len: arr.len() as u64,
            });
            offset += arr.len() as u64;
        }
        let header = Header {
            meta: self.meta.clone(),
            dtype: T::DTYPE.to_string(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + offset as usize * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for arr in self.tensors.values() {
            for &v in arr.iter() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported container version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        let width = match header.dtype.as_str() {
            "<f4" => 4,
            "<f8" => 8,
            other => return Err(bad(&format!("unsupported dtype {other}"))),
        };
        let payload = &bytes[20 + hlen..];
        let mut tensors = BTreeMap::new();
        for e in header.tensors {
            let start = e.offset as usize * width;
            let end = start + e.len as usize * width;
            let raw = payload.get(start..end).ok_or_else(|| bad(&format!("tensor {} out of bounds", e.name)))?;
            let data: Vec<T> = raw
                .chunks_exact(width)
                .map(|c| {
                    if width == 4 {
                        T::lit(f32::read_le(c) as f64)
                    } else {
                        T::lit(f64::read_le(c))
                    }
                })
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), data)
                .map_err(|err| bad(&format!("tensor {}: {err}", e.name)))?;
            tensors.insert(e.name, arr);
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
