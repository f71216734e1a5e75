//! Binary tensor container used for model and training checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content                                   |
//! |-------|-------------------------------------------|
//! | 4     | magic `HNCK`                              |
//! | 4     | `u32` format version                      |
//! | 8     | `u64` length `L` of the JSON header       |
//! | L     | UTF-8 JSON header                         |
//! | ...   | `f32` payload                             |
//!
//! The header holds a free-form `meta` object (the model config lives under
//! `meta.model_config`) and a `tensors` array of
//! `{name, shape, offset, len}` entries, where `offset` and `len` count `f32`
//! elements into the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use hinet_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{HiNetParams, ModelConfig};
use crate::error::{HinetError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HNCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus JSON metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                len: t.numel() as u64,
            });
            offset += t.numel() as u64;
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors: entries,
        })
        .expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + offset as usize * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(HinetError::corrupt("header", format!("file is only {} bytes", bytes.len())));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(HinetError::format("magic", format!("expected HNCK, found {:?}", &bytes[..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(HinetError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_end = 16usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| HinetError::corrupt("header", "header length exceeds file size"))?;
        let header: Header = serde_json::from_slice(&bytes[16..header_end])
            .map_err(|e| HinetError::corrupt("header", e.to_string()))?;
        let payload = &bytes[header_end..];
        let mut tensors = BTreeMap::new();
        let mut expected_len = 0usize;
        for e in header.tensors {
            let start = e.offset as usize * 4;
            let end = start + e.len as usize * 4;
            if end > payload.len() {
                return Err(HinetError::corrupt(
                    &e.name,
                    format!("needs payload bytes {start}..{end}, file has {}", payload.len()),
                ));
            }
            if e.shape.iter().product::<usize>() != e.len as usize {
                return Err(HinetError::corrupt(&e.name, format!("shape {:?} does not match length {}", e.shape, e.len)));
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            expected_len = expected_len.max(end);
            tensors.insert(e.name.clone(), Tensor::new(&e.shape, data)?);
        }
        if expected_len != payload.len() {
            return Err(HinetError::corrupt(
                "payload",
                format!("{} trailing bytes", payload.len() - expected_len),
            ));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| HinetError::io(parent, e))?;
        }
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(|e| HinetError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| HinetError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| HinetError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .ok_or_else(|| HinetError::corrupt(name, "tensor missing from checkpoint"))
    }

    /// Removes and returns every tensor whose name starts with `prefix`,
    /// with the prefix stripped.
    pub fn take_prefixed(&mut self, prefix: &str) -> BTreeMap<String, Tensor> {
        let keys: Vec<String> = self
            .tensors
            .keys()
            .filter(|k| k.starts_with(prefix))
            .cloned()
            .collect();
        keys.into_iter()
            .map(|k| {
                let t = self.tensors.remove(&k).unwrap();
                (k[prefix.len()..].to_string(), t)
            })
            .collect()
    }

    pub fn meta_field<T: serde::de::DeserializeOwned>(&self, field: &str) -> Result<T> {
        let v = self
            .meta
            .get(field)
            .ok_or_else(|| HinetError::corrupt(field, "missing from checkpoint metadata"))?;
        serde_json::from_value(v.clone()).map_err(|e| HinetError::corrupt(field, e.to_string()))
    }
}

pub(crate) const PARAM_PREFIX: &str = "param.";
pub(crate) const BUFFER_PREFIX: &str = "buffer.";

impl HiNetParams {
    pub(crate) fn write_into(&self, c: &mut Container) {
        for (k, t) in &self.weights {
            c.tensors.insert(format!("{PARAM_PREFIX}{k}"), t.clone());
        }
        for (k, t) in &self.buffers {
            c.tensors.insert(format!("{BUFFER_PREFIX}{k}"), t.clone());
        }
        if let serde_json::Value::Object(map) = &mut c.meta {
            map.insert(
                "model_config".into(),
                serde_json::to_value(&self.config).expect("config serializes"),
            );
        }
    }

    pub(crate) fn read_from(c: &mut Container) -> Result<Self> {
        let config: ModelConfig = c.meta_field("model_config")?;
        let weights = c.take_prefixed(PARAM_PREFIX);
        let buffers = c.take_prefixed(BUFFER_PREFIX);
        let params = Self {
            config,
            weights,
            buffers,
        };
        params.check_inventory()?;
        Ok(params)
    }

    /// Writes a model-only checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container {
            meta: serde_json::json!({ "kind": "model" }),
            tensors: BTreeMap::new(),
        };
        self.write_into(&mut c);
        c.save(path)
    }

    /// Loads the parameters from a model or training checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Container::load(path)?;
        Self::read_from(&mut c)
    }
}
