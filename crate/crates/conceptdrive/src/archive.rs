// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tensor archives: an 8-byte little-endian header length, a UTF-8 JSON
//! header mapping tensor names to `{"dtype": "f32", "shape": [...],
//! "offset": bytes}`, then one little-endian `f32` payload. Offsets are
//! relative to the payload start and strictly ascending without overlap.
//! Any other top-level header key (one whose value is not an object with a
//! `"dtype"` field) is metadata, e.g. `"layer": 2`.

use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{format_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(format_err!("tensor '{name}': shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Self { name, shape, data })
    }
}

/// Tensors in file order plus header metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub tensors: Vec<Tensor>,
    pub metadata: Map<String, Value>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tensor: Tensor) -> Result<()> {
        if self.metadata.contains_key(&tensor.name) || self.get(&tensor.name).is_some() {
            return Err(format_err!("tensor name '{}' is already used", tensor.name));
        }
        self.tensors.push(tensor);
        Ok(())
    }

    /// Adds a metadata key. Panics if a tensor already uses the name.
    pub fn with_meta(mut self, key: &str, value: impl Into<Value>) -> Self {
        assert!(self.get(key).is_none(), "metadata key '{key}' collides with a tensor");
        self.metadata.insert(key.to_string(), value.into());
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| format_err!("archive has no tensor '{name}'"))
    }

    pub fn meta(&self, key: &str) -> Result<&Value> {
        self.metadata.get(key).ok_or_else(|| format_err!("archive metadata lacks '{key}'"))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta(key)?.as_u64().map(|v| v as usize).ok_or_else(|| format_err!("metadata '{key}' is not an unsigned integer"))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        self.meta(key)?.as_f64().ok_or_else(|| format_err!("metadata '{key}' is not a number"))
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta(key)?.as_str().ok_or_else(|| format_err!("metadata '{key}' is not a string"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Map::new();
        let mut offset = 0usize;
        for t in &self.tensors {
            let mut entry = Map::new();
            entry.insert("dtype".into(), "f32".into());
            entry.insert("shape".into(), t.shape.clone().into());
            entry.insert("offset".into(), offset.into());
            header.insert(t.name.clone(), Value::Object(entry));
            offset += t.data.len() * 4;
        }
        for (k, v) in &self.metadata {
            header.insert(k.clone(), v.clone());
        }
        let header = serde_json::to_vec(&Value::Object(header)).expect("header serializes");
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(format_err!("archive is {} bytes, too short for its header length", bytes.len()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let payload_start = 8usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| format_err!("header length {header_len} exceeds the file"))?;
        let header: Value = serde_json::from_slice(&bytes[8..payload_start])
            .map_err(|e| format_err!("malformed archive header: {e}"))?;
        let Value::Object(header) = header else {
            return Err(format_err!("archive header is not a JSON object"));
        };
        let payload = &bytes[payload_start..];
        let mut metadata = Map::new();
        let mut entries = Vec::new();
        for (name, entry) in header {
            let obj = match &entry {
                Value::Object(obj) if obj.contains_key("dtype") => obj,
                _ => {
                    metadata.insert(name, entry);
                    continue;
                }
            };
            let bad = |what: &str| format_err!("tensor '{name}': {what}");
            match obj.get("dtype").and_then(Value::as_str) {
                Some("f32") => {}
                Some(other) => return Err(bad(&format!("unsupported dtype '{other}'"))),
                None => return Err(bad("missing dtype")),
            }
            let shape: Vec<usize> = obj
                .get("shape")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("missing shape"))?
                .iter()
                .map(|d| d.as_u64().map(|d| d as usize).ok_or_else(|| bad("shape entries must be unsigned integers")))
                .collect::<Result<_>>()?;
            let offset = obj.get("offset").and_then(Value::as_u64).ok_or_else(|| bad("missing offset"))? as usize;
            entries.push((name, shape, offset));
        }
        entries.sort_by_key(|e| e.2);
        let mut tensors = Vec::with_capacity(entries.len());
        let mut cursor = 0usize;
        for (name, shape, offset) in entries {
            if offset < cursor {
                return Err(format_err!("tensor '{name}' at offset {offset} overlaps the previous tensor"));
            }
            if offset % 4 != 0 {
                return Err(format_err!("tensor '{name}' offset {offset} is not 4-byte aligned"));
            }
            let count: usize = shape.iter().product();
            let end = offset + count * 4;
            if end > payload.len() {
                return Err(format_err!(
                    "tensor '{name}' declares {count} floats at offset {offset} but the payload holds {} floats",
                    payload.len() / 4
                ));
            }
            let data: Vec<f32> =
                payload[offset..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(format_err!("tensor '{name}' holds a non-finite value at index {i}"));
            }
            tensors.push(Tensor { name, shape, data });
            cursor = end;
        }
        Ok(Self { tensors, metadata })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
