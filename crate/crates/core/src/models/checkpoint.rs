//! JSON checkpoint files.
//!
//! Layout (key order fixed): `format_version`, `seed`, `config_hash`,
//! `architecture`, `tensors`. Each tensor is `{"shape": [..], "data": [..]}`
//! with floats written as shortest round-trip decimals, so a save/load cycle
//! is bitwise exact.

use std::path::Path;

use indexmap::IndexMap;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use super::{Architecture, Head, ParameterSet};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u64 = 1;

/// Extractor parameters plus named heads, with provenance metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub config_hash: String,
    pub params: ParameterSet<f64>,
    /// Stored as `heads.{name}.weight` / `heads.{name}.bias`.
    pub heads: IndexMap<String, Head<f64>>,
}

fn field_err(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Checkpoint { field: field.into(), message: message.into() }
}

fn tensor_json(name: &str, t: &Tensor<f64>) -> Result<Value> {
    if !t.all_finite() {
        return Err(Error::NonFinite(format!("tensor `{name}`")));
    }
    Ok(json!({ "shape": t.shape(), "data": t.data() }))
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<Value> {
        let mut tensors = Map::new();
        for (name, t) in self.params.iter() {
            tensors.insert(name.to_string(), tensor_json(name, t)?);
        }
        for (head_name, head) in &self.heads {
            for (part, t) in ["weight", "bias"].iter().zip(head.tensors()) {
                let name = format!("heads.{head_name}.{part}");
                let v = tensor_json(&name, t)?;
                tensors.insert(name, v);
            }
        }
        Ok(json!({
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "architecture": self.params.architecture(),
            "tensors": tensors,
        }))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(&self.to_json()?)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_json(doc: &Value) -> Result<Self> {
        let obj = doc.as_object().ok_or_else(|| field_err("<root>", "expected a JSON object"))?;
        let get = |k: &str| obj.get(k).ok_or_else(|| field_err(k, "missing"));

        let version = get("format_version")?.as_u64().ok_or_else(|| field_err("format_version", "expected an integer"))?;
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(field_err("format_version", format!("unsupported version {version}")));
        }
        let seed = get("seed")?.as_u64().ok_or_else(|| field_err("seed", "expected a non-negative integer"))?;
        let config_hash = get("config_hash")?
            .as_str()
            .ok_or_else(|| field_err("config_hash", "expected a string"))?
            .to_string();
        let arch: Architecture = serde_json::from_value(get("architecture")?.clone())
            .map_err(|e| field_err("architecture", e.to_string()))?;
        let arch = Architecture::new(arch.dims, arch.activation).map_err(|e| field_err("architecture", e.to_string()))?;

        let tensors = get("tensors")?.as_object().ok_or_else(|| field_err("tensors", "expected an object"))?;
        let mut parsed: IndexMap<&str, Tensor<f64>> = IndexMap::new();
        for (name, v) in tensors {
            parsed.insert(name, parse_tensor(name, v)?);
        }

        let mut layers = Vec::new();
        for (name, shape) in arch.layout() {
            let t = parsed
                .shift_remove(name.as_str())
                .ok_or_else(|| field_err(format!("tensors.{name}"), "missing"))?;
            if t.shape() != shape.as_slice() {
                return Err(field_err(
                    format!("tensors.{name}.shape"),
                    format!("expected {shape:?} for the declared architecture, got {:?}", t.shape()),
                ));
            }
            layers.push(t);
        }
        let params = ParameterSet::from_tensors(arch, layers)?;

        let mut parts: IndexMap<String, [Option<Tensor<f64>>; 2]> = IndexMap::new();
        for (name, t) in parsed {
            let field = format!("tensors.{name}");
            let rest = name.strip_prefix("heads.").ok_or_else(|| field_err(&field, "unexpected tensor"))?;
            let (head, slot) = match rest.rsplit_once('.') {
                Some((h, "weight")) => (h, 0),
                Some((h, "bias")) => (h, 1),
                _ => return Err(field_err(&field, "expected heads.<name>.weight or heads.<name>.bias")),
            };
            parts.entry(head.to_string()).or_default()[slot] = Some(t);
        }
        let mut heads = IndexMap::new();
        for (name, [w, b]) in parts {
            let (Some(w), Some(b)) = (w, b) else {
                return Err(field_err(format!("tensors.heads.{name}"), "needs both weight and bias"));
            };
            if w.rank() != 2 || w.shape()[0] != params.architecture().feature_dim() {
                return Err(field_err(
                    format!("tensors.heads.{name}.weight.shape"),
                    format!("expected ({}, classes), got {:?}", params.architecture().feature_dim(), w.shape()),
                ));
            }
            let head = Head::new(w, b).map_err(|e| field_err(format!("tensors.heads.{name}"), e.to_string()))?;
            heads.insert(name, head);
        }
        Ok(Checkpoint { seed, config_hash, params, heads })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let doc: Value = serde_json::from_slice(bytes).map_err(|e| field_err("<document>", e.to_string()))?;
        Self::from_json(&doc)
    }

    pub fn head(&self, name: &str) -> Result<&Head<f64>> {
        self.heads.get(name).ok_or_else(|| field_err(format!("tensors.heads.{name}"), "missing"))
    }
}

fn parse_tensor(name: &str, v: &Value) -> Result<Tensor<f64>> {
    let field = format!("tensors.{name}");
    let obj = v.as_object().ok_or_else(|| field_err(&field, "expected an object with shape and data"))?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| field_err(format!("{field}.shape"), "expected an array"))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| field_err(format!("{field}.shape"), "expected non-negative integers"))?;
    let data = obj
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| field_err(format!("{field}.data"), "expected an array"))?
        .iter()
        .map(Value::as_f64)
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| field_err(format!("{field}.data"), "expected numbers"))?;
    Tensor::new(shape, data).map_err(|e| field_err(&field, e.to_string()))
}

/// Hex SHA-256 of the serialized checkpoint.
pub fn content_hash(ckpt: &Checkpoint) -> Result<String> {
    Ok(hex::encode(Sha256::digest(ckpt.to_bytes()?)))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
