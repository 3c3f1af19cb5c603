//! Typed feature values and the per-feature schema contract.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Int32,
    Int64,
    Float32,
    Bytes,
}

impl DType {
    /// Tag byte used in the record format.
    pub fn tag(self) -> u8 {
        match self {
            DType::Int32 => 0,
            DType::Int64 => 1,
            DType::Float32 => 2,
            DType::Bytes => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => DType::Int32,
            1 => DType::Int64,
            2 => DType::Float32,
            3 => DType::Bytes,
            _ => return None,
        })
    }

    pub fn element_size(self) -> usize {
        match self {
            DType::Int32 | DType::Float32 => 4,
            DType::Int64 => 8,
            DType::Bytes => 1,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::Int32 => "int32",
            DType::Int64 => "int64",
            DType::Float32 => "float32",
            DType::Bytes => "bytes",
        })
    }
}

/// One named, typed feature of a task's output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub dtype: DType,
    /// Runtime pad/trim target; `None` means variable length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_length: Option<u32>,
}

impl FeatureSpec {
    pub fn new(name: impl Into<String>, dtype: DType) -> Self {
        Self { name: name.into(), dtype, fixed_length: None }
    }

    pub fn with_length(mut self, len: u32) -> Self {
        self.fixed_length = Some(len);
        self
    }
}

/// `[a-z][a-z0-9_]*`
pub fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some('a'..='z')) && chars.all(|c| matches!(c, 'a'..='z' | '0'..='9' | '_'))
}

/// Check a schema's own invariants: non-empty, valid unique names,
/// positive fixed lengths.
pub fn validate_schema(schema: &[FeatureSpec]) -> std::result::Result<(), String> {
    if schema.is_empty() {
        return Err("schema is empty".into());
    }
    let mut seen = std::collections::BTreeSet::new();
    for f in schema {
        if !is_identifier(&f.name) {
            return Err(format!("feature name `{}` is not a valid identifier", f.name));
        }
        if !seen.insert(f.name.as_str()) {
            return Err(format!("feature `{}` appears twice", f.name));
        }
        if f.fixed_length == Some(0) {
            return Err(format!("feature `{}` has fixed_length 0", f.name));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureValue {
    Int32(Vec<i32>),
    Int64(Vec<i64>),
    Float32(Vec<f32>),
    Bytes(Vec<u8>),
}

impl FeatureValue {
    pub fn dtype(&self) -> DType {
        match self {
            FeatureValue::Int32(_) => DType::Int32,
            FeatureValue::Int64(_) => DType::Int64,
            FeatureValue::Float32(_) => DType::Float32,
            FeatureValue::Bytes(_) => DType::Bytes,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            FeatureValue::Int32(v) => v.len(),
            FeatureValue::Int64(v) => v.len(),
            FeatureValue::Float32(v) => v.len(),
            FeatureValue::Bytes(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Integer elements widened to i64, or `None` for non-integer dtypes.
    pub fn as_ids(&self) -> Option<Vec<i64>> {
        match self {
            FeatureValue::Int32(v) => Some(v.iter().map(|&x| x as i64).collect()),
            FeatureValue::Int64(v) => Some(v.clone()),
            _ => None,
        }
    }

    /// Little-endian element bytes.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            FeatureValue::Int32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            FeatureValue::Int64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            FeatureValue::Float32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            FeatureValue::Bytes(v) => v.clone(),
        }
    }

    pub fn from_le_bytes(dtype: DType, data: &[u8]) -> Option<Self> {
        if !data.len().is_multiple_of(dtype.element_size()) {
            return None;
        }
        Some(match dtype {
            DType::Int32 => {
                FeatureValue::Int32(data.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            DType::Int64 => {
                FeatureValue::Int64(data.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect())
            }
            DType::Float32 => {
                FeatureValue::Float32(data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            DType::Bytes => FeatureValue::Bytes(data.to_vec()),
        })
    }

    /// Trim or zero-pad to exactly `len` elements.
    pub fn fit_to(&mut self, len: usize) {
        match self {
            FeatureValue::Int32(v) => v.resize(len, 0),
            FeatureValue::Int64(v) => v.resize(len, 0),
            FeatureValue::Float32(v) => v.resize(len, 0.0),
            FeatureValue::Bytes(v) => v.resize(len, 0),
        }
    }
}

/// Feature map keyed by name. `BTreeMap` keeps iteration (and therefore
/// serialized bytes) in name order.
pub type Features = BTreeMap<String, FeatureValue>;

/// Check that `features` has exactly the names and dtypes of `schema`.
pub fn check_against_schema(features: &Features, schema: &[FeatureSpec]) -> Result<(), String> {
    if features.len() != schema.len() {
        let names: Vec<_> = features.keys().collect();
        return Err(format!("expected {} features, found {names:?}", schema.len()));
    }
    for spec in schema {
        match features.get(&spec.name) {
            None => return Err(format!("missing feature `{}`", spec.name)),
            Some(v) if v.dtype() != spec.dtype => {
                return Err(format!("feature `{}` has dtype {}, schema says {}", spec.name, v.dtype(), spec.dtype))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Fetch a feature as an id sequence.
pub fn ids_of(features: &Features, name: &str) -> Result<Vec<i64>> {
    let v = features.get(name).ok_or_else(|| Error::MissingFeature(name.to_string()))?;
    v.as_ids().ok_or_else(|| Error::NotIntegerFeature(name.to_string()))
}
