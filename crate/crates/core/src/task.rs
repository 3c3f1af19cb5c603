//! Task and mixture definitions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::features::{is_identifier, validate_schema, DType, FeatureSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    /// One example per line; column `text`.
    TextLines,
    /// `input<TAB>target` per line; columns `input` and `target`.
    TsvPairs,
    /// A directory of `*.rec` files in the shard record framing; columns
    /// are the stored feature names.
    RecordDir,
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SourceKind::TextLines => "text_lines",
            SourceKind::TsvPairs => "tsv_pairs",
            SourceKind::RecordDir => "record_dir",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSourceSpec {
    pub kind: SourceKind,
    /// Path as written in the config. `{split}` is replaced by the split
    /// name; relative paths resolve against `base_dir`.
    pub location: String,
    /// Source column -> feature name. Empty means the kind's default.
    #[serde(default)]
    pub fields: BTreeMap<String, String>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DataSourceSpec {
    pub fn new(kind: SourceKind, location: impl Into<String>) -> Self {
        Self { kind, location: location.into(), fields: BTreeMap::new(), base_dir: PathBuf::new() }
    }

    pub fn with_field(mut self, column: &str, feature: &str) -> Self {
        self.fields.insert(column.to_string(), feature.to_string());
        self
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn path_for_split(&self, split: &str) -> PathBuf {
        let loc = self.location.replace("{split}", split);
        let p = Path::new(&loc);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Effective column mapping, with defaults filled in for text kinds.
    pub fn field_map(&self) -> BTreeMap<String, String> {
        if !self.fields.is_empty() {
            return self.fields.clone();
        }
        let pairs: &[(&str, &str)] = match self.kind {
            SourceKind::TextLines => &[("text", "text")],
            SourceKind::TsvPairs => &[("input", "inputs"), ("target", "targets")],
            SourceKind::RecordDir => &[],
        };
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    fn columns(&self) -> Option<&'static [&'static str]> {
        match self.kind {
            SourceKind::TextLines => Some(&["text"]),
            SourceKind::TsvPairs => Some(&["input", "target"]),
            SourceKind::RecordDir => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    #[default]
    Cache,
    Runtime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    /// Bytes -> int32 ids through a named vocabulary.
    Tokenize { vocab: String, features: Vec<String> },
    /// Append EOS to integer sequences.
    AppendEos { features: Vec<String> },
    /// Lowercase byte features (Unicode-aware when the bytes are UTF-8).
    Lowercase { features: Vec<String> },
    /// Mask each token independently with probability `rate`; each maximal
    /// run of masked tokens collapses to a single unk id.
    RandomSpanMask { feature: String, rate: f64 },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Tokenize { .. } => "tokenize",
            Op::AppendEos { .. } => "append_eos",
            Op::Lowercase { .. } => "lowercase",
            Op::RandomSpanMask { .. } => "random_span_mask",
        }
    }

    pub fn features(&self) -> Vec<&str> {
        match self {
            Op::Tokenize { features, .. } | Op::AppendEos { features } | Op::Lowercase { features } => {
                features.iter().map(String::as_str).collect()
            }
            Op::RandomSpanMask { feature, .. } => vec![feature.as_str()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessorSpec {
    #[serde(flatten)]
    pub op: Op,
    #[serde(default)]
    pub stage: Stage,
}

impl PreprocessorSpec {
    pub fn cache(op: Op) -> Self {
        Self { op, stage: Stage::Cache }
    }

    pub fn runtime(op: Op) -> Self {
        Self { op, stage: Stage::Runtime }
    }

    /// Canonical text form used in fingerprints. `vocab_descriptor`
    /// resolves a vocabulary name to its stable description.
    pub fn descriptor(&self, vocab_descriptor: impl Fn(&str) -> String) -> String {
        match &self.op {
            Op::Tokenize { vocab, features } => {
                format!("tokenize(vocab={};features={})", vocab_descriptor(vocab), features.join(","))
            }
            Op::AppendEos { features } => format!("append_eos(features={})", features.join(",")),
            Op::Lowercase { features } => format!("lowercase(features={})", features.join(",")),
            Op::RandomSpanMask { feature, rate } => {
                format!("random_span_mask(feature={feature};rate={:016x})", rate.to_bits())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub name: String,
    pub source: DataSourceSpec,
    pub preprocessors: Vec<PreprocessorSpec>,
    pub schema: Vec<FeatureSpec>,
    pub metrics: Vec<String>,
    pub splits: BTreeSet<String>,
}

impl TaskSpec {
    /// Cache-stage preprocessors with their op indices.
    pub fn cache_ops(&self) -> impl Iterator<Item = (usize, &PreprocessorSpec)> {
        self.preprocessors.iter().enumerate().filter(|(_, p)| p.stage == Stage::Cache)
    }

    pub fn runtime_ops(&self) -> impl Iterator<Item = (usize, &PreprocessorSpec)> {
        self.preprocessors.iter().enumerate().filter(|(_, p)| p.stage == Stage::Runtime)
    }

    /// Schema of the examples stored in a cache: the task schema, except
    /// that features tokenized at runtime are still raw bytes.
    pub fn cache_schema(&self) -> Vec<FeatureSpec> {
        let tokenized_at_runtime: BTreeSet<&str> = self
            .runtime_ops()
            .filter(|(_, p)| matches!(p.op, Op::Tokenize { .. }))
            .flat_map(|(_, p)| p.op.features())
            .collect();
        self.schema
            .iter()
            .map(|f| FeatureSpec {
                name: f.name.clone(),
                dtype: if tokenized_at_runtime.contains(f.name.as_str()) { DType::Bytes } else { f.dtype },
                fixed_length: f.fixed_length,
            })
            .collect()
    }

    pub fn fixed_length(&self, feature: &str) -> Option<u32> {
        self.schema.iter().find(|f| f.name == feature).and_then(|f| f.fixed_length)
    }

    /// Vocabulary used to tokenize `feature`, if any op does.
    pub fn vocab_for(&self, feature: &str) -> Option<&str> {
        self.preprocessors.iter().find_map(|p| match &p.op {
            Op::Tokenize { vocab, features } if features.iter().any(|f| f == feature) => Some(vocab.as_str()),
            _ => None,
        })
    }

    /// Checks everything that can be checked without reading data.
    /// `has_vocab` and `has_metric` resolve names against the registry.
    pub fn validate(&self, has_vocab: impl Fn(&str) -> bool, has_metric: impl Fn(&str) -> bool) -> Result<(), String> {
        if !is_identifier(&self.name) {
            return Err(format!("task name `{}` is not a valid identifier", self.name));
        }
        validate_schema(&self.schema)?;
        if self.splits.is_empty() {
            return Err("no splits declared".into());
        }
        for s in &self.splits {
            if !is_identifier(s) {
                return Err(format!("split name `{s}` is not a valid identifier"));
            }
        }
        for m in &self.metrics {
            if !has_metric(m) {
                return Err(format!("unknown metric `{m}`"));
            }
        }
        if self.source.location.is_empty() {
            return Err("source location is empty".into());
        }
        let fields = self.source.field_map();
        if let Some(columns) = self.source.columns() {
            for col in fields.keys() {
                if !columns.contains(&col.as_str()) {
                    return Err(format!("source kind {} has no column `{col}`", self.source.kind));
                }
            }
        }
        if fields.is_empty() && self.source.kind != SourceKind::RecordDir {
            return Err("source maps no columns".into());
        }
        let mut targets = BTreeSet::new();
        for f in fields.values() {
            if !is_identifier(f) || !targets.insert(f.as_str()) {
                return Err(format!("field mapping target `{f}` is invalid or repeated"));
            }
        }

        let mut seen_runtime = false;
        for (i, p) in self.preprocessors.iter().enumerate() {
            match p.stage {
                Stage::Runtime => seen_runtime = true,
                Stage::Cache if seen_runtime => return Err(format!("cache-stage op {i} follows a runtime-stage op")),
                Stage::Cache => {}
            }
            match &p.op {
                Op::Tokenize { vocab, .. } if !has_vocab(vocab) => {
                    return Err(format!("op {i}: unknown vocabulary `{vocab}`"))
                }
                Op::RandomSpanMask { rate, .. } if !(*rate > 0.0 && *rate < 1.0) => {
                    return Err(format!("op {i}: random_span_mask rate {rate} not in (0, 1)"))
                }
                _ => {}
            }
            if p.op.features().is_empty() {
                return Err(format!("op {i}: no features named"));
            }
        }

        // Static dtype flow. Record directories carry their own dtypes, so
        // there the flow starts from the cache schema instead.
        let mut flow: BTreeMap<String, DType> = if self.source.kind == SourceKind::RecordDir {
            self.cache_schema().into_iter().map(|f| (f.name, f.dtype)).collect()
        } else {
            fields.values().map(|f| (f.clone(), DType::Bytes)).collect()
        };
        for (i, p) in self.preprocessors.iter().enumerate() {
            if self.source.kind == SourceKind::RecordDir && p.stage == Stage::Cache {
                continue;
            }
            for f in p.op.features() {
                let Some(dtype) = flow.get_mut(f) else {
                    return Err(format!("op {i} ({}): feature `{f}` does not exist at this point", p.op.name()));
                };
                match (&p.op, *dtype) {
                    (Op::Tokenize { .. }, DType::Bytes) => *dtype = DType::Int32,
                    (Op::Lowercase { .. }, DType::Bytes) => {}
                    (Op::AppendEos { .. } | Op::RandomSpanMask { .. }, DType::Int32 | DType::Int64) => {}
                    (op, d) => return Err(format!("op {i} ({}): feature `{f}` has incompatible dtype {d}", op.name())),
                }
            }
        }
        let schema: BTreeMap<String, DType> = self.schema.iter().map(|f| (f.name.clone(), f.dtype)).collect();
        if flow != schema {
            return Err(format!("preprocessed features {flow:?} do not match schema {schema:?}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub name: String,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    pub name: String,
    pub components: Vec<MixtureComponent>,
}

impl MixtureSpec {
    pub fn new(name: impl Into<String>, components: &[(&str, f64)]) -> Self {
        Self {
            name: name.into(),
            components: components.iter().map(|&(n, rate)| MixtureComponent { name: n.to_string(), rate }).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !is_identifier(&self.name) {
            return Err(format!("mixture name `{}` is not a valid identifier", self.name));
        }
        if self.components.len() < 2 {
            return Err("a mixture needs at least 2 components".into());
        }
        let mut names = BTreeSet::new();
        for c in &self.components {
            if !(c.rate.is_finite() && c.rate > 0.0) {
                return Err(format!("component `{}` has non-positive rate {}", c.name, c.rate));
            }
            if !names.insert(c.name.as_str()) {
                return Err(format!("component `{}` listed twice", c.name));
            }
        }
        Ok(())
    }
}
