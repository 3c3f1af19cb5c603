//! Name-keyed registry of tasks, mixtures and vocabularies.
//!
//! The registry is populated once (programmatically or from a config file)
//! and then only read. Task and mixture names share one namespace.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::evaluator::MetricRegistry;
use crate::features::FeatureSpec;
use crate::task::{DataSourceSpec, MixtureComponent, MixtureSpec, PreprocessorSpec, TaskSpec};
use crate::vocab::{TokenTable, Vocabulary};

pub const BYTE_LEVEL: &str = "byte_level";

#[derive(Debug, Clone)]
pub struct Registry {
    tasks: BTreeMap<String, TaskSpec>,
    mixtures: BTreeMap<String, MixtureSpec>,
    vocabs: BTreeMap<String, Vocabulary>,
    metrics: MetricRegistry,
}

impl Default for Registry {
    fn default() -> Self {
        Self::new(MetricRegistry::default())
    }
}

impl Registry {
    pub fn new(metrics: MetricRegistry) -> Self {
        let vocabs = [(BYTE_LEVEL.to_string(), Vocabulary::ByteLevel)].into();
        Self { tasks: BTreeMap::new(), mixtures: BTreeMap::new(), vocabs, metrics }
    }

    pub fn metrics(&self) -> &MetricRegistry {
        &self.metrics
    }

    pub fn register_vocab(&mut self, name: impl Into<String>, vocab: Vocabulary) -> Result<()> {
        let name = name.into();
        if self.vocabs.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        self.vocabs.insert(name, vocab);
        Ok(())
    }

    pub fn vocab(&self, name: &str) -> Option<&Vocabulary> {
        self.vocabs.get(name)
    }

    pub fn register_task(&mut self, spec: TaskSpec) -> Result<&TaskSpec> {
        if self.tasks.contains_key(&spec.name) || self.mixtures.contains_key(&spec.name) {
            return Err(Error::DuplicateName(spec.name));
        }
        spec.validate(|v| self.vocabs.contains_key(v), |m| self.metrics.contains(m))
            .map_err(|reason| Error::InvalidSpec { name: spec.name.clone(), reason })?;
        let name = spec.name.clone();
        Ok(self.tasks.entry(name).or_insert(spec))
    }

    /// Children are resolved lazily by [`Registry::resolve_mixture`], so
    /// mixtures may be registered before their components.
    pub fn register_mixture(&mut self, spec: MixtureSpec) -> Result<&MixtureSpec> {
        if self.tasks.contains_key(&spec.name) || self.mixtures.contains_key(&spec.name) {
            return Err(Error::DuplicateName(spec.name));
        }
        spec.validate().map_err(|reason| Error::InvalidSpec { name: spec.name.clone(), reason })?;
        let name = spec.name.clone();
        Ok(self.mixtures.entry(name).or_insert(spec))
    }

    pub fn task(&self, name: &str) -> Result<&TaskSpec> {
        self.tasks.get(name).ok_or_else(|| Error::NotFound(name.to_string()))
    }

    pub fn mixture(&self, name: &str) -> Result<&MixtureSpec> {
        self.mixtures.get(name).ok_or_else(|| Error::NotFound(name.to_string()))
    }

    pub fn is_mixture(&self, name: &str) -> bool {
        self.mixtures.contains_key(name)
    }

    pub fn task_names(&self) -> impl Iterator<Item = &str> {
        self.tasks.keys().map(String::as_str)
    }

    pub fn mixture_names(&self) -> impl Iterator<Item = &str> {
        self.mixtures.keys().map(String::as_str)
    }

    /// Flatten `name` into `(task, rate)` pairs sorted by task name, with
    /// nested mixture rates multiplied through and the result normalized
    /// to sum to 1. A plain task resolves to itself at rate 1.
    pub fn resolve_mixture(&self, name: &str) -> Result<Vec<(String, f64)>> {
        let mut acc = BTreeMap::new();
        let mut path = Vec::new();
        self.flatten(name, 1.0, &mut path, &mut acc)?;
        let total: f64 = acc.values().sum();
        Ok(acc.into_iter().map(|(k, v)| (k, v / total)).collect())
    }

    fn flatten(&self, name: &str, share: f64, path: &mut Vec<String>, acc: &mut BTreeMap<String, f64>) -> Result<()> {
        if path.iter().any(|p| p == name) {
            let mut cycle = path.clone();
            cycle.push(name.to_string());
            return Err(Error::CycleDetected(cycle));
        }
        if self.tasks.contains_key(name) {
            *acc.entry(name.to_string()).or_insert(0.0) += share;
            return Ok(());
        }
        let mix = self.mixture(name)?;
        let total: f64 = mix.components.iter().map(|c| c.rate).sum();
        path.push(name.to_string());
        for c in &mix.components {
            self.flatten(&c.name, share * c.rate / total, path, acc)?;
        }
        path.pop();
        Ok(())
    }

    /// Resolve a vocabulary name or fail with the registry's error type.
    pub fn vocab_or_err(&self, name: &str) -> Result<&Vocabulary> {
        self.vocab(name).ok_or_else(|| Error::NotFound(format!("vocabulary {name}")))
    }

    pub fn vocab_descriptor(&self, name: &str) -> String {
        self.vocab(name).map_or_else(|| format!("missing({name})"), Vocabulary::descriptor)
    }

    /// Load a registry from a TOML definition file. Relative paths in the
    /// file resolve against the file's directory.
    pub fn from_config_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_config_str(&text, base)
    }

    pub fn from_config_str(text: &str, base_dir: &Path) -> Result<Self> {
        let cfg: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut reg = Registry::default();
        for (name, v) in cfg.vocabularies {
            let vocab = match v {
                VocabConfig::ByteLevel => Vocabulary::ByteLevel,
                VocabConfig::Table { path, unk_fallback } => {
                    // Fingerprints see the path as written, not the checkout location.
                    Vocabulary::Table(TokenTable::load(&base_dir.join(&path), &path, unk_fallback)?)
                }
            };
            reg.register_vocab(name, vocab)?;
        }
        for (name, t) in cfg.tasks {
            reg.register_task(TaskSpec {
                name,
                source: t.source.with_base_dir(base_dir),
                preprocessors: t.preprocessors,
                schema: t.schema,
                metrics: t.metrics,
                splits: t.splits,
            })?;
        }
        for (name, m) in cfg.mixtures {
            reg.register_mixture(MixtureSpec { name, components: m.components })?;
        }
        let names: Vec<String> = reg.mixtures.keys().cloned().collect();
        for name in names {
            reg.resolve_mixture(&name)?;
        }
        Ok(reg)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    vocabularies: BTreeMap<String, VocabConfig>,
    #[serde(default)]
    tasks: BTreeMap<String, TaskConfig>,
    #[serde(default)]
    mixtures: BTreeMap<String, MixtureConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum VocabConfig {
    ByteLevel,
    Table {
        path: String,
        #[serde(default = "default_true")]
        unk_fallback: bool,
    },
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskConfig {
    source: DataSourceSpec,
    #[serde(default)]
    preprocessors: Vec<PreprocessorSpec>,
    schema: Vec<FeatureSpec>,
    #[serde(default)]
    metrics: Vec<String>,
    splits: BTreeSet<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MixtureConfig {
    components: Vec<MixtureComponent>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::DType;
    use crate::task::{Op, SourceKind};

    fn task(name: &str) -> TaskSpec {
        TaskSpec {
            name: name.into(),
            source: DataSourceSpec::new(SourceKind::TextLines, "x.txt").with_field("text", "targets"),
            preprocessors: vec![PreprocessorSpec::cache(Op::Tokenize {
                vocab: BYTE_LEVEL.into(),
                features: vec!["targets".into()],
            })],
            schema: vec![FeatureSpec::new("targets", DType::Int32)],
            metrics: vec!["exact_match".into()],
            splits: ["train".to_string()].into(),
        }
    }

    #[test]
    fn register_and_lookup() {
        let mut r = Registry::default();
        let spec = task("wmt_toy");
        r.register_task(spec.clone()).unwrap();
        assert_eq!(r.task("wmt_toy").unwrap(), &spec);
        assert!(matches!(r.register_task(spec), Err(Error::DuplicateName(n)) if n == "wmt_toy"));
        assert!(matches!(r.task("nope"), Err(Error::NotFound(_))));
    }

    #[test]
    fn unknown_metric_is_invalid_spec() {
        let mut r = Registry::default();
        let mut spec = task("t");
        spec.metrics = vec!["bleu_v9".into()];
        match r.register_task(spec) {
            Err(Error::InvalidSpec { reason, .. }) => assert!(reason.contains("bleu_v9")),
            other => panic!("{other:?}"),
        }
    }

    fn abc() -> Registry {
        let mut r = Registry::default();
        for n in ["a", "b", "c"] {
            r.register_task(task(n)).unwrap();
        }
        r
    }

    #[test]
    fn flat_mixture() {
        let mut r = abc();
        r.register_mixture(MixtureSpec::new("m", &[("b", 1.0), ("a", 1.0)])).unwrap();
        assert_eq!(r.resolve_mixture("m").unwrap(), vec![("a".into(), 0.5), ("b".into(), 0.5)]);
    }

    // Brute-force oracle: enumerate every root-to-leaf path of the rate
    // tree and multiply the normalized edge weights along it.
    type Node<'a> = (&'a str, f64, Option<&'a [(&'a str, f64)]>);

    fn enumerate_paths(tree: &[Node]) -> BTreeMap<String, f64> {
        let total: f64 = tree.iter().map(|t| t.1).sum();
        let mut out = BTreeMap::new();
        for &(name, rate, children) in tree {
            match children {
                None => *out.entry(name.to_string()).or_insert(0.0) += rate / total,
                Some(kids) => {
                    let kt: f64 = kids.iter().map(|k| k.1).sum();
                    for &(k, kr) in kids {
                        *out.entry(k.to_string()).or_insert(0.0) += rate / total * kr / kt;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn nested_mixture_rates() {
        let oracle = enumerate_paths(&[("a", 1.0, None), ("m", 1.0, Some(&[("b", 1.0), ("c", 3.0)]))]);
        assert_eq!(oracle["a"], 0.5);
        assert_eq!(oracle["b"], 0.125);
        assert_eq!(oracle["c"], 0.375);

        let mut r = abc();
        r.register_mixture(MixtureSpec::new("outer", &[("a", 1.0), ("inner", 1.0)])).unwrap();
        r.register_mixture(MixtureSpec::new("inner", &[("b", 1.0), ("c", 3.0)])).unwrap();
        let got = r.resolve_mixture("outer").unwrap();
        let want: Vec<(String, f64)> = oracle.into_iter().collect();
        assert_eq!(got, want);
    }

    #[test]
    fn cycle_detected_with_path() {
        let mut r = abc();
        r.register_mixture(MixtureSpec::new("x", &[("a", 1.0), ("y", 1.0)])).unwrap();
        r.register_mixture(MixtureSpec::new("y", &[("b", 1.0), ("x", 1.0)])).unwrap();
        match r.resolve_mixture("x") {
            Err(Error::CycleDetected(p)) => assert_eq!(p, vec!["x", "y", "x"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_child_not_found() {
        let mut r = abc();
        r.register_mixture(MixtureSpec::new("m", &[("a", 1.0), ("zz", 1.0)])).unwrap();
        assert!(matches!(r.resolve_mixture("m"), Err(Error::NotFound(n)) if n == "zz"));
    }

    #[test]
    fn registration_order_irrelevant() {
        let mut r1 = abc();
        r1.register_mixture(MixtureSpec::new("m", &[("a", 2.0), ("c", 1.0)])).unwrap();
        let mut r2 = Registry::default();
        r2.register_mixture(MixtureSpec::new("m", &[("a", 2.0), ("c", 1.0)])).unwrap();
        for n in ["c", "b", "a"] {
            r2.register_task(task(n)).unwrap();
        }
        assert_eq!(r1.resolve_mixture("m").unwrap(), r2.resolve_mixture("m").unwrap());
        assert_eq!(r1.task("b").unwrap(), r2.task("b").unwrap());
    }

    #[test]
    fn config_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("words.txt"), "hello\nworld\n").unwrap();
        let cfg = r#"
[vocabularies.words]
kind = "table"
path = "words.txt"

[tasks.greet]
splits = ["train", "validation"]
metrics = ["exact_match", "token_accuracy"]
source = { kind = "tsv_pairs", location = "greet_{split}.tsv" }
schema = [
  { name = "inputs", dtype = "int32", fixed_length = 8 },
  { name = "targets", dtype = "int32" },
]

[[tasks.greet.preprocessors]]
op = "tokenize"
vocab = "words"
features = ["inputs", "targets"]

[[tasks.greet.preprocessors]]
op = "append_eos"
features = ["targets"]
stage = "runtime"

[tasks.echo]
splits = ["train"]
source = { kind = "text_lines", location = "echo.txt", fields = { text = "targets" } }
schema = [{ name = "targets", dtype = "bytes" }]

[mixtures.both]
components = [{ name = "greet", rate = 3.0 }, { name = "echo", rate = 1.0 }]
"#;
        let r = Registry::from_config_str(cfg, dir.path()).unwrap();
        let t = r.task("greet").unwrap();
        assert_eq!(t.fixed_length("inputs"), Some(8));
        assert_eq!(t.runtime_ops().count(), 1);
        assert_eq!(t.source.path_for_split("train"), dir.path().join("greet_train.tsv"));
        assert_eq!(r.vocab("words").unwrap().size(), 5);
        assert_eq!(r.vocab_descriptor("words"), "table(words.txt;unk_fallback=true)");
        assert_eq!(r.resolve_mixture("both").unwrap(), vec![("echo".into(), 0.25), ("greet".into(), 0.75)]);

        let bad = cfg.replace("splits = [\"train\"]\nsource", "splits = [\"train\"]\nsurprise = 1\nsource");
        assert!(matches!(Registry::from_config_str(&bad, dir.path()), Err(Error::Config(_))));
    }
}
