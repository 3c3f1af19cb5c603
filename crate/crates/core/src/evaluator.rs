//! Task-attached metrics over a cached validation split.
//!
//! Predictions are keyed by cache index and compared against the cached
//! `targets` feature. Pairs are sorted by cache index before any metric
//! runs, so insertion order of the prediction map never matters.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::ids_of;
use crate::shard_store::Cache;
use crate::vocab::{EOS_ID, PAD_ID};

/// Corpus-level metric over `(target, prediction)` pairs in cache-index order.
pub type MetricFn = fn(&[(&[i64], &[i64])]) -> BTreeMap<String, f64>;

#[derive(Debug, Clone)]
pub struct MetricRegistry {
    metrics: BTreeMap<String, MetricFn>,
}

impl Default for MetricRegistry {
    fn default() -> Self {
        let mut metrics: BTreeMap<String, MetricFn> = BTreeMap::new();
        metrics.insert("exact_match".into(), exact_match_metric);
        metrics.insert("token_accuracy".into(), token_accuracy_metric);
        Self { metrics }
    }
}

impl MetricRegistry {
    pub fn contains(&self, name: &str) -> bool {
        self.metrics.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<MetricFn> {
        self.metrics.get(name).copied()
    }

    pub fn register(&mut self, name: impl Into<String>, f: MetricFn) {
        self.metrics.insert(name.into(), f);
    }
}

/// Drop the trailing run of pad and EOS ids.
pub fn strip_trailing_specials(seq: &[i64]) -> &[i64] {
    let end = seq.iter().rposition(|&t| t != PAD_ID as i64 && t != EOS_ID as i64).map_or(0, |p| p + 1);
    &seq[..end]
}

pub fn exact_match(pairs: &[(&[i64], &[i64])]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs.iter().filter(|(t, p)| strip_trailing_specials(t) == strip_trailing_specials(p)).count();
    100.0 * hits as f64 / pairs.len() as f64
}

pub fn token_accuracy(pairs: &[(&[i64], &[i64])]) -> f64 {
    let mut total = 0u64;
    let mut hits = 0u64;
    for (t, p) in pairs {
        for (pos, &tok) in t.iter().enumerate() {
            if tok == PAD_ID as i64 {
                continue;
            }
            total += 1;
            if p.get(pos) == Some(&tok) {
                hits += 1;
            }
        }
    }
    if total == 0 {
        return 0.0;
    }
    100.0 * hits as f64 / total as f64
}

fn exact_match_metric(pairs: &[(&[i64], &[i64])]) -> BTreeMap<String, f64> {
    [("exact_match".to_string(), exact_match(pairs))].into()
}

fn token_accuracy_metric(pairs: &[(&[i64], &[i64])]) -> BTreeMap<String, f64> {
    [("token_accuracy".to_string(), token_accuracy(pairs))].into()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExampleRecord {
    pub cache_index: u64,
    pub target: Vec<i64>,
    pub prediction: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: String,
    pub split: String,
    pub num_examples: u64,
    pub metrics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub examples: Vec<ExampleRecord>,
}

impl EvalReport {
    /// Structured text rendering (TOML).
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("report serializes")
    }
}

/// Score `predictions` against every example in `cache` with the named
/// metrics. Predictions must cover each cache index exactly once.
pub fn evaluate_pairs(
    metrics: &MetricRegistry,
    metric_names: &[String],
    targets: &[Vec<i64>],
    predictions: &BTreeMap<u64, Vec<i64>>,
) -> Result<BTreeMap<String, f64>> {
    let n = targets.len() as u64;
    if let Some((&extra, _)) = predictions.range(n..).next() {
        return Err(Error::BadPredictions(format!("cache index {extra} beyond split size {n}")));
    }
    let missing: Vec<u64> = (0..n).filter(|i| !predictions.contains_key(i)).collect();
    if !missing.is_empty() {
        return Err(Error::MissingPredictions(missing));
    }
    let pairs: Vec<(&[i64], &[i64])> =
        targets.iter().zip(predictions.values()).map(|(t, p)| (t.as_slice(), p.as_slice())).collect();
    let mut out = BTreeMap::new();
    for name in metric_names {
        let f = metrics.get(name).ok_or_else(|| Error::UnknownMetric(name.clone()))?;
        out.extend(f(&pairs));
    }
    Ok(out)
}

/// Run a task's metrics over a whole cached split.
pub fn evaluate(
    metrics: &MetricRegistry,
    metric_names: &[String],
    cache: &Cache,
    predictions: &BTreeMap<u64, Vec<i64>>,
    keep_examples: bool,
) -> Result<EvalReport> {
    let manifest = cache.manifest();
    let mut targets = Vec::with_capacity(manifest.num_examples as usize);
    for i in 0..manifest.num_examples {
        let ex = cache.read_index(i)?;
        targets.push(ids_of(&ex.features, "targets")?);
    }
    let values = evaluate_pairs(metrics, metric_names, &targets, predictions)?;
    let examples = if keep_examples {
        targets
            .into_iter()
            .zip(predictions.iter())
            .map(|(target, (&cache_index, p))| ExampleRecord { cache_index, target, prediction: p.clone() })
            .collect()
    } else {
        Vec::new()
    };
    Ok(EvalReport {
        task: manifest.task_name.clone(),
        split: manifest.split.clone(),
        num_examples: manifest.num_examples,
        metrics: values,
        examples,
    })
}

/// Parse `cache_index<TAB>space-separated ids` lines. Blank lines are
/// ignored; a repeated cache index is an error.
pub fn parse_predictions(reader: impl BufRead) -> Result<BTreeMap<u64, Vec<i64>>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::BadPredictions(format!("line {}: {e}", lineno + 1)))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::BadPredictions(format!("line {}: {what}", lineno + 1));
        let (idx, ids) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
        let idx: u64 = idx.trim().parse().map_err(|_| bad("bad cache index"))?;
        let ids = ids
            .split_whitespace()
            .map(|t| t.parse::<i64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("bad token id"))?;
        if out.insert(idx, ids).is_some() {
            return Err(bad(&format!("cache index {idx} repeated")));
        }
    }
    Ok(out)
}

pub fn read_predictions(path: &Path) -> Result<BTreeMap<u64, Vec<i64>>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_predictions(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs<'a>(t: &'a [Vec<i64>], p: &'a [Vec<i64>]) -> Vec<(&'a [i64], &'a [i64])> {
        t.iter().zip(p).map(|(a, b)| (a.as_slice(), b.as_slice())).collect()
    }

    #[test]
    fn identical_predictions_score_100() {
        let t = vec![vec![4, 1], vec![5, 6, 1]];
        let p = pairs(&t, &t);
        assert_eq!(exact_match(&p), 100.0);
        assert_eq!(token_accuracy(&p), 100.0);
    }

    #[test]
    fn one_of_four_wrong() {
        let t = vec![vec![4, 1], vec![5, 1], vec![6, 1], vec![7, 1]];
        let mut p = t.clone();
        p[2] = vec![9, 9];
        assert_eq!(exact_match(&pairs(&t, &p)), 75.0);
    }

    #[test]
    fn token_accuracy_hand_count() {
        let t = vec![vec![4, 1], vec![5, 1]];
        let p = vec![vec![4, 1], vec![4, 1]];
        assert_eq!(token_accuracy(&pairs(&t, &p)), 75.0);
    }

    #[test]
    fn trailing_specials_ignored_for_exact_match() {
        let t = vec![vec![4, 5, 1, 0, 0]];
        let p = vec![vec![4, 5]];
        assert_eq!(exact_match(&pairs(&t, &p)), 100.0);
        assert_eq!(strip_trailing_specials(&[0, 1, 0]), &[] as &[i64]);
    }

    #[test]
    fn missing_and_extra_predictions() {
        let m = MetricRegistry::default();
        let names = vec!["exact_match".to_string()];
        let targets = vec![vec![4], vec![5], vec![6]];
        let preds: BTreeMap<u64, Vec<i64>> = [(0, vec![4])].into();
        match evaluate_pairs(&m, &names, &targets, &preds) {
            Err(Error::MissingPredictions(v)) => assert_eq!(v, vec![1, 2]),
            other => panic!("{other:?}"),
        }
        let preds: BTreeMap<u64, Vec<i64>> = [(0, vec![4]), (1, vec![5]), (2, vec![6]), (3, vec![])].into();
        assert!(matches!(evaluate_pairs(&m, &names, &targets, &preds), Err(Error::BadPredictions(_))));
    }

    #[test]
    fn unknown_metric() {
        let m = MetricRegistry::default();
        let preds: BTreeMap<u64, Vec<i64>> = [(0, vec![4])].into();
        let r = evaluate_pairs(&m, &["bleu_v9".into()], &[vec![4]], &preds);
        assert!(matches!(r, Err(Error::UnknownMetric(n)) if n == "bleu_v9"));
    }

    #[test]
    fn prediction_file_parsing() {
        let text = "1\t5 6 1\n0\t4 1\n\n";
        let p = parse_predictions(text.as_bytes()).unwrap();
        assert_eq!(p[&0], vec![4, 1]);
        assert_eq!(p[&1], vec![5, 6, 1]);
        assert!(parse_predictions("0\t1\n0\t2\n".as_bytes()).is_err());
        assert!(parse_predictions("0 1 2\n".as_bytes()).is_err());
        assert!(parse_predictions("x\t1\n".as_bytes()).is_err());
        assert_eq!(parse_predictions("3\t\n".as_bytes()).unwrap()[&3], Vec::<i64>::new());
    }
}
