#![allow(dead_code)]

use std::path::{Path, PathBuf};

use taskstream::builder::{build_cache, BuildConfig};
use taskstream::reader::cache_dir;
use taskstream::registry::Registry;
use taskstream::shard_store::CacheManifest;
use tempfile::TempDir;

/// Two tasks over generated text plus a mixture of them.
pub const CONFIG: &str = r#"
[tasks.nums]
splits = ["train", "validation"]
metrics = ["exact_match", "token_accuracy"]
source = { kind = "text_lines", location = "nums_{split}.txt", fields = { text = "targets" } }
schema = [{ name = "targets", dtype = "int32" }]

[[tasks.nums.preprocessors]]
op = "tokenize"
vocab = "byte_level"
features = ["targets"]

[[tasks.nums.preprocessors]]
op = "append_eos"
features = ["targets"]

[tasks.pairs]
splits = ["train", "validation"]
metrics = ["exact_match", "token_accuracy"]
source = { kind = "tsv_pairs", location = "pairs_{split}.tsv" }
schema = [
  { name = "inputs", dtype = "int32", fixed_length = 12 },
  { name = "targets", dtype = "int32", fixed_length = 12 },
]

[[tasks.pairs.preprocessors]]
op = "tokenize"
vocab = "byte_level"
features = ["inputs", "targets"]

[[tasks.pairs.preprocessors]]
op = "append_eos"
features = ["targets"]

[[tasks.pairs.preprocessors]]
op = "random_span_mask"
feature = "inputs"
rate = 0.2
stage = "runtime"

[mixtures.mix]
components = [{ name = "nums", rate = 1.0 }, { name = "pairs", rate = 3.0 }]
"#;

pub struct Env {
    pub dir: TempDir,
    pub registry: Registry,
}

impl Env {
    /// `nums` gets `n` lines per split, `pairs` gets `n_pairs` rows.
    pub fn new(n: usize, n_pairs: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        for split in ["train", "validation"] {
            let lines: String = (0..n).map(|i| format!("{split} line {i:05}\n")).collect();
            std::fs::write(dir.path().join(format!("nums_{split}.txt")), lines).unwrap();
            let rows: String = (0..n_pairs).map(|i| format!("q{i}\tanswer {}\n", i * 7 % 100)).collect();
            std::fs::write(dir.path().join(format!("pairs_{split}.tsv")), rows).unwrap();
        }
        std::fs::write(dir.path().join("config.toml"), CONFIG).unwrap();
        let registry = Registry::from_config_file(&dir.path().join("config.toml")).unwrap();
        Env { dir, registry }
    }

    pub fn config(&self) -> PathBuf {
        self.dir.path().join("config.toml")
    }

    pub fn cache_root(&self) -> PathBuf {
        self.dir.path().join("cache")
    }

    pub fn build(&self, task: &str, split: &str, seed: u64, num_shards: u32) -> CacheManifest {
        let out = cache_dir(&self.cache_root(), task, split);
        build_cache(&self.registry, &BuildConfig::new(task, split, out).seed(seed).num_shards(num_shards)).unwrap()
    }
}

pub fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

/// Independent statement of the converter's contract; returns every
/// violated property.
pub fn converter_violations(
    inputs: &[i32],
    targets: &[i32],
    spec: &taskstream::converter::ConverterSpec,
    out: &taskstream::converter::ModelFeatures,
) -> Vec<String> {
    use taskstream::converter::{Architecture, ModelFeatures};
    let mut v = Vec::new();
    let tgt: Vec<i32> = targets.iter().copied().take(spec.targets_length).collect();
    let inp: Vec<i32> = inputs.iter().copied().take(spec.inputs_length).collect();
    let (seq, n_in, total) = match spec.architecture {
        Architecture::EncDec => (tgt.clone(), 0, spec.targets_length),
        Architecture::DecoderOnly => {
            ([inp.clone(), tgt.clone()].concat(), inp.len(), spec.inputs_length + spec.targets_length)
        }
    };
    let dt = out.decoder_target_tokens();
    let di = out.decoder_input_tokens();
    let w = out.decoder_loss_weights();
    if dt.len() != total || di.len() != total || w.len() != total {
        v.push(format!("lengths {} {} {} != {total}", dt.len(), di.len(), w.len()));
        return v;
    }
    for t in 0..total {
        let expect = seq.get(t).copied().unwrap_or(0);
        if dt[t] != expect {
            v.push(format!("target[{t}] = {} expected {expect}", dt[t]));
        }
        let shifted = if t == 0 { 0 } else { dt[t - 1] };
        if di[t] != shifted {
            v.push(format!("shift_right broken at {t}"));
        }
        let supervised = t >= n_in || spec.loss_on_inputs;
        let want_w = (dt[t] != 0 && supervised) as i32;
        if w[t] != want_w {
            v.push(format!("loss weight at {t} = {} expected {want_w}", w[t]));
        }
        if t >= seq.len() && (dt[t] != 0 || w[t] != 0) {
            v.push(format!("padding at {t} not zero"));
        }
    }
    if let ModelFeatures::EncDec { encoder_input_tokens, .. } = out {
        let mut want = inp.clone();
        want.resize(spec.inputs_length, 0);
        if *encoder_input_tokens != want {
            v.push("encoder inputs differ".into());
        }
    }
    v
}
