//! Offline cache build: load a task split, run cache-stage preprocessing
//! with per-example seeds, shuffle globally by a keyed sort, assign cache
//! indices and write modulo-sharded files.
//!
//! The build runs in two phases. Workers each take a contiguous range of
//! source indices and produce runs sorted by `(PRF(seed, source_index),
//! source_index)`. A single merge then walks all runs in key order; the
//! merge rank is the cache index. Because ranks come from keys and never
//! from worker scheduling, the output bytes do not depend on the number of
//! workers. The manifest is written last and marks the build complete.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use crate::error::{Error, Result};
use crate::features::{check_against_schema, FeatureValue, Features};
use crate::preprocess::apply_op;
use crate::prf::{example_seed, prf, prf_bytes};
use crate::registry::Registry;
use crate::shard_store::{
    encode_payload, parse_header, CacheManifest, ShardWriter, StoredExample, FORMAT_VERSION, FRAME_HEADER_LEN,
    MANIFEST_FILE,
};
use crate::task::{DataSourceSpec, SourceKind, TaskSpec};

/// Below this many examples runs stay in memory unless the config forces
/// the external path.
pub const IN_MEMORY_LIMIT: usize = 1_000_000;
const DEFAULT_RUN_SIZE: usize = 100_000;
const TMP_DIR: &str = "tmp";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShufflePath {
    /// In-memory below [`IN_MEMORY_LIMIT`], external runs above.
    #[default]
    Auto,
    InMemory,
    External,
}

#[derive(Debug, Clone)]
pub struct BuildConfig {
    pub task: String,
    pub split: String,
    pub seed: u64,
    pub num_shards: u32,
    pub num_workers: usize,
    pub output_dir: PathBuf,
    pub shuffle: ShufflePath,
    /// Records per sorted run on the external path.
    pub run_size: usize,
}

impl BuildConfig {
    pub fn new(task: impl Into<String>, split: impl Into<String>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            task: task.into(),
            split: split.into(),
            seed: 0,
            num_shards: 1,
            num_workers: 1,
            output_dir: output_dir.into(),
            shuffle: ShufflePath::Auto,
            run_size: DEFAULT_RUN_SIZE,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn num_shards(mut self, f: u32) -> Self {
        self.num_shards = f;
        self
    }

    pub fn num_workers(mut self, w: usize) -> Self {
        self.num_workers = w;
        self
    }

    pub fn shuffle(mut self, path: ShufflePath, run_size: usize) -> Self {
        self.shuffle = path;
        self.run_size = run_size;
        self
    }
}

/// 16-hex-digit fingerprint of everything that determines cache bytes:
/// task name, source kind, location and column mapping, each cache-stage
/// op in order, the seed and the shard count. Runtime-stage ops are left
/// out because they never touch the cache.
pub fn fingerprint_task(registry: &Registry, spec: &TaskSpec, seed: u64, num_shards: u32) -> String {
    let mut canon = String::new();
    canon.push_str(&format!("name={}\n", spec.name));
    canon.push_str(&format!("source.kind={}\n", spec.source.kind));
    canon.push_str(&format!("source.location={}\n", spec.source.location));
    for (col, feat) in spec.source.field_map() {
        canon.push_str(&format!("source.field={col}->{feat}\n"));
    }
    for (i, p) in spec.cache_ops() {
        canon.push_str(&format!("op[{i}]={}\n", p.descriptor(|v| registry.vocab_descriptor(v))));
    }
    let h = prf_bytes(0, canon.as_bytes());
    let h = prf(h, seed);
    let h = prf(h, num_shards as u64);
    format!("{h:016x}")
}

/// Read a split's raw examples in source order, with columns renamed per
/// the field mapping. Unmapped columns are dropped.
pub fn load_source(source: &DataSourceSpec, split: &str) -> Result<Vec<Features>> {
    let path = source.path_for_split(split);
    let unreadable = |detail: String| Error::SourceUnreadable { path: path.clone(), detail };
    let fields = source.field_map();
    match source.kind {
        SourceKind::TextLines | SourceKind::TsvPairs => {
            let data = std::fs::read(&path).map_err(|e| unreadable(e.to_string()))?;
            let mut lines: Vec<&[u8]> = data.split(|&b| b == b'\n').collect();
            if lines.last().is_some_and(|l| l.is_empty()) {
                lines.pop();
            }
            let mut out = Vec::with_capacity(lines.len());
            for (n, line) in lines.into_iter().enumerate() {
                let line = line.strip_suffix(b"\r").unwrap_or(line);
                let columns: Vec<(&str, &[u8])> = if source.kind == SourceKind::TextLines {
                    vec![("text", line)]
                } else {
                    let tab = line
                        .iter()
                        .position(|&b| b == b'\t')
                        .ok_or_else(|| unreadable(format!("line {} has no tab", n + 1)))?;
                    vec![("input", &line[..tab]), ("target", &line[tab + 1..])]
                };
                out.push(
                    columns
                        .into_iter()
                        .filter_map(|(col, v)| fields.get(col).map(|f| (f.clone(), FeatureValue::Bytes(v.to_vec()))))
                        .collect(),
                );
            }
            Ok(out)
        }
        SourceKind::RecordDir => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(&path)
                .map_err(|e| unreadable(e.to_string()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "rec"))
                .collect();
            files.sort();
            let mut out = Vec::new();
            for file in files {
                let data = std::fs::read(&file).map_err(|e| unreadable(e.to_string()))?;
                let mut pos = 0;
                while pos < data.len() {
                    let bad = |what: &str| Error::SourceUnreadable {
                        path: file.clone(),
                        detail: format!("{what} at byte {pos}"),
                    };
                    if data.len() - pos < FRAME_HEADER_LEN {
                        return Err(bad("truncated header"));
                    }
                    let (len, crc) = parse_header(data[pos..pos + FRAME_HEADER_LEN].try_into().unwrap());
                    let start = pos + FRAME_HEADER_LEN;
                    let end = start + len as usize;
                    if end > data.len() {
                        return Err(bad("truncated record"));
                    }
                    let payload = &data[start..end];
                    if crate::shard_store::crc32c(payload) != crc {
                        return Err(bad("crc mismatch"));
                    }
                    let ex = crate::shard_store::decode_payload(payload).map_err(|d| bad(&d))?;
                    out.push(if fields.is_empty() {
                        ex.features
                    } else {
                        ex.features.into_iter().filter_map(|(k, v)| fields.get(&k).map(|f| (f.clone(), v))).collect()
                    });
                    pos = end;
                }
            }
            Ok(out)
        }
    }
}

/// A preprocessed example waiting for its rank.
struct KeyedRecord {
    key: u64,
    source_index: u64,
    /// Encoded payload whose cache-index field is still zero.
    payload: Vec<u8>,
}

enum Run {
    Memory(std::vec::IntoIter<KeyedRecord>),
    File(BufReader<File>),
}

impl Run {
    fn next(&mut self) -> Result<Option<KeyedRecord>> {
        match self {
            Run::Memory(it) => Ok(it.next()),
            Run::File(r) => {
                let mut head = [0u8; 20];
                match r.read_exact(&mut head) {
                    Ok(()) => {}
                    Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
                    Err(e) => return Err(Error::io("sorted run", e)),
                }
                let key = u64::from_le_bytes(head[0..8].try_into().unwrap());
                let source_index = u64::from_le_bytes(head[8..16].try_into().unwrap());
                let len = u32::from_le_bytes(head[16..20].try_into().unwrap()) as usize;
                let mut payload = vec![0u8; len];
                r.read_exact(&mut payload).map_err(|e| Error::io("sorted run", e))?;
                Ok(Some(KeyedRecord { key, source_index, payload }))
            }
        }
    }
}

fn write_run(path: &Path, records: &[KeyedRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let io = |e| Error::io(path, e);
        w.write_all(&r.key.to_le_bytes()).map_err(io)?;
        w.write_all(&r.source_index.to_le_bytes()).map_err(io)?;
        w.write_all(&(r.payload.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&r.payload).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn check_output_dir(dir: &Path) -> Result<()> {
    match std::fs::read_dir(dir) {
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::io(dir, e)),
        Ok(mut entries) => {
            if entries.next().is_none() {
                Ok(())
            } else if dir.join(MANIFEST_FILE).exists() {
                Err(Error::DirNotEmpty(dir.to_path_buf()))
            } else {
                Err(Error::PartialBuildDetected(dir.to_path_buf()))
            }
        }
    }
}

/// Preprocess `range` of the source and cut it into sorted runs.
#[allow(clippy::too_many_arguments)]
fn preprocess_range(
    registry: &Registry,
    spec: &TaskSpec,
    seed: u64,
    raw: &[Features],
    first_index: u64,
    external: bool,
    run_size: usize,
    tmp: &Path,
    worker: usize,
) -> Result<Vec<Run>> {
    let cache_schema = spec.cache_schema();
    let ops: Vec<_> = spec.cache_ops().collect();
    let mut runs = Vec::new();
    let mut buf: Vec<KeyedRecord> = Vec::new();
    let flush = |buf: &mut Vec<KeyedRecord>, runs: &mut Vec<Run>| -> Result<()> {
        buf.sort_unstable_by_key(|r| (r.key, r.source_index));
        let records = std::mem::take(buf);
        if external {
            let path = tmp.join(format!("run-{worker:05}-{:05}.bin", runs.len()));
            write_run(&path, &records)?;
            let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
            runs.push(Run::File(BufReader::new(f)));
        } else {
            runs.push(Run::Memory(records.into_iter()));
        }
        Ok(())
    };
    for (offset, features) in raw.iter().enumerate() {
        let source_index = first_index + offset as u64;
        let mut features = features.clone();
        for &(op_index, p) in &ops {
            let s = example_seed(seed, source_index, op_index as u64);
            apply_op(&p.op, &mut features, s, |v| registry.vocab(v).cloned())
                .map_err(|detail| Error::PreprocessorFailure { op_index, source_index, detail })?;
        }
        check_against_schema(&features, &cache_schema).map_err(|detail| Error::PreprocessorFailure {
            op_index: ops.last().map_or(0, |o| o.0),
            source_index,
            detail,
        })?;
        let payload = encode_payload(&StoredExample::new(0, features));
        buf.push(KeyedRecord { key: prf(seed, source_index), source_index, payload });
        if buf.len() >= run_size {
            flush(&mut buf, &mut runs)?;
        }
    }
    if !buf.is_empty() {
        flush(&mut buf, &mut runs)?;
    }
    Ok(runs)
}

/// Build the cache described by `config` and return its manifest.
pub fn build_cache(registry: &Registry, config: &BuildConfig) -> Result<CacheManifest> {
    let spec = registry.task(&config.task)?;
    if !spec.splits.contains(&config.split) {
        return Err(Error::InvalidBuildConfig(format!("task `{}` has no split `{}`", spec.name, config.split)));
    }
    if config.num_shards == 0 {
        return Err(Error::InvalidBuildConfig("num_shards must be >= 1".into()));
    }
    if config.num_workers == 0 {
        return Err(Error::InvalidBuildConfig("num_workers must be >= 1".into()));
    }
    if config.run_size == 0 {
        return Err(Error::InvalidBuildConfig("run_size must be >= 1".into()));
    }
    let out = &config.output_dir;
    check_output_dir(out)?;

    let raw = load_source(&spec.source, &config.split)?;
    let n = raw.len();
    let external = match config.shuffle {
        ShufflePath::Auto => n >= IN_MEMORY_LIMIT,
        ShufflePath::InMemory => false,
        ShufflePath::External => true,
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let tmp = out.join(TMP_DIR);
    if external {
        std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }

    // Phase 1: workers over contiguous source ranges.
    let workers = config.num_workers.min(n.max(1));
    let chunk = n.div_ceil(workers).max(1);
    let results: Vec<Result<Vec<Run>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = raw
            .chunks(chunk)
            .enumerate()
            .map(|(w, part)| {
                let tmp = &tmp;
                scope.spawn(move || {
                    preprocess_range(
                        registry,
                        spec,
                        config.seed,
                        part,
                        (w * chunk) as u64,
                        external,
                        config.run_size,
                        tmp,
                        w,
                    )
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    drop(raw);
    let mut runs = Vec::new();
    for r in results {
        // Ranges are in source order, so the first error is the one with
        // the smallest source index.
        runs.extend(r?);
    }

    // Phase 2: merge in key order and hand records to shard writers.
    write_shards(out, config.num_shards, config.num_workers, runs)?;
    if external {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }

    let manifest = CacheManifest {
        format_version: FORMAT_VERSION,
        task_name: spec.name.clone(),
        split: config.split.clone(),
        num_examples: n as u64,
        num_shards: config.num_shards,
        seed: config.seed,
        fingerprint: fingerprint_task(registry, spec, config.seed, config.num_shards),
        schema: spec.cache_schema(),
    };
    let staged = out.join(format!("{MANIFEST_FILE}.partial"));
    std::fs::write(&staged, manifest.to_text()).map_err(|e| Error::io(&staged, e))?;
    let final_path = out.join(MANIFEST_FILE);
    std::fs::rename(&staged, &final_path).map_err(|e| Error::io(&final_path, e))?;
    Ok(manifest)
}

fn write_shards(out: &Path, num_shards: u32, num_workers: usize, mut runs: Vec<Run>) -> Result<()> {
    let mut heap = BinaryHeap::new();
    let mut heads: Vec<Option<KeyedRecord>> = Vec::with_capacity(runs.len());
    for (i, run) in runs.iter_mut().enumerate() {
        let head = run.next()?;
        if let Some(r) = &head {
            heap.push(Reverse((r.key, r.source_index, i)));
        }
        heads.push(head);
    }

    let writer_threads = (num_shards as usize).min(num_workers);
    let mut merged = |emit: &mut dyn FnMut(Vec<u8>) -> Result<()>| -> Result<()> {
        let mut rank = 0u64;
        while let Some(Reverse((_, _, i))) = heap.pop() {
            let mut rec = heads[i].take().expect("heap entry has a head");
            rec.payload[..8].copy_from_slice(&rank.to_le_bytes());
            emit(rec.payload)?;
            rank += 1;
            if let Some(next) = runs[i].next()? {
                heap.push(Reverse((next.key, next.source_index, i)));
                heads[i] = Some(next);
            }
        }
        Ok(())
    };

    if writer_threads <= 1 {
        let mut writers =
            (0..num_shards).map(|f| ShardWriter::create(out, f, num_shards)).collect::<Result<Vec<_>>>()?;
        merged(&mut |payload| {
            let i = u64::from_le_bytes(payload[..8].try_into().unwrap());
            writers[(i % num_shards as u64) as usize].push_payload(&payload)
        })?;
        for w in writers {
            w.finish()?;
        }
        return Ok(());
    }

    // Writer thread t owns shards f with f mod T = t.
    std::thread::scope(|scope| {
        let mut senders = Vec::with_capacity(writer_threads);
        let mut handles = Vec::with_capacity(writer_threads);
        for t in 0..writer_threads {
            let (tx, rx) = mpsc::sync_channel::<Vec<u8>>(1024);
            senders.push(tx);
            handles.push(scope.spawn(move || -> Result<()> {
                let owned: Vec<u32> = (0..num_shards).filter(|f| *f as usize % writer_threads == t).collect();
                let mut writers =
                    owned.iter().map(|&f| ShardWriter::create(out, f, num_shards)).collect::<Result<Vec<_>>>()?;
                for payload in rx {
                    let i = u64::from_le_bytes(payload[..8].try_into().unwrap());
                    let f = (i % num_shards as u64) as usize;
                    writers[f / writer_threads].push_payload(&payload)?;
                }
                for w in writers {
                    w.finish()?;
                }
                Ok(())
            }));
        }
        let merge_result = merged(&mut |payload| {
            let i = u64::from_le_bytes(payload[..8].try_into().unwrap());
            let f = (i % num_shards as u64) as usize;
            // A closed channel means the writer failed; its error is
            // reported from join below.
            let _ = senders[f % writer_threads].send(payload);
            Ok(())
        });
        drop(senders);
        let mut first_err = merge_result.err();
        for h in handles {
            if let Err(e) = h.join().expect("writer panicked") {
                first_err.get_or_insert(e);
            }
        }
        first_err.map_or(Ok(()), Err)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{DType, FeatureSpec};
    use crate::shard_store::{verify_cache, Cache, Violation};
    use crate::task::{Op, PreprocessorSpec};

    fn registry(dir: &Path, lines: usize) -> Registry {
        let text: String = (0..lines).map(|i| format!("Line {i}\n")).collect();
        std::fs::write(dir.join("src.txt"), text).unwrap();
        let mut r = Registry::default();
        r.register_task(TaskSpec {
            name: "toy".into(),
            source: DataSourceSpec::new(SourceKind::TextLines, "src.txt")
                .with_field("text", "targets")
                .with_base_dir(dir),
            preprocessors: vec![
                PreprocessorSpec::cache(Op::Lowercase { features: vec!["targets".into()] }),
                PreprocessorSpec::cache(Op::Tokenize { vocab: "byte_level".into(), features: vec!["targets".into()] }),
                PreprocessorSpec::cache(Op::AppendEos { features: vec!["targets".into()] }),
            ],
            schema: vec![FeatureSpec::new("targets", DType::Int32)],
            metrics: vec![],
            splits: ["train".to_string()].into(),
        })
        .unwrap();
        r
    }

    fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
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

    #[test]
    fn eight_lines_two_shards_rerun_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = registry(tmp.path(), 8);
        let cfg = |d: &str| BuildConfig::new("toy", "train", tmp.path().join(d)).seed(1).num_shards(2);
        let m = build_cache(&reg, &cfg("a")).unwrap();
        build_cache(&reg, &cfg("b")).unwrap();
        assert_eq!(m.num_examples, 8);
        assert_eq!((m.shard_count(0), m.shard_count(1)), (4, 4));
        assert_eq!(dir_bytes(&tmp.path().join("a")), dir_bytes(&tmp.path().join("b")));
        assert!(verify_cache(&tmp.path().join("a"), Some(&m.fingerprint)).is_ok());
        // Every source line shows up exactly once.
        let cache = Cache::open(&tmp.path().join("a")).unwrap();
        let mut texts: Vec<Vec<u8>> = (0..8)
            .map(|i| {
                let ex = cache.read_index(i).unwrap();
                let ids = ex.features["targets"].as_ids().unwrap();
                crate::vocab::Vocabulary::ByteLevel.decode(&ids).unwrap()
            })
            .collect();
        texts.sort();
        let want: Vec<Vec<u8>> = (0..8).map(|i| format!("line {i}").into_bytes()).collect();
        assert_eq!(texts, want);
    }

    #[test]
    fn five_over_three_shards() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = registry(tmp.path(), 5);
        let m = build_cache(&reg, &BuildConfig::new("toy", "train", tmp.path().join("c")).num_shards(3)).unwrap();
        let counts: Vec<u64> = (0..3).map(|f| m.shard_count(f)).collect();
        assert_eq!(counts, vec![2, 2, 1]);
        let cache = Cache::open(&tmp.path().join("c")).unwrap();
        assert_eq!((0..3).map(|f| cache.shard(f).len()).collect::<Vec<_>>(), counts);
    }

    #[test]
    fn permutation_matches_key_sort_oracle() {
        // Scratch evaluation of the PRF, independent of prf::prf.
        fn scratch_prf(k: u64, x: u64) -> u64 {
            let mut z = k ^ x.wrapping_add(0x9E3779B97F4A7C15);
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
            z ^ (z >> 31)
        }
        let mut order: Vec<u64> = (0..4).collect();
        order.sort_by_key(|&i| (scratch_prf(0, i), i));

        let tmp = tempfile::tempdir().unwrap();
        let reg = registry(tmp.path(), 4);
        build_cache(&reg, &BuildConfig::new("toy", "train", tmp.path().join("c")).seed(0)).unwrap();
        let cache = Cache::open(&tmp.path().join("c")).unwrap();
        for (cache_index, &source_index) in order.iter().enumerate() {
            let ids = cache.read_index(cache_index as u64).unwrap().features["targets"].as_ids().unwrap();
            let text = crate::vocab::Vocabulary::ByteLevel.decode(&ids).unwrap();
            assert_eq!(text, format!("line {source_index}").into_bytes());
        }
    }

    #[test]
    fn external_path_and_worker_counts_match() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = registry(tmp.path(), 257);
        let base = BuildConfig::new("toy", "train", tmp.path().join("ref")).seed(99).num_shards(4);
        build_cache(&reg, &base).unwrap();
        let reference = dir_bytes(&tmp.path().join("ref"));
        for (i, (workers, path)) in
            [(2, ShufflePath::External), (7, ShufflePath::InMemory), (3, ShufflePath::External)].into_iter().enumerate()
        {
            let out = tmp.path().join(format!("v{i}"));
            let mut cfg = base.clone().num_workers(workers).shuffle(path, 10);
            cfg.output_dir = out.clone();
            build_cache(&reg, &cfg).unwrap();
            assert_eq!(dir_bytes(&out), reference, "workers={workers} path={path:?}");
        }
    }

    #[test]
    fn output_dir_preconditions() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = registry(tmp.path(), 3);
        let out = tmp.path().join("c");
        build_cache(&reg, &BuildConfig::new("toy", "train", &out)).unwrap();
        assert!(matches!(build_cache(&reg, &BuildConfig::new("toy", "train", &out)), Err(Error::DirNotEmpty(_))));
        std::fs::remove_file(out.join(MANIFEST_FILE)).unwrap();
        assert!(matches!(
            build_cache(&reg, &BuildConfig::new("toy", "train", &out)),
            Err(Error::PartialBuildDetected(_))
        ));
        let bad_split = BuildConfig::new("toy", "test", tmp.path().join("d"));
        assert!(matches!(build_cache(&reg, &bad_split), Err(Error::InvalidBuildConfig(_))));
        let zero = BuildConfig::new("toy", "train", tmp.path().join("e")).num_shards(0);
        assert!(matches!(build_cache(&reg, &zero), Err(Error::InvalidBuildConfig(_))));
    }

    #[test]
    fn missing_source_is_unreadable() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = registry(tmp.path(), 3);
        std::fs::remove_file(tmp.path().join("src.txt")).unwrap();
        let r = build_cache(&reg, &BuildConfig::new("toy", "train", tmp.path().join("c")));
        assert!(matches!(r, Err(Error::SourceUnreadable { .. })));
    }

    #[test]
    fn preprocessor_failure_reports_position() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::write(tmp.path().join("w.txt"), "line\n").unwrap();
        std::fs::write(tmp.path().join("src.txt"), "line\nline\nnovel\n").unwrap();
        let mut reg = Registry::default();
        reg.register_vocab(
            "words",
            crate::vocab::Vocabulary::Table(
                crate::vocab::TokenTable::load(&tmp.path().join("w.txt"), "w.txt", false).unwrap(),
            ),
        )
        .unwrap();
        reg.register_task(TaskSpec {
            name: "strict".into(),
            source: DataSourceSpec::new(SourceKind::TextLines, "src.txt").with_base_dir(tmp.path()),
            preprocessors: vec![PreprocessorSpec::cache(Op::Tokenize {
                vocab: "words".into(),
                features: vec!["text".into()],
            })],
            schema: vec![FeatureSpec::new("text", DType::Int32)],
            metrics: vec![],
            splits: ["train".to_string()].into(),
        })
        .unwrap();
        let r = build_cache(&reg, &BuildConfig::new("strict", "train", tmp.path().join("c")).num_workers(2));
        match r {
            Err(Error::PreprocessorFailure { op_index: 0, source_index: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn fingerprint_sensitivity() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = registry(tmp.path(), 1);
        let spec = reg.task("toy").unwrap().clone();
        let fp = fingerprint_task(&reg, &spec, 5, 2);
        assert_eq!(fp.len(), 16);
        assert_eq!(fp, fingerprint_task(&reg, &spec, 5, 2));
        assert_ne!(fp, fingerprint_task(&reg, &spec, 6, 2));
        assert_ne!(fp, fingerprint_task(&reg, &spec, 5, 3));
        let mut swapped = spec.clone();
        swapped.preprocessors.swap(0, 1);
        assert_ne!(fp, fingerprint_task(&reg, &swapped, 5, 2));
        let mut with_runtime = spec.clone();
        with_runtime
            .preprocessors
            .push(PreprocessorSpec::runtime(Op::RandomSpanMask { feature: "targets".into(), rate: 0.1 }));
        assert_eq!(fp, fingerprint_task(&reg, &with_runtime, 5, 2));
    }

    #[test]
    fn verify_catches_missing_and_truncated_files() {
        let tmp = tempfile::tempdir().unwrap();
        let reg = registry(tmp.path(), 20);
        let out = tmp.path().join("c");
        build_cache(&reg, &BuildConfig::new("toy", "train", &out).num_shards(2)).unwrap();
        assert!(verify_cache(&out, None).is_ok());

        let idx = crate::shard_store::idx_path(&out, 1, 2);
        let saved = std::fs::read(&idx).unwrap();
        std::fs::remove_file(&idx).unwrap();
        let rep = verify_cache(&out, None);
        assert!(rep.violations.iter().any(|v| matches!(v, Violation::MissingFile { path } if *path == idx)));
        std::fs::write(&idx, saved).unwrap();

        let rec = crate::shard_store::rec_path(&out, 0, 2);
        let bytes = std::fs::read(&rec).unwrap();
        std::fs::write(&rec, &bytes[..bytes.len() - 3]).unwrap();
        let rep = verify_cache(&out, None);
        assert!(rep.violations.iter().any(|v| matches!(v, Violation::TruncatedRecord { shard: 0, record: 9 })));
        assert!(rep.violations.iter().any(|v| matches!(v, Violation::CountMismatch { shard: 0, .. })));
    }

    #[test]
    fn tsv_and_record_dir_sources() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::write(tmp.path().join("p.tsv"), "a\tb\r\nc\td\te\n").unwrap();
        let src = DataSourceSpec::new(SourceKind::TsvPairs, "p.tsv").with_base_dir(tmp.path());
        let rows = load_source(&src, "train").unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0]["targets"], FeatureValue::Bytes(b"b".to_vec()));
        assert_eq!(rows[1]["targets"], FeatureValue::Bytes(b"d\te".to_vec()));
        std::fs::write(tmp.path().join("bad.tsv"), "no tab here\n").unwrap();
        let bad = DataSourceSpec::new(SourceKind::TsvPairs, "bad.tsv").with_base_dir(tmp.path());
        assert!(matches!(load_source(&bad, "train"), Err(Error::SourceUnreadable { .. })));

        let recs = tmp.path().join("recs");
        std::fs::create_dir(&recs).unwrap();
        let exs: Vec<_> = (0..3u64)
            .map(|i| StoredExample::new(i, [("x".to_string(), FeatureValue::Int64(vec![i as i64]))].into()))
            .collect();
        crate::shard_store::write_shard(&recs, 0, 1, &exs).unwrap();
        let src = DataSourceSpec::new(SourceKind::RecordDir, "recs").with_base_dir(tmp.path()).with_field("x", "y");
        let rows = load_source(&src, "train").unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2]["y"], FeatureValue::Int64(vec![2]));
    }
}
