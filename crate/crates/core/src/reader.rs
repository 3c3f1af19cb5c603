//! Deterministic, resumable, data-parallel example streams over caches.
//!
//! Reader `r` of `R` owns the shards `f` with `f mod R = r` (R must divide
//! the shard count), so its examples are exactly the cache indices
//! `i mod R = r`. The stream is the concatenation of per-epoch orders:
//!
//! * epoch 0 walks the owned shards round-robin in ascending shard id,
//!   records ascending, which is ascending cache index;
//! * epoch `e >= 1` orders the owned shards by `PRF(seed, e, f)` and
//!   permutes records inside shard `f` with a Fisher-Yates shuffle seeded
//!   by `PRF(seed, e, f, 0xE9)`, then walks them round-robin.
//!
//! Batches are cut every `batch_size` examples of that flat stream, so a
//! batch can straddle an epoch boundary and no example is dropped. Any
//! position is computable from the step number alone, which is what makes
//! [`Dataset::seek_to_step`] free of record IO.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::builder::fingerprint_task;
use crate::converter::{convert, ConverterSpec};
use crate::error::{Error, Result};
use crate::features::Features;
use crate::preprocess::{apply_op, runtime_seed};
use crate::prf::{permutation, prf_fold};
use crate::registry::Registry;
use crate::shard_store::{encode_payload, Cache, CacheManifest, IoStats, StoredExample};
use crate::task::{Op, TaskSpec};
use crate::vocab::Vocabulary;

const WITHIN_SHARD_TAG: u64 = 0xE9;

/// Directory of the cache for `task`/`split` under a cache root.
pub fn cache_dir(root: &Path, task: &str, split: &str) -> PathBuf {
    root.join(task).join(split)
}

/// Which shards a reader owns and how many records each holds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReaderPlan {
    pub reader_id: u32,
    pub num_readers: u32,
    pub num_shards: u32,
    /// `(shard, record count)` in ascending shard id.
    pub owned: Vec<(u32, u64)>,
}

impl ReaderPlan {
    pub fn new(manifest: &CacheManifest, reader_id: u32, num_readers: u32) -> Result<Self> {
        let f = manifest.num_shards;
        if num_readers == 0 || reader_id >= num_readers {
            return Err(Error::InvalidReaderOptions(format!("reader id {reader_id} not in [0, {num_readers})")));
        }
        if !f.is_multiple_of(num_readers) {
            return Err(Error::IndivisibleReaders { num_shards: f, num_readers });
        }
        let owned = (reader_id..f).step_by(num_readers as usize).map(|s| (s, manifest.shard_count(s))).collect();
        Ok(Self { reader_id, num_readers, num_shards: f, owned })
    }

    /// Examples this reader sees per epoch.
    pub fn per_epoch(&self) -> u64 {
        self.owned.iter().map(|&(_, c)| c).sum()
    }
}

/// Slot lookup for one epoch of one reader.
#[derive(Debug, Clone)]
pub struct EpochOrder {
    epoch: u64,
    seed: u64,
    /// Owned shards in visiting order.
    shards: Vec<(u32, u64)>,
    min_count: u64,
    /// Lazily built within-shard permutations, parallel to `shards`.
    perms: Vec<Option<Vec<u32>>>,
}

impl EpochOrder {
    pub fn new(plan: &ReaderPlan, seed: u64, epoch: u64) -> Self {
        let mut shards = plan.owned.clone();
        if epoch > 0 {
            shards.sort_by_key(|&(f, _)| (prf_fold(seed, &[epoch, f as u64]), f));
        }
        let min_count = shards.iter().map(|&(_, c)| c).min().unwrap_or(0);
        let perms = vec![None; shards.len()];
        Self { epoch, seed, shards, min_count, perms }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn len(&self) -> u64 {
        self.shards.iter().map(|&(_, c)| c).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(shard, record)` at position `j` of this epoch. Owned shard counts
    /// differ by at most one, so after `min_count` full rounds only the
    /// longer shards remain for one last partial round.
    pub fn slot(&mut self, j: u64) -> (u32, u64) {
        let m = self.shards.len() as u64;
        let full = self.min_count * m;
        let (pos, round) = if j < full {
            ((j % m) as usize, j / m)
        } else {
            let rem = (j - full) as usize;
            let pos = self
                .shards
                .iter()
                .enumerate()
                .filter(|(_, &(_, c))| c > self.min_count)
                .nth(rem)
                .map(|(p, _)| p)
                .expect("position within epoch");
            (pos, self.min_count)
        };
        let (shard, count) = self.shards[pos];
        if self.epoch == 0 {
            return (shard, round);
        }
        let (seed, epoch) = (self.seed, self.epoch);
        let perm = self.perms[pos].get_or_insert_with(|| {
            permutation(prf_fold(seed, &[epoch, shard as u64, WITHIN_SHARD_TAG]), count as usize)
        });
        (shard, perm[round as usize] as u64)
    }
}

/// Full `(shard, record)` order of epoch `e` for reader `r` of `R`.
pub fn epoch_order(e: u64, manifest: &CacheManifest, r: u32, num_readers: u32, seed: u64) -> Result<Vec<(u32, u64)>> {
    let plan = ReaderPlan::new(manifest, r, num_readers)?;
    let mut order = EpochOrder::new(&plan, seed, e);
    Ok((0..order.len()).map(|j| order.slot(j)).collect())
}

/// Deficit scheduler over normalized mixing rates.
///
/// Draw `t = p + 1` considers the tasks whose deficit `rate * t - consumed`
/// is at least `d = 1 / (2n - 2)` and, among them, picks the one whose next
/// example is due soonest, i.e. the smallest `(consumed + 1 - d) / rate`;
/// ties go to the lexicographically smallest name. This is Tijdeman's
/// chairman-assignment rule and keeps every `|consumed_k - rate_k * p|`
/// at most `1 - d`. Plain argmax-of-deficit can exceed 1 with five or more
/// skewed rates.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSchedule {
    names: Vec<String>,
    rates: Vec<f64>,
    counts: Vec<u64>,
    draws: u64,
}

impl MixtureSchedule {
    /// `rates` must be sorted by name and sum to 1, as returned by
    /// [`Registry::resolve_mixture`].
    pub fn new(rates: Vec<(String, f64)>) -> Self {
        let (names, rates): (Vec<_>, Vec<_>) = rates.into_iter().unzip();
        let counts = vec![0; names.len()];
        Self { names, rates, counts, draws: 0 }
    }

    /// Index of the next task; updates counts.
    pub fn next_index(&mut self) -> usize {
        let best = self.pick();
        self.counts[best] += 1;
        self.draws += 1;
        best
    }

    fn pick(&self) -> usize {
        let n = self.rates.len();
        if n == 1 {
            return 0;
        }
        let d = 1.0 / (2 * n - 2) as f64;
        let t = (self.draws + 1) as f64;
        let mut best: Option<(usize, f64)> = None;
        for (k, (&rate, &c)) in self.rates.iter().zip(&self.counts).enumerate() {
            // Small slack so rounding never empties the candidate set.
            if rate <= 0.0 || rate * t - (c as f64) < d - 1e-9 {
                continue;
            }
            let due = (c as f64 + 1.0 - d) / rate;
            if best.is_none_or(|(_, b)| due < b) {
                best = Some((k, due));
            }
        }
        best.map(|(k, _)| k).unwrap_or_else(|| {
            let deficit = |k: usize| self.rates[k] * t - self.counts[k] as f64;
            (0..n).fold(0, |b, k| if deficit(k) > deficit(b) { k } else { b })
        })
    }

    pub fn mixture_next(&mut self) -> &str {
        let k = self.next_index();
        &self.names[k]
    }

    /// Reset and replay `p` draws.
    pub fn replay_to(&mut self, p: u64) {
        self.counts.iter_mut().for_each(|c| *c = 0);
        self.draws = 0;
        for _ in 0..p {
            self.next_index();
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn draws(&self) -> u64 {
        self.draws
    }
}

#[derive(Debug, Clone)]
pub struct ReaderOptions {
    pub split: String,
    pub reader_id: u32,
    pub num_readers: u32,
    pub batch_size: usize,
    pub seed: u64,
    /// Global steps whose batches are consumed but never returned.
    pub skip_steps: BTreeSet<u64>,
    pub converter: Option<ConverterSpec>,
}

impl ReaderOptions {
    pub fn new(split: impl Into<String>, reader_id: u32, num_readers: u32, batch_size: usize) -> Self {
        Self {
            split: split.into(),
            reader_id,
            num_readers,
            batch_size,
            seed: 0,
            skip_steps: BTreeSet::new(),
            converter: None,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn converter(mut self, spec: ConverterSpec) -> Self {
        self.converter = Some(spec);
        self
    }

    pub fn skip_steps(mut self, steps: impl IntoIterator<Item = u64>) -> Self {
        self.skip_steps.extend(steps);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub task: String,
    pub cache_index: u64,
    pub epoch: u64,
    pub features: Features,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub step: u64,
    pub items: Vec<BatchItem>,
}

impl Batch {
    pub fn cache_indices(&self) -> Vec<u64> {
        self.items.iter().map(|i| i.cache_index).collect()
    }

    /// Canonical bytes for equality checks: per item the task name and
    /// the record payload encoding of its features.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.step.to_le_bytes().to_vec();
        for item in &self.items {
            out.extend_from_slice(&(item.task.len() as u16).to_le_bytes());
            out.extend_from_slice(item.task.as_bytes());
            out.extend_from_slice(&item.epoch.to_le_bytes());
            out.extend(encode_payload(&StoredExample::new(item.cache_index, item.features.clone())));
        }
        out
    }
}

/// Example-level stream of one task for one reader.
#[derive(Debug)]
struct TaskStream {
    spec: TaskSpec,
    vocabs: BTreeMap<String, Vocabulary>,
    cache: Cache,
    plan: ReaderPlan,
    seed: u64,
    per_epoch: u64,
    order: EpochOrder,
    consumed: u64,
    // With a converter attached, it owns padding and truncation.
    fit_lengths: bool,
}

impl TaskStream {
    fn open(registry: &Registry, root: &Path, task: &str, opts: &ReaderOptions) -> Result<Self> {
        let spec = registry.task(task)?.clone();
        if !spec.splits.contains(&opts.split) {
            return Err(Error::InvalidReaderOptions(format!("task `{task}` has no split `{}`", opts.split)));
        }
        let dir = cache_dir(root, task, &opts.split);
        let manifest = CacheManifest::read(&dir)?;
        let plan = ReaderPlan::new(&manifest, opts.reader_id, opts.num_readers)?;
        let expected = fingerprint_task(registry, &spec, manifest.seed, manifest.num_shards);
        let cache = Cache::open_checked(&dir, &expected)?;
        let per_epoch = plan.per_epoch();
        if per_epoch == 0 {
            return Err(Error::EmptyReader { reader_id: opts.reader_id });
        }
        let mut vocabs = BTreeMap::new();
        for (_, p) in spec.runtime_ops() {
            if let Op::Tokenize { vocab, .. } = &p.op {
                vocabs.insert(vocab.clone(), registry.vocab_or_err(vocab)?.clone());
            }
        }
        let order = EpochOrder::new(&plan, opts.seed, 0);
        let fit_lengths = opts.converter.is_none();
        Ok(Self { spec, vocabs, cache, plan, seed: opts.seed, per_epoch, order, consumed: 0, fit_lengths })
    }

    fn seek(&mut self, consumed: u64) {
        self.consumed = consumed;
        let epoch = consumed / self.per_epoch;
        if self.order.epoch() != epoch {
            self.order = EpochOrder::new(&self.plan, self.seed, epoch);
        }
    }

    fn next_example(&mut self) -> Result<BatchItem> {
        let epoch = self.consumed / self.per_epoch;
        let j = self.consumed % self.per_epoch;
        if self.order.epoch() != epoch {
            self.order = EpochOrder::new(&self.plan, self.seed, epoch);
        }
        let (shard, k) = self.order.slot(j);
        let StoredExample { cache_index, mut features } = self.cache.read_record_at(shard, k)?;
        for (op_index, p) in self.spec.runtime_ops() {
            let s = runtime_seed(self.seed, cache_index, epoch, op_index);
            apply_op(&p.op, &mut features, s, |v| self.vocabs.get(v).cloned())
                .map_err(|detail| Error::PreprocessorFailure { op_index, source_index: cache_index, detail })?;
        }
        for f in self.spec.schema.iter().filter(|_| self.fit_lengths) {
            if let (Some(len), Some(v)) = (f.fixed_length, features.get_mut(&f.name)) {
                v.fit_to(len as usize);
            }
        }
        self.consumed += 1;
        Ok(BatchItem { task: self.spec.name.clone(), cache_index, epoch, features })
    }
}

/// An open stream handle for one reader over a task or mixture.
#[derive(Debug)]
pub struct Dataset {
    name: String,
    streams: Vec<TaskStream>,
    schedule: Option<MixtureSchedule>,
    batch_size: usize,
    skip_steps: BTreeSet<u64>,
    converter: Option<ConverterSpec>,
    step: u64,
}

impl Dataset {
    /// Open `name` (task or mixture) from caches under `cache_root`.
    pub fn open(registry: &Registry, cache_root: &Path, name: &str, opts: ReaderOptions) -> Result<Self> {
        if opts.batch_size == 0 {
            return Err(Error::InvalidReaderOptions("batch size must be >= 1".into()));
        }
        if let Some(c) = &opts.converter {
            c.validate()?;
        }
        let (streams, schedule) = if registry.is_mixture(name) {
            let rates = registry.resolve_mixture(name)?;
            let streams = rates
                .iter()
                .map(|(task, _)| TaskStream::open(registry, cache_root, task, &opts))
                .collect::<Result<Vec<_>>>()?;
            (streams, Some(MixtureSchedule::new(rates)))
        } else {
            (vec![TaskStream::open(registry, cache_root, name, &opts)?], None)
        };
        Ok(Self {
            name: name.to_string(),
            streams,
            schedule,
            batch_size: opts.batch_size,
            skip_steps: opts.skip_steps,
            converter: opts.converter,
            step: 0,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Global step of the next batch.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Examples per epoch for this reader, per task.
    pub fn per_epoch_counts(&self) -> Vec<(String, u64)> {
        self.streams.iter().map(|s| (s.spec.name.clone(), s.per_epoch)).collect()
    }

    /// Shard payload reads across all underlying caches.
    pub fn payload_reads(&self) -> u64 {
        self.streams.iter().map(|s| s.cache.stats().payload_reads()).sum()
    }

    pub fn io_stats(&self) -> Vec<Arc<IoStats>> {
        self.streams.iter().map(|s| s.cache.stats().clone()).collect()
    }

    pub fn schedule(&self) -> Option<&MixtureSchedule> {
        self.schedule.as_ref()
    }

    /// Reposition so the next batch is global step `t`. Pure arithmetic:
    /// no record is read.
    pub fn seek_to_step(&mut self, t: u64) {
        self.step = t;
        let p = t * self.batch_size as u64;
        match &mut self.schedule {
            None => self.streams[0].seek(p),
            Some(schedule) => {
                schedule.replay_to(p);
                for (stream, &c) in self.streams.iter_mut().zip(schedule.counts()) {
                    stream.seek(c);
                }
            }
        }
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        while self.skip_steps.contains(&self.step) {
            self.seek_to_step(self.step + 1);
        }
        let mut items = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let k = self.schedule.as_mut().map_or(0, MixtureSchedule::next_index);
            let mut item = self.streams[k].next_example()?;
            if let Some(spec) = &self.converter {
                item.features = convert(&item.features, spec)?.into_features();
            }
            items.push(item);
        }
        let batch = Batch { step: self.step, items };
        self.step += 1;
        Ok(batch)
    }
}

impl Iterator for Dataset {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}
