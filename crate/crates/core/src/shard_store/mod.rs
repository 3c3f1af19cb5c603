//! On-disk cache format: a manifest plus, per shard, a record file and a
//! flat offset index.
//!
//! Example `i` of an `F`-shard cache lives in shard `i mod F` at record
//! position `i div F`. The `.idx` file holds one u64-LE byte offset per
//! record, so any record is one positioned read away.

mod manifest;
mod record;
mod verify;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use manifest::{shard_record_count, shard_stem, CacheManifest, FORMAT_VERSION, MANIFEST_FILE};
pub use record::{
    crc32c, decode_payload, encode_payload, encode_record, parse_header, StoredExample, FRAME_HEADER_LEN,
};
pub use verify::{verify_cache, VerifyReport, Violation};

use crate::error::{Error, Result};

pub fn rec_path(dir: &Path, shard: u32, num_shards: u32) -> PathBuf {
    dir.join(format!("{}.rec", shard_stem(shard, num_shards)))
}

pub fn idx_path(dir: &Path, shard: u32, num_shards: u32) -> PathBuf {
    dir.join(format!("{}.idx", shard_stem(shard, num_shards)))
}

/// Single writer for one shard. Records must arrive in ascending cache
/// index order and belong to this shard.
pub struct ShardWriter {
    shard: u32,
    num_shards: u32,
    rec: BufWriter<File>,
    rec_path: PathBuf,
    idx_path: PathBuf,
    offsets: Vec<u64>,
    pos: u64,
    last_index: Option<u64>,
}

impl ShardWriter {
    pub fn create(dir: &Path, shard: u32, num_shards: u32) -> Result<Self> {
        let rec_path = rec_path(dir, shard, num_shards);
        let file = File::create(&rec_path).map_err(|e| Error::io(&rec_path, e))?;
        Ok(Self {
            shard,
            num_shards,
            rec: BufWriter::new(file),
            idx_path: idx_path(dir, shard, num_shards),
            rec_path,
            offsets: Vec::new(),
            pos: 0,
            last_index: None,
        })
    }

    pub fn push(&mut self, example: &StoredExample) -> Result<()> {
        self.push_payload(&encode_payload(example))
    }

    /// Append an already encoded payload (its first 8 bytes are the cache index).
    pub fn push_payload(&mut self, payload: &[u8]) -> Result<()> {
        let i = u64::from_le_bytes(payload[..8].try_into().expect("payload holds a cache index"));
        let out_of_order = self.last_index.is_some_and(|last| i <= last);
        if i % self.num_shards as u64 != self.shard as u64 || out_of_order {
            return Err(Error::IndexMismatch { cache_index: i, shard: self.shard, num_shards: self.num_shards });
        }
        let mut header = [0u8; FRAME_HEADER_LEN];
        header[..4].copy_from_slice(&(payload.len() as u32).to_le_bytes());
        header[4..].copy_from_slice(&crc32c(payload).to_le_bytes());
        let io = |e| Error::io(&self.rec_path, e);
        self.rec.write_all(&header).map_err(io)?;
        self.rec.write_all(payload).map_err(io)?;
        self.offsets.push(self.pos);
        self.pos += (FRAME_HEADER_LEN + payload.len()) as u64;
        self.last_index = Some(i);
        Ok(())
    }

    /// Flush the record file and write the index. Returns the record count.
    pub fn finish(mut self) -> Result<u64> {
        self.rec.flush().map_err(|e| Error::io(&self.rec_path, e))?;
        self.rec.get_ref().sync_all().map_err(|e| Error::io(&self.rec_path, e))?;
        let idx: Vec<u8> = self.offsets.iter().flat_map(|o| o.to_le_bytes()).collect();
        std::fs::write(&self.idx_path, idx).map_err(|e| Error::io(&self.idx_path, e))?;
        Ok(self.offsets.len() as u64)
    }
}

/// Write a whole shard in one call.
pub fn write_shard(dir: &Path, shard: u32, num_shards: u32, examples: &[StoredExample]) -> Result<u64> {
    let mut w = ShardWriter::create(dir, shard, num_shards)?;
    for ex in examples {
        w.push(ex)?;
    }
    w.finish()
}

/// Counters of record-payload IO, shared by every shard of a [`Cache`].
#[derive(Debug, Default)]
pub struct IoStats {
    payload_reads: AtomicU64,
    payload_bytes: AtomicU64,
}

impl IoStats {
    pub fn payload_reads(&self) -> u64 {
        self.payload_reads.load(Ordering::Relaxed)
    }

    pub fn payload_bytes(&self) -> u64 {
        self.payload_bytes.load(Ordering::Relaxed)
    }

    fn record(&self, bytes: usize) {
        self.payload_reads.fetch_add(1, Ordering::Relaxed);
        self.payload_bytes.fetch_add(bytes as u64, Ordering::Relaxed);
    }
}

/// Random-access reader for one shard. Reads are positioned (`pread`), so
/// a shard can be shared between threads.
#[derive(Debug)]
pub struct ShardReader {
    shard: u32,
    file: File,
    offsets: Vec<u64>,
    stats: Arc<IoStats>,
}

impl ShardReader {
    pub fn open(dir: &Path, shard: u32, num_shards: u32, stats: Arc<IoStats>) -> Result<Self> {
        let rp = rec_path(dir, shard, num_shards);
        let ip = idx_path(dir, shard, num_shards);
        let file = File::open(&rp).map_err(|e| Error::io(&rp, e))?;
        let idx = std::fs::read(&ip).map_err(|e| Error::io(&ip, e))?;
        if idx.len() % 8 != 0 {
            return Err(Error::CorruptRecord {
                shard,
                record: (idx.len() / 8) as u64,
                detail: format!("index length {} is not a multiple of 8", idx.len()),
            });
        }
        let offsets = idx.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { shard, file, offsets, stats })
    }

    pub fn len(&self) -> u64 {
        self.offsets.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn offset(&self, k: u64) -> Option<u64> {
        self.offsets.get(k as usize).copied()
    }

    /// Read, CRC-check and decode record `k`.
    pub fn read_record_at(&self, k: u64) -> Result<StoredExample> {
        let offset = self.offset(k).ok_or(Error::OutOfRange { shard: self.shard, record: k, count: self.len() })?;
        let corrupt = |detail: String| Error::CorruptRecord { shard: self.shard, record: k, detail };
        let mut header = [0u8; FRAME_HEADER_LEN];
        self.file.read_exact_at(&mut header, offset).map_err(|e| corrupt(format!("header unreadable: {e}")))?;
        let (len, crc) = parse_header(&header);
        let mut payload = vec![0u8; len as usize];
        self.file
            .read_exact_at(&mut payload, offset + FRAME_HEADER_LEN as u64)
            .map_err(|e| corrupt(format!("payload unreadable: {e}")))?;
        self.stats.record(payload.len() + FRAME_HEADER_LEN);
        let actual = crc32c(&payload);
        if actual != crc {
            return Err(corrupt(format!("crc {actual:08x} != stored {crc:08x}")));
        }
        decode_payload(&payload).map_err(corrupt)
    }
}

/// An opened, finished cache.
#[derive(Debug)]
pub struct Cache {
    dir: PathBuf,
    manifest: CacheManifest,
    shards: Vec<ShardReader>,
    stats: Arc<IoStats>,
}

impl Cache {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = CacheManifest::read(dir)?;
        let stats = Arc::new(IoStats::default());
        let shards = (0..manifest.num_shards)
            .map(|f| ShardReader::open(dir, f, manifest.num_shards, stats.clone()))
            .collect::<Result<Vec<_>>>()?;
        for (f, s) in shards.iter().enumerate() {
            let expected = manifest.shard_count(f as u32);
            if s.len() != expected {
                return Err(Error::CorruptRecord {
                    shard: f as u32,
                    record: s.len(),
                    detail: format!("index lists {} records, manifest implies {expected}", s.len()),
                });
            }
        }
        Ok(Self { dir: dir.to_path_buf(), manifest, shards, stats })
    }

    /// Open and check the manifest fingerprint against `expected`.
    pub fn open_checked(dir: &Path, expected_fingerprint: &str) -> Result<Self> {
        let cache = Self::open(dir)?;
        if cache.manifest.fingerprint != expected_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: expected_fingerprint.to_string(),
                found: cache.manifest.fingerprint.clone(),
            });
        }
        Ok(cache)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &CacheManifest {
        &self.manifest
    }

    pub fn shard(&self, f: u32) -> &ShardReader {
        &self.shards[f as usize]
    }

    pub fn stats(&self) -> &Arc<IoStats> {
        &self.stats
    }

    pub fn read_record_at(&self, shard: u32, k: u64) -> Result<StoredExample> {
        let s = self.shards.get(shard as usize).ok_or(Error::OutOfRange { shard, record: k, count: 0 })?;
        s.read_record_at(k)
    }

    /// Read by global cache index.
    pub fn read_index(&self, cache_index: u64) -> Result<StoredExample> {
        let f = self.manifest.num_shards as u64;
        self.read_record_at((cache_index % f) as u32, cache_index / f)
    }
}
