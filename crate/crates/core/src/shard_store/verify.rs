use std::fmt;
use std::path::{Path, PathBuf};

use crate::features::check_against_schema;

use super::{crc32c, decode_payload, idx_path, parse_header, rec_path, CacheManifest, FRAME_HEADER_LEN};

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    ManifestUnreadable { detail: String },
    FingerprintMismatch { expected: String, found: String },
    MissingFile { path: PathBuf },
    BadIndexFile { shard: u32, detail: String },
    TruncatedRecord { shard: u32, record: u64 },
    CorruptRecord { shard: u32, record: u64, detail: String },
    IndexOffsetMismatch { shard: u32, record: u64, indexed: Option<u64>, actual: u64 },
    Misplaced { shard: u32, record: u64, cache_index: u64, expected: u64 },
    SchemaMismatch { shard: u32, record: u64, detail: String },
    CountMismatch { shard: u32, expected: u64, found: u64 },
    TotalMismatch { expected: u64, found: u64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            ManifestUnreadable { detail } => write!(f, "manifest unreadable: {detail}"),
            FingerprintMismatch { expected, found } => {
                write!(f, "fingerprint {found} does not match task fingerprint {expected}")
            }
            MissingFile { path } => write!(f, "missing file {}", path.display()),
            BadIndexFile { shard, detail } => write!(f, "shard {shard}: bad index file: {detail}"),
            TruncatedRecord { shard, record } => write!(f, "shard {shard}: record {record} truncated"),
            CorruptRecord { shard, record, detail } => write!(f, "shard {shard}: record {record} corrupt: {detail}"),
            IndexOffsetMismatch { shard, record, indexed, actual } => write!(
                f,
                "shard {shard}: record {record} at byte {actual} but index says {}",
                indexed.map_or("nothing".to_string(), |o| o.to_string())
            ),
            Misplaced { shard, record, cache_index, expected } => {
                write!(f, "shard {shard}: record {record} holds cache_index {cache_index}, expected {expected}")
            }
            SchemaMismatch { shard, record, detail } => write!(f, "shard {shard}: record {record}: {detail}"),
            CountMismatch { shard, expected, found } => {
                write!(f, "shard {shard}: {found} records, expected {expected}")
            }
            TotalMismatch { expected, found } => write!(f, "cache holds {found} records, manifest says {expected}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VerifyReport {
    pub records_checked: u64,
    pub violations: Vec<Violation>,
}

impl VerifyReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check a cache directory end to end, collecting every violation rather
/// than stopping at the first. When `expected_fingerprint` is given the
/// manifest fingerprint is compared against it too.
pub fn verify_cache(dir: &Path, expected_fingerprint: Option<&str>) -> VerifyReport {
    let mut report = VerifyReport::default();
    let manifest = match CacheManifest::read(dir) {
        Ok(m) => m,
        Err(e) => {
            report.violations.push(Violation::ManifestUnreadable { detail: e.to_string() });
            return report;
        }
    };
    if let Some(expected) = expected_fingerprint {
        if manifest.fingerprint != expected {
            report.violations.push(Violation::FingerprintMismatch {
                expected: expected.to_string(),
                found: manifest.fingerprint.clone(),
            });
        }
    }
    let mut total = 0u64;
    for shard in 0..manifest.num_shards {
        total += verify_shard(dir, &manifest, shard, &mut report);
    }
    if total != manifest.num_examples {
        report.violations.push(Violation::TotalMismatch { expected: manifest.num_examples, found: total });
    }
    report
}

/// Returns the number of well-framed records found in the shard.
fn verify_shard(dir: &Path, manifest: &CacheManifest, shard: u32, report: &mut VerifyReport) -> u64 {
    let f = manifest.num_shards;
    let rp = rec_path(dir, shard, f);
    let ip = idx_path(dir, shard, f);
    let mut missing = false;
    for p in [&rp, &ip] {
        if !p.is_file() {
            report.violations.push(Violation::MissingFile { path: p.clone() });
            missing = true;
        }
    }
    let data = match std::fs::read(&rp) {
        Ok(d) => d,
        Err(_) => return 0,
    };
    let offsets: Option<Vec<u64>> = if missing {
        None
    } else {
        match std::fs::read(&ip) {
            Ok(idx) if idx.len() % 8 == 0 => {
                Some(idx.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
            }
            Ok(idx) => {
                report.violations.push(Violation::BadIndexFile {
                    shard,
                    detail: format!("length {} is not a multiple of 8", idx.len()),
                });
                None
            }
            Err(e) => {
                report.violations.push(Violation::BadIndexFile { shard, detail: e.to_string() });
                None
            }
        }
    };

    let mut pos = 0usize;
    let mut k = 0u64;
    while pos < data.len() {
        if data.len() - pos < FRAME_HEADER_LEN {
            report.violations.push(Violation::TruncatedRecord { shard, record: k });
            break;
        }
        let (len, crc) = parse_header(data[pos..pos + FRAME_HEADER_LEN].try_into().unwrap());
        let start = pos + FRAME_HEADER_LEN;
        if data.len() - start < len as usize {
            report.violations.push(Violation::TruncatedRecord { shard, record: k });
            break;
        }
        if let Some(offsets) = &offsets {
            let indexed = offsets.get(k as usize).copied();
            if indexed != Some(pos as u64) {
                report.violations.push(Violation::IndexOffsetMismatch {
                    shard,
                    record: k,
                    indexed,
                    actual: pos as u64,
                });
            }
        }
        let payload = &data[start..start + len as usize];
        report.records_checked += 1;
        if crc32c(payload) != crc {
            report.violations.push(Violation::CorruptRecord { shard, record: k, detail: "crc mismatch".into() });
        } else {
            match decode_payload(payload) {
                Err(detail) => report.violations.push(Violation::CorruptRecord { shard, record: k, detail }),
                Ok(ex) => {
                    let expected = k * f as u64 + shard as u64;
                    if ex.cache_index != expected {
                        report.violations.push(Violation::Misplaced {
                            shard,
                            record: k,
                            cache_index: ex.cache_index,
                            expected,
                        });
                    }
                    if let Err(detail) = check_against_schema(&ex.features, &manifest.schema) {
                        report.violations.push(Violation::SchemaMismatch { shard, record: k, detail });
                    }
                }
            }
        }
        pos = start + len as usize;
        k += 1;
    }

    if let Some(offsets) = &offsets {
        if offsets.len() as u64 != k {
            report
                .violations
                .push(Violation::BadIndexFile { shard, detail: format!("{} offsets for {k} records", offsets.len()) });
        }
    }
    let expected = manifest.shard_count(shard);
    if k != expected {
        report.violations.push(Violation::CountMismatch { shard, expected, found: k });
    }
    k
}
