use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::features::FeatureSpec;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

/// Immutable description of a finished cache. Its presence in a directory
/// marks the build as complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheManifest {
    pub format_version: u32,
    pub task_name: String,
    pub split: String,
    pub num_examples: u64,
    pub num_shards: u32,
    #[serde(with = "u64_decimal")]
    pub seed: u64,
    pub fingerprint: String,
    pub schema: Vec<FeatureSpec>,
}

// TOML integers are signed 64-bit; seeds use the full u64 range.
mod u64_decimal {
    use super::*;

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl CacheManifest {
    /// Number of records in shard `f` under modulo placement.
    pub fn shard_count(&self, shard: u32) -> u64 {
        shard_record_count(self.num_examples, self.num_shards, shard)
    }

    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let m: Self =
            toml::from_str(text).map_err(|e| Error::BadManifest { path: path.to_path_buf(), detail: e.to_string() })?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::BadManifest {
                path: path.to_path_buf(),
                detail: format!("unsupported format_version {}", m.format_version),
            });
        }
        if m.num_shards == 0 {
            return Err(Error::BadManifest { path: path.to_path_buf(), detail: "num_shards is 0".into() });
        }
        Ok(m)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::CacheMissing(dir.to_path_buf())),
            Err(e) => return Err(Error::io(path, e)),
        };
        Self::parse(&text, &path)
    }
}

/// `|{i in [0, n) : i mod f = shard}|`
pub fn shard_record_count(num_examples: u64, num_shards: u32, shard: u32) -> u64 {
    let f = num_shards as u64;
    let s = shard as u64;
    if s >= num_examples {
        0
    } else {
        (num_examples - s).div_ceil(f)
    }
}

pub fn shard_stem(shard: u32, num_shards: u32) -> String {
    format!("data-{shard:05}-of-{num_shards:05}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::DType;

    #[test]
    fn counts_by_modulo() {
        let c: Vec<u64> = (0..3).map(|f| shard_record_count(5, 3, f)).collect();
        assert_eq!(c, vec![2, 2, 1]);
        assert_eq!(shard_record_count(0, 4, 0), 0);
        assert_eq!(shard_record_count(2, 4, 3), 0);
        for n in 0..40u64 {
            for f in 1..7u32 {
                let total: u64 = (0..f).map(|s| shard_record_count(n, f, s)).sum();
                assert_eq!(total, n);
            }
        }
    }

    #[test]
    fn file_names() {
        assert_eq!(shard_stem(3, 16), "data-00003-of-00016");
    }

    #[test]
    fn text_round_trip_with_large_seed() {
        let m = CacheManifest {
            format_version: 1,
            task_name: "t".into(),
            split: "train".into(),
            num_examples: 8,
            num_shards: 2,
            seed: u64::MAX,
            fingerprint: "00ff00ff00ff00ff".into(),
            schema: vec![FeatureSpec::new("targets", DType::Int32).with_length(4)],
        };
        let text = m.to_text();
        assert!(text.starts_with("format_version = 1\n"));
        assert_eq!(CacheManifest::parse(&text, Path::new("m")).unwrap(), m);
    }
}
