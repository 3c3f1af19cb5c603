use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("name `{0}` is already registered")]
    DuplicateName(String),
    #[error("invalid spec for `{name}`: {reason}")]
    InvalidSpec { name: String, reason: String },
    #[error("`{0}` is not registered")]
    NotFound(String),
    #[error("mixture cycle detected: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("unknown token `{0}` and vocabulary has no unk fallback")]
    UnknownToken(String),
    #[error("token id {id} outside vocabulary of size {size}")]
    InvalidTokenId { id: i64, size: u32 },
    #[error("config error: {0}")]
    Config(String),

    #[error("example {cache_index} does not belong in shard {shard} of {num_shards}")]
    IndexMismatch { cache_index: u64, shard: u32, num_shards: u32 },
    #[error("corrupt record {record} in shard {shard}: {detail}")]
    CorruptRecord { shard: u32, record: u64, detail: String },
    #[error("record {record} out of range for shard {shard} with {count} records")]
    OutOfRange { shard: u32, record: u64, count: u64 },
    #[error("malformed manifest {path}: {detail}")]
    BadManifest { path: PathBuf, detail: String },

    #[error("source unreadable: {path}: {detail}")]
    SourceUnreadable { path: PathBuf, detail: String },
    #[error("preprocessor {op_index} failed on source example {source_index}: {detail}")]
    PreprocessorFailure { op_index: usize, source_index: u64, detail: String },
    #[error("output dir {0} has files but no manifest; a previous build did not finish")]
    PartialBuildDetected(PathBuf),
    #[error("output dir {0} already holds a finished cache")]
    DirNotEmpty(PathBuf),
    #[error("invalid build config: {0}")]
    InvalidBuildConfig(String),

    #[error("no cache at {0}")]
    CacheMissing(PathBuf),
    #[error("cache fingerprint {found} does not match task fingerprint {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("{num_readers} readers do not evenly divide {num_shards} shards")]
    IndivisibleReaders { num_shards: u32, num_readers: u32 },
    #[error("invalid reader options: {0}")]
    InvalidReaderOptions(String),
    #[error("reader {reader_id} owns no examples")]
    EmptyReader { reader_id: u32 },

    #[error("missing feature `{0}`")]
    MissingFeature(String),
    #[error("negative token id {id} in feature `{feature}`")]
    NegativeId { feature: String, id: i64 },
    #[error("feature `{0}` is not an integer sequence")]
    NotIntegerFeature(String),

    #[error("missing predictions for cache indices {0:?}")]
    MissingPredictions(Vec<u64>),
    #[error("bad predictions: {0}")]
    BadPredictions(String),
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),

    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 2 for usage and validation problems,
    /// 3 for runtime, IO and cache problems.
    pub fn exit_code(&self) -> i32 {
        use Error::*;
        match self {
            DuplicateName(_)
            | InvalidSpec { .. }
            | NotFound(_)
            | CycleDetected(_)
            | Config(_)
            | UnknownToken(_)
            | InvalidTokenId { .. }
            | PartialBuildDetected(_)
            | DirNotEmpty(_)
            | InvalidBuildConfig(_)
            | IndivisibleReaders { .. }
            | InvalidReaderOptions(_)
            | MissingFeature(_)
            | NegativeId { .. }
            | NotIntegerFeature(_)
            | MissingPredictions(_)
            | BadPredictions(_)
            | UnknownMetric(_)
            | IndexMismatch { .. } => 2,
            CorruptRecord { .. }
            | OutOfRange { .. }
            | BadManifest { .. }
            | SourceUnreadable { .. }
            | PreprocessorFailure { .. }
            | CacheMissing(_)
            | FingerprintMismatch { .. }
            | EmptyReader { .. }
            | Io { .. } => 3,
        }
    }
}
