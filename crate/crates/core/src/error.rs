use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("i/o error on {path}: {source}")]
    IoAt {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    // tensor blob container
    #[error("bad magic bytes {0:?}, expected \"STEN\"")]
    BadMagic([u8; 4]),
    #[error("unsupported tensor blob version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported tensor dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("truncated tensor blob: expected {expected} bytes of {what}, found {found}")]
    Truncated {
        what: &'static str,
        expected: u64,
        found: u64,
    },
    #[error("dims {dims:?} describe {expected} elements but payload holds {actual}")]
    DimensionMismatch {
        dims: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    #[error("shape mismatch for {what}: expected {expected:?}, got {actual:?}")]
    Shape {
        what: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid ladder: {0}")]
    Ladder(String),
    #[error("unknown resolution {0:?}")]
    UnknownResolution(String),
    #[error("ladder index {index} out of range for {levels} levels")]
    InvalidLevel { index: usize, levels: usize },

    #[error("clip {clip_id:?} setting {setting:?} is missing ladder level(s) {missing:?}")]
    IncompleteLadder {
        clip_id: String,
        setting: String,
        missing: Vec<String>,
    },
    #[error("duplicate quality entry for clip {clip_id:?} setting {setting:?} at {resolution}")]
    DuplicateEntry {
        clip_id: String,
        setting: String,
        resolution: String,
    },
    #[error("jod {value} for clip {clip_id:?} is outside [0, 10]")]
    JodOutOfRange { clip_id: String, value: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("missing quality entry for clip {clip_id:?} setting {setting:?}")]
    MissingQuality { clip_id: String, setting: String },

    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("all sampling weights are zero")]
    ZeroWeights,
    #[error("clip {0:?} has no label")]
    Unlabeled(String),

    #[error("crop of {size} does not fit a {height}x{width} frame")]
    CropTooLarge {
        size: usize,
        height: usize,
        width: usize,
    },
    #[error("unknown descriptor provider {0:?}")]
    UnknownProvider(String),

    #[error("model file format: {0}")]
    ModelFormat(String),
    #[error("model config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("corrupt parameter blob for {name}: {source}")]
    CorruptBlob {
        name: String,
        #[source]
        source: Box<Error>,
    },

    #[error("controller: {0}")]
    Controller(String),
    #[error("sequence of {steps} steps is too long for exhaustive search (max {max})")]
    TooManySteps { steps: usize, max: usize },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io_at(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::IoAt {
            path: path.into(),
            source,
        }
    }
}
