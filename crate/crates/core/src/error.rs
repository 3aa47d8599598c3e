use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported feature: {0}")]
    UnsupportedFeature(String),

    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error("no georeference in {0} (no GeoTIFF tags and no world file)")]
    MissingGeoreference(PathBuf),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("region of length {len} is smaller than patch size {patch}")]
    RegionTooSmall { len: usize, patch: usize },

    #[error("dimensions {width}x{height} are not divisible by {factor}")]
    IndivisibleDimensions {
        width: usize,
        height: usize,
        factor: usize,
    },

    #[error("channel count {channels} is not divisible by {divisor}")]
    IndivisibleChannels { channels: usize, divisor: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("loss has no recorded computation to differentiate")]
    GraphMissing,

    #[error("trainable parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("dataset `{0}` is empty")]
    EmptyDataset(String),

    #[error("{0} is undefined (zero denominator)")]
    UndefinedMetric(&'static str),

    #[error("input is not binary: found value {0}")]
    NonBinaryInput(f64),

    #[error("ring would have fewer than 4 vertices after simplification")]
    DegenerateRing,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
