use thiserror::Error;

/// Errors shared across the whole toolkit.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("backward target is not a scalar (len {0})")]
    NotScalar(usize),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("odd spatial dimension {0} (must be even)")]
    OddDimension(usize),
    #[error("invalid probability {0}")]
    InvalidProbability(f64),
    #[error("invalid temperature {0} (must be > 0)")]
    InvalidTemperature(f64),
    #[error("invalid alpha {0} (must be in [0,1])")]
    InvalidAlpha(f64),
    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("row {0} of probability tensor does not sum to 1 (sum = {1})")]
    NotStochastic(usize, f64),
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("label {0} out of range for {1} classes")]
    LabelOutOfRange(u32, usize),
    #[error("format error: {0}")]
    Format(String),
    #[error("sigma must be positive in every channel, got {0}")]
    ZeroSigma(f64),
    #[error("invalid range [{0}, {1}]")]
    InvalidRange(usize, usize),
    #[error("cannot apply label noise with a single class")]
    SingleClass,
    #[error("empty result: {0}")]
    EmptyResult(String),
    #[error("no annotation found for image id {0}")]
    MissingAnnotation(u64),
    #[error("malformed polygon ({0} vertices, need at least 3)")]
    MalformedPolygon(usize),
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("too many players: {0} (limit {1})")]
    TooManyPlayers(usize, usize),
    #[error("paired sample too long for exact enumeration: n = {0} > 25")]
    TooLong(usize),
    #[error("all paired differences are zero")]
    AllZeroDifferences,
    #[error("empty set: {0}")]
    EmptySet(&'static str),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("sample mismatch: rows come from different samples ({0} vs {1})")]
    SampleMismatch(String, String),
    #[error("head mismatch: student outputs {0} classes, teacher outputs {1}")]
    HeadMismatch(usize, usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty confusion matrix")]
    EmptyMatrix,
    #[error("malformed CSV: {0}")]
    MalformedCsv(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
