use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch{}: {left:?} vs {right:?}", key.as_ref().map(|k| format!(" at `{k}`")).unwrap_or_default())]
    ShapeMismatch {
        key: Option<String>,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("arithmetic overflow: finite inputs produced a non-finite result in `{op}`")]
    Overflow { op: &'static str },

    #[error("coefficient must be finite, got {0}")]
    NonFiniteCoefficient(f64),

    #[error("vector norm is below 1e-12")]
    ZeroNorm,

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("unsupported dtype `{0}`")]
    Dtype(String),

    #[error("LoRA pairing error: {0}")]
    Pairing(String),

    #[error("LoRA rank error: {0}")]
    Rank(String),

    #[error("key sets differ (missing: {missing:?}, extra: {extra:?})")]
    KeySetMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },

    #[error("base fingerprint mismatch: vector was extracted against {expected}, base is {found}")]
    BaseMismatch { expected: String, found: String },

    #[error("vector key `{0}` does not exist in the base checkpoint")]
    UnknownKey(String),

    #[error("length mismatch: {vectors} vectors but {coefficients} coefficients")]
    LengthMismatch { vectors: usize, coefficients: usize },

    #[error("nothing to compose: empty vector list")]
    EmptyComposition,

    #[error("reference text is empty")]
    EmptyReference,

    #[error("every record was rejected by the filtering rules")]
    AllFiltered,

    #[error("training diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the environment (missing files, permissions)
    /// rather than of the inputs' content.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io { .. } => true,
            Error::Csv(e) => e.is_io_error(),
            Error::Json(e) => e.is_io(),
            _ => false,
        }
    }
}
