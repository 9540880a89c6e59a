use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FuseError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FuseError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("tensor {name}: {reason}")]
    TensorMismatch { name: String, reason: String },

    #[error("duplicate tensor name: {0}")]
    DuplicateName(String),

    #[error("unpaired factor: {0}")]
    UnpairedFactor(String),

    #[error("unclassifiable tensor name: {0}")]
    Unclassifiable(String),

    #[error("non-finite entry in {0}")]
    NonFinite(String),

    #[error("dimension mismatch: {0}")]
    Shape(String),

    #[error("layer {layer} out of range for depth {depth}")]
    LayerOutOfRange { layer: usize, depth: usize },

    #[error("svd did not converge within {sweeps} sweeps")]
    SvdNoConvergence { sweeps: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("no source tokens in context")]
    NoSourceTokens,

    #[error("no TargetB tokens in context")]
    NoTargetB,

    #[error("sequence length {len} exceeds max positions {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("nothing fuseable: no module group has a target/source match")]
    NothingFuseable,

    #[error("training aborted: {0}")]
    TrainingAbort(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl FuseError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FuseError::Io {
            path: path.into(),
            source,
        }
    }
}
