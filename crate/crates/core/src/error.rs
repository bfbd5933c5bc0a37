use std::path::PathBuf;
use thiserror::Error;

/// Errors shared across the generation, training and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("ifs sampling exhausted {attempts} attempts without a valid system (bounds bug)")]
    ResampleExhausted { attempts: u32 },

    #[error("degenerate attractor: occupied fraction {occupied:.4} outside [{lo}, {hi}]")]
    DegenerateAttractor { occupied: f64, lo: f64, hi: f64 },

    #[error("{family:?} is not a statistical image family")]
    UnsupportedFamily { family: crate::synthgen::GeneratorFamily },

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("no scalar loss recorded on this graph")]
    NoLossRecorded,

    #[error("a scalar loss was already recorded on this graph")]
    LossAlreadyRecorded,

    #[error("zero-norm embedding at row {index}")]
    ZeroNormEmbedding { index: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: i64, classes: usize },

    #[error("missing labels: {0}")]
    MissingLabels(String),

    #[error("too few samples: need at least {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("shape bias indeterminate: no sample correct by either shape or texture")]
    Indeterminate,

    #[error("subsample produced no entries")]
    EmptyResult,

    #[error("invalid {what}: {why}")]
    Invalid { what: &'static str, why: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub fn invalid(what: &'static str, why: impl Into<String>) -> Self {
        Error::Invalid {
            what,
            why: why.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
