use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot ingest {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    #[error("melody is empty after quantization")]
    EmptyMelody,

    #[error("unsupported meter {numerator}/{denominator} (only 4/4 is supported)")]
    UnsupportedMeter { numerator: u8, denominator: u8 },

    #[error("invalid token sequence: {0}")]
    InvalidTokens(String),

    #[error("pitch {pitch} shifted by {semitones} leaves the MIDI range")]
    PitchOutOfRange { pitch: u8, semitones: i32 },

    #[error("invalid chord annotation at line {line}: {text:?}")]
    Chord { line: usize, text: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("negative pool holds {available} candidates but {requested} were requested")]
    InsufficientPool { available: usize, requested: usize },

    #[error("unknown parameter group {0:?}")]
    UnknownGroup(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("dataset cache {path}: {reason}")]
    Cache { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("phase {phase} requires a completed {missing} checkpoint")]
    MissingPrerequisite { phase: String, missing: String },

    #[error("training diverged in {phase} at epoch {epoch}: {detail}")]
    Diverged {
        phase: String,
        epoch: usize,
        detail: String,
    },

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

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 1,
            Error::Io { .. }
            | Error::Ingest { .. }
            | Error::EmptyMelody
            | Error::UnsupportedMeter { .. }
            | Error::InvalidTokens(_)
            | Error::PitchOutOfRange { .. }
            | Error::Chord { .. }
            | Error::Cache { .. }
            | Error::Json(_) => 2,
            Error::Shape(_)
            | Error::Numerical(_)
            | Error::InsufficientPool { .. }
            | Error::UnknownGroup(_)
            | Error::Checkpoint { .. }
            | Error::MissingPrerequisite { .. }
            | Error::Diverged { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
