use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("unsupported NIfTI datatype {code} in {path}")]
    UnsupportedDatatype { path: PathBuf, code: i16 },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("geometry mismatch for subject '{subject}': {detail}")]
    Geometry { subject: String, detail: String },

    #[error("no eligible lesion: {0}")]
    NoEligibleLesion(String),

    #[error("degenerate transform: lesion mask is empty after resampling")]
    DegenerateTransform,

    #[error("placement error: {0}")]
    Placement(String),

    #[error("likelihood map has no nonzero voxel")]
    EmptyMap,

    #[error("slice {slice}: inpainting mask covers the entire slice, no boundary seed")]
    NoBoundarySeed { slice: usize },

    #[error("provenance error: {0}")]
    Provenance(String),

    #[error("subject '{subject}': {source}")]
    Subject {
        subject: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }

    pub(crate) fn for_subject(self, subject: &str) -> Self {
        Error::Subject { subject: subject.to_string(), source: Box::new(self) }
    }

    /// Process exit code for the CLI: 2 config error, 3 data error, 4 runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Subject { source, .. } => source.exit_code(),
            Error::Config(_) | Error::InvalidParameter(_) => 2,
            Error::Io { .. }
            | Error::Format { .. }
            | Error::UnsupportedDatatype { .. }
            | Error::Manifest(_)
            | Error::Geometry { .. }
            | Error::Provenance(_)
            | Error::EmptyMap
            | Error::NoEligibleLesion(_) => 3,
            _ => 4,
        }
    }
}
