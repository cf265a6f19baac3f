use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure surface of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("config key `{key}` (line {line}): {msg}")]
    ConfigKey { key: String, line: usize, msg: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("range error: {0}")]
    Range(String),

    #[error("numeric error in {layer}: {msg}")]
    Numeric { layer: String, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("not a checkpoint (bad magic {0:?})")]
    NotACheckpoint([u8; 4]),

    #[error("checkpoint version {found} is newer than supported version {supported}")]
    Version { found: u32, supported: u32 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("FOV window [{z_lo}, {z_hi}] mm selects no slices")]
    EmptyFov { z_lo: f64, z_hi: f64 },

    #[error("bridge violation: {0}")]
    BridgeViolation(String),

    #[error("organ {0} absent from acquired labels")]
    OrganAbsent(i32),

    #[error("nothing to evaluate: {0}")]
    NothingToEvaluate(String),

    #[error("insufficient context: volume has {have} slices, need at least {need}")]
    InsufficientContext { have: usize, need: usize },

    #[error("missing prerequisite {path}: run `{command}` first")]
    Prerequisite { path: PathBuf, command: String },

    #[error("refusing to overwrite differing output {0} (use --force)")]
    WouldOverwrite(PathBuf),

    #[error("output directory {0} is locked by another run")]
    Locked(PathBuf),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn numeric(layer: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Numeric { layer: layer.into(), msg: msg.into() }
    }

    /// Process exit code used by the `scope` binary.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::ConfigKey { .. } | Error::BridgeViolation(_) => 2,
            Error::Prerequisite { .. } => 3,
            Error::Numeric { .. } => 4,
            _ => 5,
        }
    }
}
