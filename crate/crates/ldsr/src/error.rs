//! Crate-wide error type and the process exit codes used by the CLI.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("source image too small: need {need_h}x{need_w}, have {have_h}x{have_w}")]
    InsufficientSource {
        need_h: usize,
        need_w: usize,
        have_h: usize,
        have_w: usize,
    },

    #[error("config error (line {line}): {msg}")]
    Config { line: usize, msg: String },

    #[error("checkpoint integrity error: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint is missing required tensors: {}", .0.join(", "))]
    MissingTensors(Vec<String>),

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("png error: {0}")]
    Png(String),
}

impl Error {
    /// Exit code contract: 0 success, 2 invalid arguments, 3 checkpoint or
    /// data integrity, 4 runtime numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_)
            | Error::InvalidArgument(_)
            | Error::Domain(_)
            | Error::EmptyDataset(_)
            | Error::InsufficientSource { .. }
            | Error::Config { .. } => 2,
            Error::Checkpoint(_)
            | Error::VersionMismatch { .. }
            | Error::MissingTensors(_)
            | Error::Io(_)
            | Error::Png(_) => 3,
            Error::Diverged { .. } => 4,
        }
    }
}
