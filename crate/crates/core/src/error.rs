use thiserror::Error;

use crate::sparse_grid::GridCoord;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("kernel factorization failed for {points} training points (jitter escalated to {max_jitter:e}){}", leaf_suffix(.leaf))]
    FactorizationFailure {
        points: usize,
        max_jitter: f64,
        leaf: Option<GridCoord>,
    },

    #[error("frame contains no points")]
    EmptyFrame,

    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("global field has no nodes")]
    EmptyField,

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("evaluation region contains no samples")]
    EmptyRegion,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn leaf_suffix(leaf: &Option<GridCoord>) -> String {
    match leaf {
        Some(c) => format!(" in leaf ({}, {}, {})", c.i, c.j, c.k),
        None => String::new(),
    }
}

impl Error {
    /// Stable identifier used in machine-readable error lines and HTTP bodies.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::FactorizationFailure { .. } => "factorization_failure",
            Error::EmptyFrame => "empty_frame",
            Error::InvalidPose(_) => "invalid_pose",
            Error::EmptyField => "empty_field",
            Error::EmptyInput(_) => "empty_input",
            Error::EmptyRegion => "empty_region",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Format(_) => "format",
            Error::Frame { source, .. } => source.kind(),
            Error::Io(_) => "io_failure",
        }
    }

    pub fn in_frame(self, frame: usize) -> Error {
        Error::Frame {
            frame,
            source: Box::new(self),
        }
    }
}
