use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("missing {table} entry for pair {source_index}->{target_index}")]
    MissingPair {
        table: &'static str,
        source_index: usize,
        target_index: usize,
    },

    #[error("anchor {anchor} out of range for {n_frames} frames")]
    AnchorOutOfRange { anchor: usize, n_frames: usize },

    #[error("invalid value for `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("solver error: {0}")]
    Solver(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("bridge protocol error: {0}")]
    Protocol(String),

    #[error("bridge transport error: {0}")]
    Transport(String),

    #[error("denoiser returned an error: {0}")]
    Denoiser(String),

    #[error("parse error in {path} at byte {offset}: {message}", path = .path.display())]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("{path}: {message}", path = .path.display())]
    File { path: PathBuf, message: String },

    #[error("at timestep {t_index}{}: {source}", frame_suffix(.frame))]
    Stage {
        t_index: usize,
        frame: Option<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn frame_suffix(frame: &Option<usize>) -> String {
    match frame {
        Some(i) => format!(", frame {i}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::File {
            path: path.into(),
            message: message.to_string(),
        }
    }

    pub(crate) fn at_step(self, t_index: usize, frame: Option<usize>) -> Self {
        Error::Stage {
            t_index,
            frame,
            source: Box::new(self),
        }
    }
}
