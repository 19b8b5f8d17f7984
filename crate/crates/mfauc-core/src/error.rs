use thiserror::Error;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("entry ({row}, {col}) at line {line} is outside the declared {m}x{n} matrix")]
    Bounds {
        line: usize,
        row: usize,
        col: usize,
        m: usize,
        n: usize,
    },

    #[error("duplicate entry ({row}, {col}) at line {line}")]
    DuplicateEntry { line: usize, row: usize, col: usize },

    #[error("invalid parameter `{name}`: {msg}")]
    InvalidParameter { name: &'static str, msg: String },

    #[error("user {user} has no {kind} items")]
    DegenerateUser { user: usize, kind: &'static str },

    #[error("filtering produced an empty matrix")]
    EmptyResult,

    #[error("training diverged at iteration {iteration} (non-finite or exploding values)")]
    Diverged { iteration: usize },

    #[error("metric is undefined: {0}")]
    UndefinedMetric(String),
}

impl Error {
    pub fn invalid(name: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
