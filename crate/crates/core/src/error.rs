use thiserror::Error;

/// Every failure the library can report.
///
/// The variants map onto the process exit codes used by the command-line
/// front-end (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numerical abort: {0}")]
    NonFinite(String),

    #[error("composition conflict: {0}")]
    Composition(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// 0 success, 2 config, 3 data, 4 numerical abort, 5 composition conflict.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Contract(_) | Error::Shape { .. } => 2,
            Error::Data(_) | Error::Input(_) | Error::Io(_) | Error::Json(_) | Error::Checkpoint(_) => 3,
            Error::NonFinite(_) => 4,
            Error::Composition(_) => 5,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
