use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] hssfl::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}")]
    BadFile { path: PathBuf, detail: String },

    #[error("{0}")]
    Usage(String),

    #[error("no checkpoints under {0}; run `hssfl run` first")]
    MissingCheckpoints(PathBuf),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub fn bad_file(path: impl Into<PathBuf>, detail: impl ToString) -> CliError {
        CliError::BadFile {
            path: path.into(),
            detail: detail.to_string(),
        }
    }

    /// Short machine-readable category for the error report.
    pub fn kind(&self) -> &'static str {
        use hssfl::Error as E;
        match self {
            CliError::Core(e) => match root(e) {
                E::Config(_) | E::Unsupported(_) => "config",
                E::InsufficientProbes(_) => "insufficient_probes",
                E::Numerical { .. } | E::NonFinite(_) | E::Degenerate(_) => "numerical",
                E::Protocol(_) => "protocol",
                E::Parse { .. } => "parse",
                E::Io(_) => "io",
                _ => "internal",
            },
            CliError::Io { .. } => "io",
            CliError::BadFile { .. } => "parse",
            CliError::Usage(_) => "config",
            CliError::MissingCheckpoints(_) => "missing_checkpoints",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "config" => 2,
            _ => 1,
        }
    }
}

fn root(e: &hssfl::Error) -> &hssfl::Error {
    match e {
        hssfl::Error::Context { source, .. } => root(source),
        other => other,
    }
}
