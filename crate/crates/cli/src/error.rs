use std::io;
use std::path::Path;

use bsap_core::embstore::EmbError;
use bsap_core::evalkit::EvalError;
use thiserror::Error;

/// Exit status 1: bad flags, bad config, missing files.
pub const EXIT_USAGE: i32 = 1;
/// Exit status 2: input files exist but their contents are inconsistent.
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
        }
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }
}

pub(crate) fn io_error(path: &Path, err: io::Error) -> CliError {
    let msg = format!("{}: {err}", path.display());
    if err.kind() == io::ErrorKind::NotFound {
        CliError::Usage(msg)
    } else {
        CliError::Data(msg)
    }
}

pub(crate) fn emb_error(path: &Path, err: EmbError) -> CliError {
    match err {
        EmbError::IoFailure { source, .. } => io_error(path, source),
        EmbError::Json { source, .. } => {
            CliError::Data(format!("{}:{}: {source}", path.display(), source.line()))
        }
        other => CliError::Data(format!("{}: {other}", path.display())),
    }
}

pub(crate) fn eval_error(path: &Path, err: EvalError) -> CliError {
    match err {
        // already carries path and line
        e @ EvalError::Parse { .. } => CliError::Data(e.to_string()),
        other => CliError::Data(format!("{}: {other}", path.display())),
    }
}
