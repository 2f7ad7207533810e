use std::io;
use std::path::PathBuf;

use icebench_core::attribution::AttributionError;
use icebench_core::corpus::CorpusError;
use icebench_core::icetest::IceError;
use icebench_core::operators::OperatorError;
use icebench_core::report::ReportError;
use icebench_core::scorer::{ModelError, ScorerError, TrainError};
use icebench_core::stats::StatsError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Corpus {
        path: PathBuf,
        #[source]
        source: CorpusError,
    },
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Ice(#[from] IceError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("{0}")]
    Table(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for bad configuration or input, 1 for failures during evaluation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Corpus { .. }
            | Error::Config(_)
            | Error::Attribution(_)
            | Error::Model(_)
            | Error::Operator(_)
            | Error::Table(_) => 2,
            Error::Scorer(ScorerError::ClassMismatch { .. } | ScorerError::Capability(_)) => 2,
            Error::Ice(IceError::Scorer(ScorerError::Capability(_))) => 2,
            Error::Train(_) | Error::Scorer(_) | Error::Ice(_) | Error::Report(_) | Error::Stats(_) => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
