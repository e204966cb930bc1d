use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("inference did not converge within {0} sweeps")]
    NotConverged(usize),
}

impl CliError {
    /// 0 success, 2 input error, 3 non-convergence, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) | CliError::Io { .. } => 2,
            CliError::NotConverged(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}

impl From<gradmatch::Error> for CliError {
    fn from(e: gradmatch::Error) -> Self {
        use gradmatch::Error as E;
        match e {
            E::DimensionMismatch(_) | E::InvalidInput(_) | E::IndexOutOfRange(_) | E::Parse { .. } => CliError::Input(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
