use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{} already exists; pass --force to overwrite", .0.display())]
    Exists(PathBuf),

    #[error("missing {what}: expected {}", path.display())]
    Missing { what: String, path: PathBuf },

    #[error(transparent)]
    Core(#[from] ancinet::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for data problems, 4 for numeric
    /// failures.
    pub fn exit_code(&self) -> u8 {
        use ancinet::Error as E;
        match self {
            CliError::Config(_) | CliError::Exists(_) => 2,
            CliError::Missing { .. } => 3,
            CliError::Core(e) => match e {
                E::Dimension { .. } | E::InvalidShape { .. } | E::Parameter(_) | E::Config(_) => 2,
                E::State(_) | E::DegenerateSample(_) | E::Format { .. } | E::Io { .. } => 3,
                E::NonFinite { .. } => 4,
            },
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Core(ancinet::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
