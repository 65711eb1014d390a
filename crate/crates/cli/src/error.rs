use std::path::PathBuf;

use cap_core::CapError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: CapError,
    },

    #[error(transparent)]
    Core(#[from] CapError),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    fn core(&self) -> Option<&CapError> {
        match self {
            CliError::Usage(_) => None,
            CliError::File { source, .. } => Some(source),
            CliError::Core(e) => Some(e),
        }
    }

    /// 1 usage, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> u8 {
        match self.core() {
            None | Some(CapError::InvalidConfig(_)) => 1,
            Some(e) if e.is_numerical() => 3,
            Some(_) => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            1 => "usage",
            3 => "numerical",
            _ => "data",
        }
    }

    /// Single-line form: `error kind=<kind> code=<n> message=<text>`.
    pub fn line(&self) -> String {
        let message = self.to_string().replace(['\n', '\r'], " ");
        format!("error kind={} code={} message={}", self.kind(), self.exit_code(), message)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
