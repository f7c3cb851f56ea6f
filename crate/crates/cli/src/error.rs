use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Flag values that are well-formed but unusable together.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Engine(#[from] fsq::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Engine(fsq::Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Engine(fsq::Error::Json(e))
    }
}

impl CliError {
    /// 2 usage, 3 data or compatibility, 4 I/O, 1 anything else.
    pub fn exit_code(&self) -> ExitCode {
        use fsq::Error as E;
        ExitCode::from(match self {
            CliError::Usage(_) | CliError::Engine(E::Config(_)) => 2,
            CliError::Engine(E::Data(_) | E::Decode { .. } | E::Compat(_) | E::Format(_) | E::Corrupt(_)) => 3,
            CliError::Engine(E::Io(_)) => 4,
            CliError::Engine(_) => 1,
        })
    }
}

pub type CliResult<T> = Result<T, CliError>;
