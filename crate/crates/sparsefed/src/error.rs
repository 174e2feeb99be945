use std::path::PathBuf;

/// Failures of a command, each with a fixed process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Invalid configuration, arguments or input data.
    #[error("config error: {0}")]
    Config(String),
    /// The run stopped early because training diverged or a defense became
    /// infeasible. Artifacts up to that round are still written.
    #[error("did not converge at round {round}: {reason}")]
    Dnc { round: usize, reason: String },
    /// Anything else: output IO failures, simulation bugs.
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Dnc { .. } => 2,
            CliError::Internal(_) => 3,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Internal(format!("{}: {e}", path.display()))
    }
}

/// Simulation-core errors raised while resolving a configuration.
pub fn config_err(e: sparsefed_core::Error) -> CliError {
    CliError::Config(e.to_string())
}

/// Simulation-core errors raised while running.
pub fn run_err(e: sparsefed_core::Error) -> CliError {
    use sparsefed_core::Error as E;
    match e {
        E::Parameter(_) | E::DimensionMismatch { .. } => CliError::Config(e.to_string()),
        other => CliError::Internal(other.to_string()),
    }
}

/// A data file that does not match its format.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{path}: {message} (byte offset {offset})", path = path.display())]
pub struct FormatError {
    pub path: PathBuf,
    pub offset: u64,
    pub message: String,
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::Config(e.to_string())
    }
}
