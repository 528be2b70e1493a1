use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments or configuration; exit code 1.
    #[error("{0}")]
    Usage(String),
    /// A pipeline step failed; exit code 2.
    #[error("step {step} failed: {message}")]
    Step { step: String, message: String },
}

impl CliError {
    pub fn step(step: impl Into<String>, message: impl ToString) -> Self {
        CliError::Step { step: step.into(), message: message.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Step { .. } => 2,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
