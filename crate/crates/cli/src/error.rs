use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    /// Process exit status: 2 for invalid input, 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

/// Module errors raised while assembling a scenario are configuration problems.
pub(crate) fn invalid(context: &str) -> impl Fn(metamorph::Error) -> CliError + '_ {
    move |e| CliError::validation(format!("{context}: {e}"))
}

pub(crate) fn failed(context: &str) -> impl Fn(metamorph::Error) -> CliError + '_ {
    move |e| CliError::runtime(format!("{context}: {e}"))
}

pub(crate) fn io(context: &std::path::Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::runtime(format!("{}: {e}", context.display()))
}
