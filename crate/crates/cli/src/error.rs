use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("run {run} failed: {source}")]
    Runtime {
        run: String,
        #[source]
        source: became_core::Error,
    },

    #[error("assertion failed: {0}")]
    Assertion(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 1,
            CliError::Runtime { .. } => 2,
            CliError::Assertion(_) => 3,
        }
    }

    pub fn runtime(run: impl Into<String>, source: became_core::Error) -> Self {
        CliError::Runtime { run: run.into(), source }
    }
}
