use serde::Serialize;
use thiserror::Error;

/// Process exit status of a failed run.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Serialize)]
struct ErrorTail<'a> {
    error: ErrorBody<'a>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    code: i32,
    kind: &'a str,
    message: String,
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numerical(_) => "numerical",
        }
    }

    /// Single-line JSON written as the last line of standard error.
    pub fn json_tail(&self) -> String {
        serde_json::to_string(&ErrorTail {
            error: ErrorBody {
                code: self.code(),
                kind: self.kind(),
                message: self.to_string(),
            },
        })
        .expect("serializable error")
    }
}

impl From<biasprior_core::Error> for CliError {
    fn from(e: biasprior_core::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

impl From<biasprior_nn::NnError> for CliError {
    fn from(e: biasprior_nn::NnError) -> Self {
        use biasprior_nn::NnError;
        match e {
            NnError::InvalidConfig(m) => CliError::Config(m),
            NnError::Core(c) => c.into(),
            e if e.is_numerical() => CliError::Numerical(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}
