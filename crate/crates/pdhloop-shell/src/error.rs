use thiserror::Error;

#[derive(Debug, Error)]
pub enum ShellError {
    /// Input does not match the expected document shape or value ranges.
    #[error("{path}: {message}")]
    Validation { path: String, message: String },
    /// Input was well-formed but the computation failed.
    #[error(transparent)]
    Compute(#[from] pdhloop::Error),
    #[error("{0}")]
    Io(String),
}

impl ShellError {
    pub fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        ShellError::Validation { path: path.into(), message: message.into() }
    }

    /// Process exit status: 2 for bad input, 3 for failed computations.
    pub fn exit_code(&self) -> i32 {
        match self {
            ShellError::Validation { .. } | ShellError::Io(_) => 2,
            ShellError::Compute(e) => match e {
                pdhloop::Error::Parse { .. } | pdhloop::Error::Io(_) => 2,
                _ => 3,
            },
        }
    }
}

impl From<std::io::Error> for ShellError {
    fn from(e: std::io::Error) -> Self {
        ShellError::Io(e.to_string())
    }
}

pub type ShellResult<T> = std::result::Result<T, ShellError>;
