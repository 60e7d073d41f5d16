use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Argument outside the domain where the model is defined.
    #[error("domain error: {0}")]
    Domain(String),
    /// 1+α or 1-t vanished at the evaluated frequency.
    #[error("singular: {0}")]
    Singular(String),
    #[error("{f_hz} Hz lies outside the tabulated range [{lo_hz}, {hi_hz}] Hz")]
    Extrapolation { f_hz: f64, lo_hz: f64, hi_hz: f64 },
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("fit failed: {0}")]
    FitFailure(String),
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
