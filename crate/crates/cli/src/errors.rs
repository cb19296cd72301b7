use std::fmt;

/// Process-level failure classes, mapped onto exit codes in `main`.
///
/// Usage errors exit 1, data errors (unreadable or malformed files) exit 2,
/// numerical failures (fits or training that blow up) exit 3.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(format!("bad JSON: {e}"))
    }
}

impl From<dodti_core::dti::DtiError> for CliError {
    fn from(e: dodti_core::dti::DtiError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<dodti_core::metrics::MetricsError> for CliError {
    fn from(e: dodti_core::metrics::MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}
