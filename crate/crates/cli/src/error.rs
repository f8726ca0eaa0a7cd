use std::fmt;

/// A failed run and the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    /// A check the command was asked to make did not hold (exit 1).
    Failed(String),
    /// Bad flags, configuration or output location (exit 2).
    Usage(String),
    /// Missing, unreadable or inconsistent input data (exit 3).
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Failed(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Failed(m) | CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

impl From<linmatch::Error> for CliError {
    fn from(e: linmatch::Error) -> Self {
        match e {
            linmatch::Error::Config(_) => CliError::Usage(e.to_string()),
            linmatch::Error::Diverged { .. } => CliError::Failed(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

/// Reads an input, reporting any failure as a data error that names the file.
pub fn input<T>(path: &std::path::Path, what: &str, r: linmatch::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| match e {
        linmatch::Error::Io(io) => CliError::Data(format!("cannot read {what} {}: {io}", path.display())),
        other => CliError::Data(other.to_string()),
    })
}
