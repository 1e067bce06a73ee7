use thiserror::Error;

/// Errors raised by the GP toolkit.
///
/// The variants map onto the CLI exit codes: input errors are 1, numerical and
/// training errors are 2, procedure errors are 3.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("input error: {0}")]
    Input(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("training error at iteration {iteration}: {message}")]
    Training { iteration: usize, message: String },
    #[error("procedure error: {0}")]
    Procedure(String),
}

impl GpError {
    pub fn input(msg: impl Into<String>) -> Self {
        GpError::Input(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        GpError::Numerical(msg.into())
    }

    pub fn procedure(msg: impl Into<String>) -> Self {
        GpError::Procedure(msg.into())
    }

    /// Process exit code associated with the error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            GpError::Input(_) => 1,
            GpError::Numerical(_) | GpError::Training { .. } => 2,
            GpError::Procedure(_) => 3,
        }
    }

    /// Prefixes the message with a stage label, keeping the error class.
    pub fn in_stage(self, stage: &str) -> Self {
        match self {
            GpError::Input(m) => GpError::Input(format!("{stage}: {m}")),
            GpError::Numerical(m) => GpError::Numerical(format!("{stage}: {m}")),
            GpError::Training { iteration, message } => GpError::Training {
                iteration,
                message: format!("{stage}: {message}"),
            },
            GpError::Procedure(m) => GpError::Procedure(format!("{stage}: {m}")),
        }
    }
}

pub type Result<T> = std::result::Result<T, GpError>;
