use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Parameter vector or scheme inconsistent with each other.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad user input; `line` is 1-based when the input came from a file.
    #[error("input error{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Input { line: Option<usize>, message: String },

    /// No finite estimate exists (e.g. every match count is zero).
    #[error("boundary error: {0}")]
    Boundary(String),

    /// Iterative solver ran out of iterations.
    #[error("solver did not converge after {iterations} iterations (gradient sup-norm {grad_norm:.3e}): {context}")]
    Solver { context: String, iterations: usize, grad_norm: f64, last_iterate: Vec<f64> },

    #[error("numerical error: {0}")]
    Numerical(String),

    /// Request refused because it is outside what the routine supports.
    #[error("refused: {0}")]
    Refused(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn input(message: impl Into<String>) -> Self {
        Error::Input { line: None, message: message.into() }
    }

    pub(crate) fn input_at(line: usize, message: impl Into<String>) -> Self {
        Error::Input { line: Some(line), message: message.into() }
    }
}
