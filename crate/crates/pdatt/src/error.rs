//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by data loading, model fitting, and estimation.
#[derive(Debug, Error)]
pub enum Error {
    /// A malformed row or field while parsing a CSV input.
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    /// Input data violate a structural requirement (bad indicator codes,
    /// inconsistent s/d1, wrong arity, missing column).
    #[error("validation error: {0}")]
    Validation(String),

    /// A fitting cell required by the requested estimand is empty or too
    /// small. Carries the human-readable name of the cell.
    #[error("empty or insufficient cell: {0}")]
    EmptyCell(String),

    /// A binary outcome used by a logit fit has only one class.
    #[error("degenerate outcome in {context}: all values equal {value}")]
    DegenerateOutcome { context: String, value: u8 },

    /// Newton iteration failed to converge (separation or oscillation).
    /// `trace` holds the per-iteration max |score|.
    #[error("logit fit for {context} did not converge after {iterations} iterations (separation: {separation})")]
    NonConvergence {
        context: String,
        iterations: usize,
        separation: bool,
        trace: Vec<f64>,
    },

    /// A design or Hessian matrix is singular. `columns` names the
    /// offending (dependent) columns when known.
    #[error("singular matrix in {context} (offending columns: {columns:?})")]
    Singular { context: String, columns: Vec<String> },

    /// A nuisance fit failed; wraps the underlying error with the name of
    /// the nuisance model that was being estimated.
    #[error("nuisance model {name} failed: {source}")]
    Nuisance {
        name: String,
        #[source]
        source: Box<Error>,
    },

    /// Anything else that makes a numeric result undefined.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// I/O failure while reading or writing files.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wrap an error with the name of the nuisance model being fitted.
    pub fn in_nuisance(self, name: &str) -> Error {
        Error::Nuisance { name: name.to_string(), source: Box::new(self) }
    }

    /// True when the error reflects bad input data rather than a numerical
    /// failure. Used by the CLI to choose an exit code.
    pub fn is_data_error(&self) -> bool {
        matches!(self, Error::Parse { .. } | Error::Validation(_) | Error::Io(_))
    }
}
