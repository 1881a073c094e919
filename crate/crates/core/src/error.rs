use std::fmt;

use thiserror::Error;

/// One violated identifiability or consistency rule of a [`crate::ModelSpec`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub rule: &'static str,
    pub entry: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.rule, self.entry)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecError(pub Vec<Violation>);

impl fmt::Display for SpecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join("; "))
    }
}

impl std::error::Error for SpecError {}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model specification: {0}")]
    Spec(#[from] SpecError),

    #[error("inadmissible parameter: {0}")]
    BadParam(String),

    #[error("numerically singular matrix: {0}")]
    Singular(String),

    #[error("{what} did not converge after {iterations} iterations (norm {norm:.3e})")]
    NotConverged {
        what: String,
        iterations: usize,
        norm: f64,
        /// Best iterate reached before giving up.
        best: Vec<f64>,
    },

    #[error("model is not identified: {0}")]
    Unidentified(String),

    #[error("design matrix is rank deficient; dependent columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("numeric Jacobian unstable: step sizes disagree by relative error {rel_err:.3e}")]
    NumericJacobianFailure { rel_err: f64 },

    #[error("bad simulation design: {0}")]
    BadDesign(String),

    #[error("parse error at line {line}, column {column}: {reason}")]
    Parse {
        line: usize,
        column: String,
        reason: String,
    },

    #[error("outcome row references unknown subject id `{0}`")]
    Join(String),

    #[error("missing covariate `{column}` for subject `{id}`")]
    MissingCovariate { id: String, column: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
