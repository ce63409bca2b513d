use thiserror::Error;

use crate::design::StratumKey;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(
        "complete or quasi-complete separation: |coef| reached {max_abs_coef:.3} (bound {bound})"
    )]
    Separation { max_abs_coef: f64, bound: f64 },

    #[error("outcome has no variation among weighted rows")]
    DegenerateOutcome,

    #[error("design matrix `{what}` is not of full column rank")]
    RankDeficient { what: String },

    #[error("{what} did not converge after {iterations} iterations (criterion {criterion:.3e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        criterion: f64,
    },

    #[error("cell {key}: requested {requested} rows but only {available} available")]
    InsufficientCell {
        key: StratumKey,
        requested: usize,
        available: usize,
    },

    #[error("cell {key} is empty in phase I but has a positive quota or phase-II count")]
    EmptyCell { key: StratumKey },

    #[error("no selection probability defined for cell {key}")]
    MissingCell { key: StratumKey },

    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("Gauss-Newton normal equations are singular (reciprocal condition {rcond:.3e})")]
    SingularNormalEquations { rcond: f64 },

    #[error("coefficient left the box |beta| <= {bound} (reached {max_abs_coef:.3})")]
    BoundHit { max_abs_coef: f64, bound: f64 },

    #[error("sandwich bread G'CG is singular")]
    SingularBread,

    #[error("correlation {target} between variables {first} and {second} is not attainable under the given marginals")]
    UnattainableCorrelation {
        first: usize,
        second: usize,
        target: f64,
    },

    #[error("invalid weighting matrix: {0}")]
    InvalidWeighting(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("phase-II id {id} not present in phase-I data")]
    Join { id: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{failed} of {total} replicates failed (more than 5%)")]
    TooManyFailures { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short stable label, used when tallying replicate failures.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Separation { .. } => "separation",
            Error::DegenerateOutcome => "degenerate_outcome",
            Error::RankDeficient { .. } => "rank_deficient",
            Error::NonConvergence { .. } => "non_convergence",
            Error::InsufficientCell { .. } => "insufficient_cell",
            Error::EmptyCell { .. } => "empty_cell",
            Error::MissingCell { .. } => "missing_cell",
            Error::InvalidDesign(_) => "invalid_design",
            Error::Dimension { .. } => "dimension",
            Error::SingularNormalEquations { .. } => "singular_normal_equations",
            Error::BoundHit { .. } => "bound_hit",
            Error::SingularBread => "singular_bread",
            Error::UnattainableCorrelation { .. } => "unattainable_correlation",
            Error::InvalidWeighting(_) => "invalid_weighting",
            Error::InvalidModel(_) => "invalid_model",
            Error::InvalidInput(_) => "invalid_input",
            Error::Parse(_) => "parse",
            Error::Join { .. } => "join",
            Error::Config(_) => "config",
            Error::TooManyFailures { .. } => "too_many_failures",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
        }
    }

    /// Errors caused by bad user input rather than numerical trouble.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidDesign(_)
                | Error::MissingCell { .. }
                | Error::EmptyCell { .. }
                | Error::InsufficientCell { .. }
                | Error::InvalidModel(_)
                | Error::InvalidInput(_)
                | Error::Parse(_)
                | Error::Join { .. }
                | Error::Config(_)
                | Error::Dimension { .. }
                | Error::Csv(_)
        )
    }
}
