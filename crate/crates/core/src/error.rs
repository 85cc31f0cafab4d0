use std::fmt;

use serde::Serialize;

/// A single failed model invariant, collected by [`crate::model::validate`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Violation {
    DimensionMismatch {
        field: String,
        expected: String,
        found: String,
    },
    /// Positive (semi)definiteness failed; `min_eig`/`max_abs_eig` are the evidence.
    NotPsd {
        field: String,
        min_eig: f64,
        max_abs_eig: f64,
    },
    ThetaOutOfRange(f64),
    ScheduleLength {
        field: String,
        expected: usize,
        found: usize,
    },
    NonFinite(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DimensionMismatch {
                field,
                expected,
                found,
            } => write!(f, "{field}: expected shape {expected}, found {found}"),
            Violation::NotPsd {
                field,
                min_eig,
                max_abs_eig,
            } => write!(
                f,
                "{field}: not positive (semi)definite (min eigenvalue {min_eig:e}, max |eigenvalue| {max_abs_eig:e})"
            ),
            Violation::ThetaOutOfRange(theta) => {
                write!(f, "theta = {theta} is outside (-1,0) U (0,inf)")
            }
            Violation::ScheduleLength {
                field,
                expected,
                found,
            } => write!(f, "{field}: schedule has {found} entries, expected {expected}"),
            Violation::NonFinite(field) => write!(f, "{field}: contains non-finite values"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid model:\n{}", format_violations(.0))]
    Invalid(Vec<Violation>),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("missing key `{0}`")]
    MissingKey(String),

    #[error("B1 is numerically singular at t={t} (condition estimate {cond:e})")]
    SingularB1 { t: usize, cond: f64 },

    #[error("G is numerically singular at t={t} (condition estimate {cond:e})")]
    SingularG { t: usize, cond: f64 },

    #[error("stationarity system is singular")]
    SingularSystem,

    #[error("operation requires a scalar model (d_x = d_u = 1)")]
    NotScalar,

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("all Monte Carlo weights underflowed")]
    DegenerateSample,

    #[error("regressor matrix is rank deficient (rank {rank} < {needed})")]
    RankDeficient { rank: usize, needed: usize },

    #[error("no admissible noise schedule at t={t}: {reason}")]
    ConditionsUnsatisfiable { t: usize, reason: String },

    #[error("no convergence after {0} sweeps")]
    NoConvergence(usize),

    #[error("grid too coarse: optimum of `{0}` on the boundary of the search bracket")]
    GridTooCoarse(String),

    #[error("training diverged at episode {episode}: objective {objective} exceeds 10x initial {initial}")]
    Diverged {
        episode: usize,
        objective: f64,
        initial: f64,
    },

    #[error("expectation is infinite: {0}")]
    InfiniteMoment(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| format!("  - {x}"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub type Result<T> = std::result::Result<T, Error>;
