//! Risk-sensitive LEQG control with exploratory controls, solved through its
//! dual entropy-penalized linear-quadratic game.

pub mod conditions;
pub mod config;
pub mod duality;
pub mod error;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod pg;
pub mod policy;
pub mod report;
pub mod rng;
pub mod simulate;
pub mod solver;

pub use error::{Error, Result};
pub use model::{validate, ModelSpec, TerminalConvention, ValidatedModel};
pub use solver::{solve, Solution};
