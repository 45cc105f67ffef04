use thiserror::Error;

use crate::shift::ScalingScope;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} = {value} is outside the admissible domain")]
    Domain { what: &'static str, value: f64 },

    #[error("query ({t}, {x}, {y}) lies outside the grid bounding box")]
    OutOfBounds { t: f64, x: f64, y: f64 },

    #[error("beta-derivatives taken in {got:?} scope, identity requires {expected}")]
    ScopeMismatch {
        expected: &'static str,
        got: ScalingScope,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value while evaluating {0}")]
    Evaluation(String),

    #[error("coefficient A(beta) changes sign in [{lo}, {hi}]")]
    SingularCoefficient { lo: f64, hi: f64 },

    #[error("degenerate curvature: |v_betabeta| = {value:e} is below the floor")]
    DegenerateCurvature { value: f64 },

    #[error("stability bound violated: CFL number {cfl:.4} exceeds 1 at step {step}")]
    Stability { cfl: f64, step: usize },

    #[error("fixed-point iteration did not converge after {iterations} iterations (last relative change {last_change:e})")]
    NonConvergence { iterations: usize, last_change: f64 },

    #[error("invalid configuration: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
