use thiserror::Error;

use crate::ops::Invalid;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported depth {depth} (expected {min}..={max})")]
    UnsupportedDepth { depth: usize, min: usize, max: usize },

    #[error("parameter vector has length {got}, architecture expects {expected}")]
    ParamLength { got: usize, expected: usize },

    #[error("temperature must be positive, got {0}")]
    Temperature(f64),

    #[error("expression parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("expression {0} is not expressible by this architecture")]
    NotExpressible(String),

    #[error("wrong leaf arity for {shape}: got {got}, expected {expected}")]
    LeafArity { shape: String, got: usize, expected: usize },

    #[error("target {name} is unusable: only {kept} valid grid points")]
    UnusableTarget { name: String, kept: usize },

    #[error("target {0} is invalid on too much of the domain to verify recovery")]
    VerificationImpossible(String),

    #[error("training diverged: every point is invalid")]
    Divergence,

    #[error("invalid counts: {0}")]
    Counts(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown target {0:?}")]
    UnknownTarget(String),

    #[error(transparent)]
    Eval(#[from] Invalid),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
