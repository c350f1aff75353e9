use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("interval duration must be positive, got {0}")]
    NonPositiveDuration(f64),

    #[error("interior time {tau} outside [0, {h}]")]
    TauOutOfRange { tau: f64, h: f64 },

    #[error("kernel would hold {entries} entries, budget is {budget}")]
    GridTooLarge { entries: u128, budget: u64 },

    #[error("sample {value} outside grid coverage [{lo}, {hi}]")]
    SampleOutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("support mismatch at index {index}: numerator positive where reference is zero")]
    SupportMismatch { index: usize },

    #[error("starved constraint at time index {node}, position index {position}: \
             mass demanded where the current iterate carries none")]
    StarvedConstraint { node: usize, position: usize },

    #[error("time {t} outside [{t0}, {t1}]")]
    TimeOutOfRange { t: f64, t0: f64, t1: f64 },

    #[error("need at least 2 strictly increasing knots")]
    DegenerateKnots,

    #[error("instance has {pairs} state pairs, reference solver limit is {limit}")]
    InstanceTooLarge { pairs: usize, limit: usize },

    #[error("reference solver stalled at projected gradient norm {grad_norm}")]
    OracleNotConverged { grad_norm: f64 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
