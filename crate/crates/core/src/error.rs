use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("time {t} outside schedule horizon [0, {horizon}]")]
    OutOfRange { t: f64, horizon: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schedule invariant violated: {0}")]
    ScheduleInvariant(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    Dimension { expected: usize, found: usize },

    #[error("operation requires a {expected} schedule")]
    KindMismatch { expected: &'static str },

    #[error("coupling contract violated: {0}")]
    CouplingContract(String),

    #[error("reduction undefined: b_ii({k}) = {value} for agent {agent}")]
    ReductionDomain { k: usize, agent: usize, value: f64 },

    #[error("delayed lookup at t = {t} precedes prehistory start {start}")]
    PrehistoryLookup { t: f64, start: f64 },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("serialization: {0}")]
    Serde(String),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
