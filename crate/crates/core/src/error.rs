use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("parse error in field `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("unknown scenario `{name}`; valid names: {}", valid.join(", "))]
    NotFound { name: String, valid: Vec<String> },

    #[error("unstable closed loop: spectral radius {spectral_radius:.6} >= 1")]
    UnstableClosedLoop { spectral_radius: f64 },

    #[error("pair (A, B) is not stabilizable: closed-loop spectral radius {spectral_radius:.6}")]
    Unstabilizable { spectral_radius: f64 },

    #[error("pair (A, B) is not controllable (reachability rank {rank} < {dim})")]
    Uncontrollable { rank: usize, dim: usize },

    #[error("Riccati iteration diverged after {iterations} iterations; last increments {trace:?}")]
    RiccatiDivergence { iterations: usize, trace: Vec<f64> },

    #[error("insufficient control authority: U_max = {u_max} must exceed rho = {rho:.6}")]
    InsufficientAuthority { rho: f64, u_max: f64 },

    #[error("singular matrix in {0}")]
    Singular(&'static str),

    #[error("discretized control set is empty")]
    EmptyControlSet,

    #[error("non-finite value at stage {stage}, node {node:?}")]
    NonFinite { stage: usize, node: Vec<f64> },

    #[error("stage policies missing: {0}; run solve_horizon first")]
    MissingStagePolicies(String),

    #[error("cannot evaluate expectation: {0}")]
    Evaluation(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn parse(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
