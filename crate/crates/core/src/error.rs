use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },

    #[error("inadmissible impulse at node {node}: {reason}")]
    InadmissibleImpulse { node: usize, reason: String },

    #[error("inadmissible policy at node {node}: {reason}")]
    InadmissiblePolicy { node: usize, reason: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("singular system: row {row} ({reason})")]
    SingularSystem { row: usize, reason: String },

    #[error("linear solve did not converge after {iterations} iterations (residual {residual:.3e})")]
    SolveNotConverged {
        iterations: usize,
        residual: f64,
        best: Vec<f64>,
    },

    #[error("policy iteration exhausted {max_iter} iterations (last metric {metric:.3e})")]
    PolicyIterationExhausted { max_iter: usize, metric: f64 },

    #[error("policy iterates decreased at node {node}: {before} -> {after}")]
    NonMonotoneIterates { node: usize, before: f64, after: f64 },

    #[error("matrix conditions violated: {0}")]
    ConditionViolation(String),

    #[error("value {value} at level {level}, node {node} outside stability envelope [{lower}, {upper}]")]
    StabilityViolation {
        level: usize,
        node: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("explicit scheme unstable at level {level}, node {node} (value {value})")]
    ExplicitInstability { level: usize, node: usize, value: f64 },

    #[error("time level {level}: {source}")]
    AtLevel {
        level: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("simulation: {0}")]
    Simulation(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn at_level(self, level: usize) -> Self {
        Error::AtLevel {
            level,
            source: Box::new(self),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
