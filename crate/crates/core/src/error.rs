use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("belief vector has every entry <= 0")]
    AllZeroVector,

    #[error("negative entry {value} at index {index}")]
    NegativeEntry { index: usize, value: f64 },

    #[error("non-finite entry at index {index}")]
    NonFinite { index: usize },

    #[error("belief dimension {0} is below the minimum of 2")]
    DimensionTooSmall(usize),

    #[error("belief entries sum to {sum}, outside the simplex tolerance")]
    NotNormalized { sum: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("weights are not on the simplex: {0}")]
    WeightNotSimplex(String),

    #[error("label {label} out of range for dimension {d}")]
    LabelOutOfRange { label: usize, d: usize },

    #[error("power iteration did not converge within {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("system is not contractive: spectral radius {rho} >= 1 - 1e-6")]
    NotContractive { rho: f64 },

    #[error("linear system (I - H) is singular")]
    SingularSystem,

    #[error("influence row {agent} sums to {row_sum}, not 1 (agent stubbornness degenerate)")]
    DegenerateStubbornness { agent: usize, row_sum: f64 },

    #[error("at least 2 agents are required, got {0}")]
    TooFewAgents(usize),

    #[error("at least 3 points are required, got {0}")]
    TooFewPoints(usize),

    #[error("rank correlation undefined: one input has zero variance")]
    ZeroVariance,

    #[error("trajectory is degenerate: every belief is identical and no regularization is set")]
    DegenerateTrajectory,

    #[error("empty input")]
    EmptyInput,

    #[error("at least 2 fit reports are required, got {0}")]
    InsufficientSamples(usize),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("scenario has unbalanced regions; closed-form threshold needs rho_j = 1/n")]
    UnbalancedScenario,

    #[error("competent agent is not strictly the most confident (competent {competent}, other {other}) for {params}")]
    ConfidenceOrderViolated { competent: f64, other: f64, params: String },
}

impl Error {
    /// Numerical failures (as opposed to malformed input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NoConvergence { .. }
                | Error::NotContractive { .. }
                | Error::SingularSystem
                | Error::DegenerateStubbornness { .. }
        )
    }
}
