use thiserror::Error;

/// Errors raised by model construction, simulation, inference and learning.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error(
        "no waiting time above the bin width {dt_min} after {attempts} draws; \
         the bin size is incompatible with the waiting-time distribution"
    )]
    IncompatibleBinSize { dt_min: f64, attempts: usize },

    #[error("inducing sequence ends at {last_event} but the grid runs to {grid_end}; more events are needed")]
    SequenceExhausted { last_event: f64, grid_end: f64 },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("particle filter degenerated at step {step}: all weights are zero or NaN")]
    DegenerateFilter { step: usize },

    #[error("path storage needs {needed} bytes, above the configured cap of {cap} bytes")]
    MemoryCap { needed: usize, cap: usize },

    #[error("optimisation diverged: {0}")]
    Divergence(String),

    #[error("non-finite state at step {step} of {what}")]
    NonFinite { what: &'static str, step: usize },

    #[error("malformed input: {0}")]
    Input(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by numerical degeneracy rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateFilter { .. }
                | Error::Divergence(_)
                | Error::NonFinite { .. }
                | Error::NotPositiveDefinite(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Non-fatal conditions surfaced to callers alongside a result.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warning {
    /// Importance sampler had too few effective proposals.
    LowProposalEss { ess: f64 },
    /// Regression Gram matrix was near singular; a ridge term was added.
    SingularGram { ridge: f64 },
    /// Too few effective events to estimate a distribution; prior mode used.
    FewEvents { n_eff: f64 },
    /// No stochastic bridge steps were available; sigma_x kept.
    NoBridgeSteps,
    /// Some bin has an expected count above the coarse-bin threshold.
    CoarseBins { max_rate_dt: f64 },
    /// Observation covariance was floored to stay positive definite.
    CovarianceFloored { floor: f64 },
}

impl std::fmt::Display for Warning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Warning::LowProposalEss { ess } => write!(f, "importance sampler ESS {ess:.2} below 10"),
            Warning::SingularGram { ridge } => write!(f, "near-singular Gram matrix, ridge {ridge:e} added"),
            Warning::FewEvents { n_eff } => write!(f, "only {n_eff:.2} effective events, prior mode used"),
            Warning::NoBridgeSteps => write!(f, "no stochastic bridge steps, sigma_x unchanged"),
            Warning::CoarseBins { max_rate_dt } => {
                write!(f, "expected count {max_rate_dt:.1} per bin exceeds 20; bins are too coarse")
            }
            Warning::CovarianceFloored { floor } => write!(f, "covariance floored at {floor:e}"),
        }
    }
}
