use thiserror::Error;

/// Errors produced by the solver stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty scan")]
    EmptyScan,

    #[error("singular control Hessian at stage {stage}")]
    SingularStage { stage: usize },

    #[error("ill-conditioned combine (reciprocal condition estimate {rcond:.3e})")]
    IllConditionedCombine { rcond: f64 },

    #[error("cache invalidated: cache generation {cached}, solver generation {current}")]
    CacheInvalidated { cached: u64, current: u64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite model output at stage {stage}")]
    NonFinite { stage: usize },

    #[error("diverged: cost increased over {steps} consecutive accepted steps")]
    Diverged { steps: usize },

    #[error("robust problem infeasible: reduce disturbance or relax constraints")]
    RobustInfeasible,

    #[error("singular synthesis Hessian at stage {k} for disturbance {j}")]
    SingularSynthesis { k: usize, j: usize },

    #[error("model error: {0}")]
    Model(String),

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("invalid settings: {0}")]
    Settings(String),
}

pub type Result<T> = std::result::Result<T, Error>;
