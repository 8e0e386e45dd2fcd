//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the sampler, the calibration pipeline, and the
/// sequential updaters.
#[derive(Debug, Error)]
pub enum Error {
    /// A covariance or scale matrix failed its Cholesky factorization.
    #[error("matrix is not symmetric positive definite: {0}")]
    NotPositiveDefinite(String),

    /// A builtin target spec violated one of its invariants.
    #[error("invalid target spec: {0}")]
    InvalidSpec(String),

    /// Requested a closed-form marginal that the family does not have.
    #[error("no closed-form marginal for {0}")]
    UnsupportedMarginal(String),

    /// The pilot chain could not move; the target is unreachable from the
    /// starting point or has degenerate support.
    #[error("pilot run failed: {0}")]
    PilotFailure(String),

    /// The target returned NaN at a finite point.
    #[error("target log-density returned NaN at {point:?}")]
    NanDensity { point: Vec<f64> },

    /// Every region of the partition carries zero mass.
    #[error("all regions have zero weight; the target places no mass on the partition")]
    TargetUnreachable,

    /// Region index out of range for the current partition.
    #[error("region index {index} out of range (partition has {regions} regions)")]
    RegionOutOfRange { index: usize, regions: usize },

    /// The residual acceptance probability left [0,1]: the sampled density
    /// extremes underestimated the true within-region variation.
    #[error(
        "split-chain inconsistency in region {region}: residual acceptance {acceptance} \
         (observed density ratio fell below p_hat = {p_hat}); region needs recalibration"
    )]
    SplitInconsistency {
        region: usize,
        acceptance: f64,
        p_hat: f64,
    },

    /// Partition doubling hit the configured cap while the outermost region
    /// still attracts selections.
    #[error(
        "tail mass not exhausted: outermost region (of {regions}) still holds weight \
         {outer_weight:e} at the doubling cap"
    )]
    TailMass { regions: usize, outer_weight: f64 },

    /// An argument violated an operation precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Incompatible dimensions between operands.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// The innovation covariance of a Kalman update is singular.
    #[error("singular innovation covariance")]
    SingularInnovation,

    /// Particle weights collapsed to zero everywhere.
    #[error("particle degeneracy: {0}")]
    Degeneracy(String),

    /// An observation fell outside the support of the conjugate family.
    #[error("observation outside family support: {0}")]
    OutsideSupport(String),

    /// The term stream ended before all stages were processed; carries the
    /// per-stage trace accumulated so far.
    #[error("term stream exhausted after {stages_done} of {stages_wanted} stages")]
    StreamExhausted {
        stages_done: usize,
        stages_wanted: usize,
        trace: Vec<crate::assessor::StageRecord>,
    },

    /// A series is too short for the requested block scheme.
    #[error("series too short: {0}")]
    SeriesTooShort(String),

    /// The sieve limit exceeds the configured memory budget.
    #[error("sieve limit {limit} exceeds budget {budget}")]
    SieveBudget { limit: usize, budget: usize },
}

pub type Result<T> = std::result::Result<T, Error>;
