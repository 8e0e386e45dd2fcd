//! Perfect sampling from one restricted component via the split-chain
//! construction.
//!
//! The Metropolis-Hastings kernel with a uniform independence proposal on
//! region A splits as `P = p_hat Q + (1 - p_hat) R`, where Q is uniform on
//! A and R the residual kernel. Coalescence happens a geometric number of
//! steps in the past: draw `T ~ Geometric(p_hat)`, regenerate uniformly,
//! then run exactly T residual transitions forward to time zero. The
//! endpoint is an exact draw from the restricted target (exact up to the
//! sampled density extremes behind `p_hat`).

use nalgebra::DVector;
use rand::Rng;

use crate::calibration::RegionCalibration;
use crate::ellipsoid::EllipsoidalPartition;
use crate::error::{Error, Result};
use crate::rng::open01;
use crate::target::TargetDistribution;

/// Bookkeeping for a single perfect draw.
#[derive(Debug, Clone)]
pub struct ComponentSampleTrace {
    /// Geometric coalescence time T (number of residual transitions).
    pub coalescence_time: u64,
    /// Residual transitions applied after the regeneration draw; always
    /// equals `coalescence_time`.
    pub residual_steps_accepted: u64,
    /// Inner-loop proposals consumed across all residual transitions.
    pub residual_proposals: u64,
    /// The time-zero state.
    pub output: DVector<f64>,
}

/// Acceptance probability of a proposed move given current and proposed
/// log densities, with the out-of-support conventions.
fn mh_alpha(log_cur: f64, log_prop: f64) -> f64 {
    if log_prop == f64::NEG_INFINITY {
        0.0
    } else if log_cur == f64::NEG_INFINITY || log_prop >= log_cur {
        1.0
    } else {
        (log_prop - log_cur).exp()
    }
}

/// One Metropolis-Hastings step with the uniform independence proposal on
/// region `region`: propose uniformly, accept with min(1, ratio).
pub fn mh_uniform_step<R: Rng>(
    target: &TargetDistribution,
    partition: &EllipsoidalPartition,
    region: usize,
    state: &DVector<f64>,
    rng: &mut R,
) -> DVector<f64> {
    let log_cur = target.log_density(state);
    let proposal = partition.sample_uniform_region(region, rng);
    let alpha = mh_alpha(log_cur, target.log_density(&proposal));
    if alpha >= 1.0 || open01(rng) < alpha {
        proposal
    } else {
        state.clone()
    }
}

/// One residual-kernel transition, by rejection against the MH kernel.
///
/// A rejected MH move (the stay atom) belongs entirely to the residual and
/// is accepted immediately. An accepted MH move `theta'` is kept as a
/// residual draw with probability `1 - p_hat / alpha`, which equals
/// `(1 - p_hat) r / p` on the continuous part; otherwise the kernel draw
/// is repeated from the same state.
pub fn residual_step<R: Rng>(
    target: &TargetDistribution,
    partition: &EllipsoidalPartition,
    calib: &RegionCalibration,
    state: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let log_cur = target.log_density(state);
    let (next, _, _) = residual_step_cached(target, partition, calib, state, log_cur, rng)?;
    Ok(next)
}

/// `residual_step` carrying the current log density to avoid re-evaluation
/// inside loops; returns (state, its log density, proposals consumed).
fn residual_step_cached<R: Rng>(
    target: &TargetDistribution,
    partition: &EllipsoidalPartition,
    calib: &RegionCalibration,
    state: &DVector<f64>,
    log_cur: f64,
    rng: &mut R,
) -> Result<(DVector<f64>, f64, u64)> {
    let p_hat = calib.p_hat.ok_or_else(|| {
        Error::Precondition(format!(
            "region {} has no minorisation constant (zero weight)",
            calib.region
        ))
    })?;
    let mut proposals = 0u64;
    loop {
        proposals += 1;
        let proposal = partition.sample_uniform_region(calib.region, rng);
        let log_prop = target.log_density(&proposal);
        let alpha = mh_alpha(log_cur, log_prop);
        let mh_accept = alpha >= 1.0 || open01(rng) < alpha;
        if !mh_accept {
            // stay atom: wholly residual
            return Ok((state.clone(), log_cur, proposals));
        }
        let residual_accept = 1.0 - p_hat / alpha;
        if residual_accept < -1e-12 {
            return Err(Error::SplitInconsistency {
                region: calib.region,
                acceptance: residual_accept,
                p_hat,
            });
        }
        if residual_accept > 0.0 && open01(rng) < residual_accept {
            return Ok((proposal, log_prop, proposals));
        }
    }
}

/// Geometric draw on {1, 2, ...} with success probability `p`, by
/// inversion.
fn geometric_time<R: Rng>(p: f64, rng: &mut R) -> u64 {
    let u = open01(rng);
    if p >= 1.0 {
        return 1;
    }
    1 + (u.ln() / (1.0 - p).ln()).floor() as u64
}

/// Draw one perfect sample from the component on `calib.region`.
///
/// Draws `T ~ Geometric(p_hat)`, regenerates uniformly on the region, and
/// applies exactly T residual transitions.
pub fn perfect_sample<R: Rng>(
    target: &TargetDistribution,
    partition: &EllipsoidalPartition,
    calib: &RegionCalibration,
    rng: &mut R,
) -> Result<(DVector<f64>, ComponentSampleTrace)> {
    let p_hat = calib.p_hat.ok_or_else(|| {
        Error::Precondition(format!(
            "region {} has no minorisation constant (zero weight)",
            calib.region
        ))
    })?;
    if !(p_hat > 0.0 && p_hat < 1.0) {
        return Err(Error::Precondition(format!(
            "p_hat must lie in (0,1), got {p_hat}"
        )));
    }
    let coalescence_time = geometric_time(p_hat, rng);
    let mut state = partition.sample_uniform_region(calib.region, rng);
    let mut log_cur = target.log_density(&state);
    let mut proposals = 0u64;
    for _ in 0..coalescence_time {
        let (next, log_next, used) =
            residual_step_cached(target, partition, calib, &state, log_cur, rng)?;
        state = next;
        log_cur = log_next;
        proposals += used;
    }
    let trace = ComponentSampleTrace {
        coalescence_time,
        residual_steps_accepted: coalescence_time,
        residual_proposals: proposals,
        output: state.clone(),
    };
    Ok((state, trace))
}
