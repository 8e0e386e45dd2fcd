//! Pilot moment estimation and per-region Monte Carlo calibration: mixing
//! weights, density extremes, and minorisation constants, with relative
//! standard errors tracked per region.
//!
//! Regions calibrate independently on private random streams keyed by
//! `(seed, region, generation)`, so results are identical for any worker
//! count.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::ellipsoid::EllipsoidalPartition;
use crate::error::{Error, Result};
use crate::rng::{domain, open01, stream};
use crate::stats::log_sum_exp;
use crate::target::TargetDistribution;

/// Monte Carlo budgets and margins for calibration.
#[derive(Debug, Clone)]
pub struct CalibrationConfig {
    /// Smallest per-region sample count before the stopping rule applies.
    pub n_min: usize,
    /// Hard per-region sample cap.
    pub n_max: usize,
    /// Stop sampling a region once the weight estimate's relative standard
    /// error falls below this.
    pub target_rel_se: f64,
    /// Safety margin subtracted from the density-extreme ratio.
    pub eta: f64,
    /// Lower clamp on the minorisation constant; hitting it flags the
    /// region as needing finer radii.
    pub p_floor: f64,
    /// Retained pilot-chain length.
    pub pilot_iters: usize,
    /// Discarded tuning prefix of the pilot chain.
    pub pilot_burnin: usize,
    /// Root seed for the calibration streams.
    pub seed: u64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            n_min: 1024,
            n_max: 65_536,
            target_rel_se: 0.01,
            eta: 1e-5,
            p_floor: 1e-4,
            pilot_iters: 10_000,
            pilot_burnin: 2_000,
            seed: 0,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::Precondition(format!(
                "eta must lie in (0,1), got {}",
                self.eta
            )));
        }
        if self.n_min < 2 || self.n_min > self.n_max {
            return Err(Error::Precondition(format!(
                "need 2 <= n_min <= n_max, got {} and {}",
                self.n_min, self.n_max
            )));
        }
        if !(self.target_rel_se > 0.0) {
            return Err(Error::Precondition(
                "target relative SE must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-region Monte Carlo estimates, all density quantities in log space.
#[derive(Debug, Clone)]
pub struct RegionCalibration {
    /// 0-based region index.
    pub region: usize,
    /// Samples actually drawn.
    pub n_samples: usize,
    /// log of the Monte Carlo mean of the unnormalized density.
    pub log_mean_density: f64,
    /// log unnormalized mixing weight: log Lebesgue measure + log mean
    /// density. `-inf` marks a zero-weight region.
    pub log_weight: f64,
    /// Relative standard error of the weight estimate.
    pub weight_rel_se: f64,
    /// log of the smallest sampled density.
    pub log_s_hat: f64,
    /// log of the largest sampled density.
    pub log_big_s_hat: f64,
    /// Minorisation constant; `None` for zero-weight regions, where it is
    /// never used.
    pub p_hat: Option<f64>,
    /// True when the raw ratio fell below the floor, signalling huge
    /// within-region density variation (finer radii recommended).
    pub p_clamped: bool,
}

impl RegionCalibration {
    pub fn is_zero_weight(&self) -> bool {
        self.log_weight == f64::NEG_INFINITY
    }

    /// Unnormalized weight on the natural scale; may overflow for extreme
    /// log values, prefer `log_weight` for arithmetic.
    pub fn weight_unnormalized(&self) -> f64 {
        self.log_weight.exp()
    }
}

/// Adaptive random-walk Metropolis pilot: tunes the proposal scale toward
/// acceptance 0.234 during burn-in, then freezes and returns the sample
/// mean and SPD-regularized sample covariance of the retained chain.
pub fn run_pilot<R: Rng>(
    target: &TargetDistribution,
    cfg: &CalibrationConfig,
    rng: &mut R,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    run_pilot_from(target, &DVector::zeros(target.dim()), cfg, rng)
}

/// `run_pilot` with an explicit starting point.
pub fn run_pilot_from<R: Rng>(
    target: &TargetDistribution,
    start: &DVector<f64>,
    cfg: &CalibrationConfig,
    rng: &mut R,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = target.dim();
    run_pilot_scaled(target, start, 2.38 / (d as f64).sqrt(), cfg, rng)
}

/// `run_pilot` with an explicit starting point and initial proposal scale
/// (a warm-start hint for repeatedly rebuilt posteriors whose width is
/// roughly known).
pub fn run_pilot_scaled<R: Rng>(
    target: &TargetDistribution,
    start: &DVector<f64>,
    initial_scale: f64,
    cfg: &CalibrationConfig,
    rng: &mut R,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    const EPOCH: usize = 100;
    let d = target.dim();
    let mut x = start.clone();
    let mut logp = check_density(target, &x)?;
    let mut scale = initial_scale;

    let mut accepted_in_epoch = 0usize;
    for it in 0..cfg.pilot_burnin {
        if mh_rw_step(target, &mut x, &mut logp, scale, rng)? {
            accepted_in_epoch += 1;
        }
        if (it + 1) % EPOCH == 0 {
            if accepted_in_epoch == 0 {
                return Err(Error::PilotFailure(format!(
                    "all {EPOCH} proposals rejected in a tuning epoch (iteration {}, \
                     proposal scale {scale:.3e}); the support may be degenerate or the \
                     start point unreachable",
                    it + 1
                )));
            }
            let rate = accepted_in_epoch as f64 / EPOCH as f64;
            scale *= (rate - 0.234).exp();
            accepted_in_epoch = 0;
        }
    }

    let n = cfg.pilot_iters.max(2);
    let mut mean = DVector::zeros(d);
    let mut states = Vec::with_capacity(n);
    for _ in 0..n {
        mh_rw_step(target, &mut x, &mut logp, scale, rng)?;
        mean += &x;
        states.push(x.clone());
    }
    mean /= n as f64;

    let mut cov = DMatrix::zeros(d, d);
    for s in &states {
        let diff = s - &mean;
        cov += &diff * diff.transpose();
    }
    cov /= (n - 1) as f64;
    cov = (&cov + cov.transpose()) * 0.5;

    // jitter the diagonal until the factorization succeeds
    let unit = cov.trace().max(1.0) / d as f64;
    for exponent in [-f64::INFINITY, -12.0, -9.0, -6.0, -3.0] {
        let jitter = if exponent.is_finite() {
            unit * 10f64.powf(exponent)
        } else {
            0.0
        };
        let candidate = &cov + DMatrix::identity(d, d) * jitter;
        if nalgebra::Cholesky::new(candidate.clone()).is_some() {
            return Ok((mean, candidate));
        }
    }
    Err(Error::PilotFailure(
        "pilot covariance is degenerate even after jitter".into(),
    ))
}

fn check_density(target: &TargetDistribution, x: &DVector<f64>) -> Result<f64> {
    let v = target.log_density(x);
    if v.is_nan() {
        return Err(Error::NanDensity {
            point: x.iter().copied().collect(),
        });
    }
    Ok(v)
}

/// One random-walk Metropolis step; returns whether the proposal was
/// accepted.
fn mh_rw_step<R: Rng>(
    target: &TargetDistribution,
    x: &mut DVector<f64>,
    logp: &mut f64,
    scale: f64,
    rng: &mut R,
) -> Result<bool> {
    let proposal = DVector::from_fn(x.len(), |i, _| {
        x[i] + scale * rng.sample::<f64, _>(StandardNormal)
    });
    let logq = check_density(target, &proposal)?;
    let accept = if logq == f64::NEG_INFINITY {
        false
    } else if *logp == f64::NEG_INFINITY || logq >= *logp {
        true
    } else {
        open01(rng).ln() < logq - *logp
    };
    if accept {
        *x = proposal;
        *logp = logq;
    }
    Ok(accept)
}

/// Calibrate one region: adaptive uniform Monte Carlo until the weight's
/// relative SE meets the target or the budget is exhausted.
pub fn calibrate_region<R: Rng>(
    target: &TargetDistribution,
    partition: &EllipsoidalPartition,
    region: usize,
    cfg: &CalibrationConfig,
    rng: &mut R,
) -> Result<RegionCalibration> {
    let log_measure = partition.log_lebesgue_measure(region)?;
    let mut values: Vec<f64> = Vec::with_capacity(cfg.n_min);
    let mut rel_se = f64::INFINITY;

    loop {
        let goal = if values.is_empty() {
            cfg.n_min
        } else {
            (values.len() * 2).min(cfg.n_max)
        };
        while values.len() < goal {
            let point = partition.sample_uniform_region(region, rng);
            values.push(check_density(target, &point)?);
        }
        let n = values.len();
        let m1 = log_sum_exp(&values);
        if m1 == f64::NEG_INFINITY {
            // no mass observed anywhere in the region
            if n >= cfg.n_max {
                return Ok(RegionCalibration {
                    region,
                    n_samples: n,
                    log_mean_density: f64::NEG_INFINITY,
                    log_weight: f64::NEG_INFINITY,
                    weight_rel_se: 0.0,
                    log_s_hat: f64::NEG_INFINITY,
                    log_big_s_hat: f64::NEG_INFINITY,
                    p_hat: None,
                    p_clamped: false,
                });
            }
            continue;
        }
        let doubled: Vec<f64> = values.iter().map(|v| 2.0 * v).collect();
        let m2 = log_sum_exp(&doubled);
        let rel_var = ((n as f64).ln() + m2 - 2.0 * m1).exp() - 1.0;
        rel_se = (rel_var.max(0.0) / (n - 1) as f64).sqrt();
        if rel_se <= cfg.target_rel_se || n >= cfg.n_max {
            break;
        }
    }

    let n = values.len();
    let log_mean = log_sum_exp(&values) - (n as f64).ln();
    let log_s = values.iter().copied().fold(f64::INFINITY, f64::min);
    let log_big_s = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw = (log_s - log_big_s).exp() - cfg.eta;
    let p_clamped = raw < cfg.p_floor;
    Ok(RegionCalibration {
        region,
        n_samples: n,
        log_mean_density: log_mean,
        log_weight: log_measure + log_mean,
        weight_rel_se: rel_se,
        log_s_hat: log_s,
        log_big_s_hat: log_big_s,
        p_hat: Some(raw.max(cfg.p_floor)),
        p_clamped,
    })
}

/// Calibration of a region with a multiplied budget; `generation` keys the
/// random stream and scales the budget by 4^generation. Used when sampled
/// extremes prove too tight.
pub fn refine_region(
    target: &TargetDistribution,
    partition: &EllipsoidalPartition,
    region: usize,
    cfg: &CalibrationConfig,
    generation: u64,
) -> Result<RegionCalibration> {
    let factor = 4usize.saturating_pow(generation as u32);
    let refined = CalibrationConfig {
        n_min: cfg.n_min.saturating_mul(factor),
        n_max: cfg.n_max.saturating_mul(factor),
        ..cfg.clone()
    };
    let mut rng = stream(cfg.seed, domain::CALIBRATE, region as u64, generation);
    calibrate_region(target, partition, region, &refined, &mut rng)
}

/// All regions plus their normalized weights.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    pub regions: Vec<RegionCalibration>,
    /// Normalized mixing weights, summing to 1; zero-weight regions stay
    /// in place with weight 0 so indices remain stable under extension.
    pub weights: Vec<f64>,
}

/// Calibrate every region independently (parallel over regions) and
/// normalize the weights. Fails if every region has zero weight.
pub fn calibrate_all(
    target: &TargetDistribution,
    partition: &EllipsoidalPartition,
    cfg: &CalibrationConfig,
) -> Result<CalibrationSet> {
    cfg.validate()?;
    let regions: Vec<RegionCalibration> = (0..partition.regions())
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(cfg.seed, domain::CALIBRATE, i as u64, 0);
            calibrate_region(target, partition, i, cfg, &mut rng)
        })
        .collect::<Result<_>>()?;
    let weights = normalized_weights(&regions)?;
    Ok(CalibrationSet { regions, weights })
}

/// Normalize unnormalized log weights into probabilities.
pub fn normalized_weights(regions: &[RegionCalibration]) -> Result<Vec<f64>> {
    let logs: Vec<f64> = regions.iter().map(|r| r.log_weight).collect();
    let lse = log_sum_exp(&logs);
    if lse == f64::NEG_INFINITY {
        return Err(Error::TargetUnreachable);
    }
    let mut weights: Vec<f64> = logs.iter().map(|lw| (lw - lse).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

/// Double the partition and calibrate only the new regions; existing
/// calibrations are reused unchanged. Returns the extended partition and
/// the full calibration set with renormalized weights.
pub fn extend_calibrated(
    target: &TargetDistribution,
    partition: &EllipsoidalPartition,
    existing: &[RegionCalibration],
    cfg: &CalibrationConfig,
) -> Result<(EllipsoidalPartition, CalibrationSet)> {
    let old_m = partition.regions();
    let extended = partition.extended(old_m);
    let fresh: Vec<RegionCalibration> = (old_m..extended.regions())
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(cfg.seed, domain::CALIBRATE, i as u64, 0);
            calibrate_region(target, &extended, i, cfg, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut regions = existing.to_vec();
    regions.extend(fresh);
    let weights = normalized_weights(&regions)?;
    Ok((extended, CalibrationSet { regions, weights }))
}
