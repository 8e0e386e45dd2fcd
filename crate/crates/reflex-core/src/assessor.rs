//! Recursive Beta-Binomial assessment: block partial sums with an adaptive
//! bound for series-convergence verdicts, a linear Möbius sieve for the
//! Dirichlet-series probe, and block-vs-pooled EDF sup distances for
//! time-series stationarity verdicts.
//!
//! Stage `j` turns a block statistic into a binary indicator
//! `y_j = I{statistic <= c_j}` and folds it into the accumulated Beta
//! posterior `Beta(sum alpha_j + sum y_j, k + sum beta_j - sum y_j)` with
//! the default hyperparameter choice `alpha_j = beta_j = 1/j^2`.

use rand_distr::Distribution;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{Beta, ContinuousCDF};

use crate::error::{Error, Result};
use crate::rng::{domain, stream};

/// Accumulated Beta posterior over the "convergence probability".
#[derive(Debug, Clone, PartialEq)]
pub struct RecursivePosterior {
    stage: u64,
    sum_alpha: f64,
    sum_beta: f64,
    sum_y: f64,
}

impl Default for RecursivePosterior {
    fn default() -> Self {
        Self::new()
    }
}

impl RecursivePosterior {
    pub fn new() -> Self {
        Self {
            stage: 0,
            sum_alpha: 0.0,
            sum_beta: 0.0,
            sum_y: 0.0,
        }
    }

    pub fn stage(&self) -> u64 {
        self.stage
    }

    /// Fold one indicator with its stage hyperparameters.
    pub fn update(&mut self, y: bool, alpha_j: f64, beta_j: f64) {
        self.stage += 1;
        self.sum_alpha += alpha_j;
        self.sum_beta += beta_j;
        if y {
            self.sum_y += 1.0;
        }
    }

    /// First derived Beta parameter: sum alpha_j + sum y_j.
    pub fn alpha(&self) -> f64 {
        self.sum_alpha + self.sum_y
    }

    /// Second derived Beta parameter: k + sum beta_j - sum y_j.
    pub fn beta(&self) -> f64 {
        self.stage as f64 + self.sum_beta - self.sum_y
    }

    pub fn mean(&self) -> f64 {
        self.alpha() / (self.alpha() + self.beta())
    }

    pub fn variance(&self) -> f64 {
        let (a, b) = (self.alpha(), self.beta());
        let s = a + b;
        a * b / (s * s * (s + 1.0))
    }

    /// Central credible interval from the Beta quantiles.
    pub fn credible_interval(&self, mass: f64) -> (f64, f64) {
        let (a, b) = (self.alpha(), self.beta());
        let dist = Beta::new(a, b).expect("derived Beta parameters are positive");
        let tail = (1.0 - mass) / 2.0;
        (dist.inverse_cdf(tail), dist.inverse_cdf(1.0 - tail))
    }
}

/// Summary statistics of the posterior: mean, variance, 95% interval.
pub fn posterior_summary(post: &RecursivePosterior) -> (f64, f64, (f64, f64)) {
    (post.mean(), post.variance(), post.credible_interval(0.95))
}

/// The nonparametric adaptive bound `c_j = C_j / log(j+1)` with
/// `C_j = C_{j-1} + 0.05 (2 y_{j-1} - 1)`, floored at a positive minimum.
#[derive(Debug, Clone)]
pub struct AdaptiveBound {
    c_hat: f64,
    stage: u64,
}

impl AdaptiveBound {
    /// Walk step size (paper value).
    pub const STEP: f64 = 0.05;
    /// Positive floor keeping every bound positive.
    pub const C_MIN: f64 = 0.01;
    /// Default initial level. A small constant start lets the walk settle
    /// onto the data scale within a few stages; the indicator sequence
    /// then separates decaying block statistics from persistent ones.
    pub const DEFAULT_C0: f64 = 0.1;

    pub fn new(c0: f64) -> Self {
        Self {
            c_hat: c0.max(Self::C_MIN),
            stage: 0,
        }
    }

    pub fn c_hat(&self) -> f64 {
        self.c_hat
    }

    pub fn stage(&self) -> u64 {
        self.stage
    }

    /// Advance to the next stage given the previous indicator; returns the
    /// bound c_j for the new stage.
    pub fn step(&mut self, y_prev: bool) -> f64 {
        self.stage += 1;
        let delta = if y_prev { Self::STEP } else { -Self::STEP };
        self.c_hat = (self.c_hat + delta).max(Self::C_MIN);
        self.c_hat / ((self.stage + 1) as f64).ln()
    }
}

impl Default for AdaptiveBound {
    fn default() -> Self {
        Self::new(Self::DEFAULT_C0)
    }
}

/// Block layout for the staged assessment.
#[derive(Debug, Clone, Copy)]
pub struct BlockScheme {
    /// Terms per block.
    pub block_size: usize,
    /// Number of stages K.
    pub stages: usize,
}

impl Default for BlockScheme {
    fn default() -> Self {
        Self {
            block_size: 1_000,
            stages: 200,
        }
    }
}

/// One stage of the assessment trace.
#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    pub stage: u64,
    /// Block statistic: |partial sum| for series, EDF sup distance for
    /// stationarity.
    pub statistic: f64,
    pub bound: f64,
    pub indicator: bool,
    pub post_mean: f64,
    pub post_lo: f64,
    pub post_hi: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SeriesVerdict {
    Convergent,
    Divergent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StationarityVerdict {
    Stationary,
    Nonstationary,
}

/// Full assessment output: the per-stage trace and the 0.5-threshold
/// verdict, always reported with the final mean and credible interval.
#[derive(Debug, Clone)]
pub struct AssessmentReport<V> {
    pub stages: Vec<StageRecord>,
    pub verdict: V,
    pub final_mean: f64,
    pub final_interval: (f64, f64),
}

fn run_stages<S>(
    mut next_statistic: S,
    stages: usize,
    mut bound: AdaptiveBound,
) -> (Vec<StageRecord>, RecursivePosterior)
where
    S: FnMut(u64) -> Option<f64>,
{
    let mut post = RecursivePosterior::new();
    let mut records = Vec::with_capacity(stages);
    let mut y_prev = true;
    for j in 1..=stages as u64 {
        let Some(statistic) = next_statistic(j) else {
            break;
        };
        let c_j = bound.step(y_prev);
        let y = statistic <= c_j;
        let hyper = 1.0 / (j as f64 * j as f64);
        post.update(y, hyper, hyper);
        let (mean, _, (lo, hi)) = posterior_summary(&post);
        records.push(StageRecord {
            stage: j,
            statistic,
            bound: c_j,
            indicator: y,
            post_mean: mean,
            post_lo: lo,
            post_hi: hi,
        });
        y_prev = y;
    }
    (records, post)
}

/// Assess convergence of a series from its term stream: per stage, the
/// block partial sum, the adaptive bound, the indicator, and the Beta
/// update; CONVERGENT when the final posterior mean reaches 0.5.
pub fn assess_series<I>(
    terms: I,
    scheme: &BlockScheme,
    bound: AdaptiveBound,
) -> Result<AssessmentReport<SeriesVerdict>>
where
    I: IntoIterator<Item = f64>,
{
    let mut it = terms.into_iter();
    let block_size = scheme.block_size.max(1);
    let mut exhausted = false;
    let (records, post) = run_stages(
        |_| {
            let mut sum = 0.0;
            for _ in 0..block_size {
                match it.next() {
                    Some(t) => sum += t,
                    None => {
                        exhausted = true;
                        return None;
                    }
                }
            }
            Some(sum.abs())
        },
        scheme.stages,
        bound,
    );
    if exhausted {
        return Err(Error::StreamExhausted {
            stages_done: records.len(),
            stages_wanted: scheme.stages,
            trace: records,
        });
    }
    let (mean, _, interval) = posterior_summary(&post);
    Ok(AssessmentReport {
        stages: records,
        verdict: if mean >= 0.5 {
            SeriesVerdict::Convergent
        } else {
            SeriesVerdict::Divergent
        },
        final_mean: mean,
        final_interval: interval,
    })
}

/// Largest supported sieve limit (memory budget).
pub const SIEVE_BUDGET: usize = 100_000_000;

/// Möbius function over 1..=limit by linear sieve: `mu[1] = 1`, zero on
/// any squared prime factor, otherwise `(-1)^(number of prime factors)`.
/// Index 0 of the returned vector is unused.
pub fn mobius_sieve(limit: usize) -> Result<Vec<i8>> {
    if limit < 1 {
        return Err(Error::Precondition("sieve limit must be at least 1".into()));
    }
    if limit > SIEVE_BUDGET {
        return Err(Error::SieveBudget {
            limit,
            budget: SIEVE_BUDGET,
        });
    }
    let mut mu = vec![0i8; limit + 1];
    let mut composite = vec![false; limit + 1];
    let mut primes: Vec<usize> = Vec::new();
    mu[1] = 1;
    for i in 2..=limit {
        if !composite[i] {
            primes.push(i);
            mu[i] = -1;
        }
        for &p in &primes {
            let ip = match i.checked_mul(p) {
                Some(ip) if ip <= limit => ip,
                _ => break,
            };
            composite[ip] = true;
            if i % p == 0 {
                mu[ip] = 0;
                break;
            }
            mu[ip] = -mu[i];
        }
    }
    Ok(mu)
}

/// Sup over the pooled sample's order statistics of the absolute
/// difference between the block EDF and the pooled EDF (half-line class).
pub fn edf_sup_distance(block: &[f64], pooled: &[f64]) -> f64 {
    assert!(
        !block.is_empty() && !pooled.is_empty(),
        "both samples must be nonempty"
    );
    let mut b = block.to_vec();
    let mut p = pooled.to_vec();
    b.sort_unstable_by(|x, y| x.partial_cmp(y).expect("comparable values"));
    p.sort_unstable_by(|x, y| x.partial_cmp(y).expect("comparable values"));
    let (nb, np) = (b.len() as f64, p.len() as f64);
    let mut i = 0usize;
    let mut k = 0usize;
    let mut sup = 0.0f64;
    while k < p.len() {
        let x = p[k];
        while k < p.len() && p[k] == x {
            k += 1;
        }
        while i < b.len() && b[i] <= x {
            i += 1;
        }
        sup = sup.max((i as f64 / nb - k as f64 / np).abs());
    }
    sup
}

/// Assess strict stationarity of a scalar series: split into `regions`
/// contiguous equal blocks, compare each block EDF against the pooled EDF,
/// and fold the indicators through the same recursive posterior;
/// STATIONARY when the final mean reaches 0.5.
pub fn assess_stationarity(
    series: &[f64],
    regions: usize,
    bound: AdaptiveBound,
) -> Result<AssessmentReport<StationarityVerdict>> {
    const MIN_BLOCK: usize = 2;
    if regions < 1 {
        return Err(Error::Precondition("need at least one region".into()));
    }
    let block = series.len() / regions;
    if block < MIN_BLOCK {
        return Err(Error::SeriesTooShort(format!(
            "{} values cannot fill {} regions with blocks of at least {}",
            series.len(),
            regions,
            MIN_BLOCK
        )));
    }
    let used = &series[..block * regions];
    let distances: Vec<f64> = (0..regions)
        .into_par_iter()
        .map(|j| edf_sup_distance(&used[j * block..(j + 1) * block], used))
        .collect();
    let (records, post) = run_stages(
        |j| Some(distances[(j - 1) as usize]),
        regions,
        bound,
    );
    let (mean, _, interval) = posterior_summary(&post);
    Ok(AssessmentReport {
        stages: records,
        verdict: if mean >= 0.5 {
            StationarityVerdict::Stationary
        } else {
            StationarityVerdict::Nonstationary
        },
        final_mean: mean,
        final_interval: interval,
    })
}

/// AR(1) sample path `x_t = rho x_{t-1} + e_t` with standard normal
/// innovations, started at zero.
pub fn ar1_series(rho: f64, length: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, domain::SERIES, 0, 0);
    let normal = rand_distr::Normal::new(0.0, 1.0).expect("valid normal");
    let mut out = Vec::with_capacity(length);
    let mut x = 0.0f64;
    for _ in 0..length {
        x = rho * x + normal.sample(&mut rng);
        out.push(x);
    }
    out
}
