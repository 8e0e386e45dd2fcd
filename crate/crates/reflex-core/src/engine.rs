//! End-to-end iid sampling: component selection by estimated weights,
//! tail-triggered partition doubling, parallel batch generation, and the
//! total-variation error report.
//!
//! Batches are embarrassingly parallel: draw `k` of a batch owns the
//! stream `(seed, DRAW, k)`, so output is bit-identical for any worker
//! count. Doubling is the single synchronization point; when any in-flight
//! draw selects the outermost region, the partition extends once and only
//! the unfinished draws re-select against the renormalized weights.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::calibration::{
    calibrate_all, extend_calibrated, refine_region, run_pilot, CalibrationConfig,
    RegionCalibration,
};
use crate::ellipsoid::{EllipsoidalPartition, PartitionConfig};
use crate::error::{Error, Result};
use crate::perfect::{perfect_sample, ComponentSampleTrace};
use crate::rng::{domain, open01, stream};
use crate::target::TargetDistribution;

/// Full sampler configuration.
#[derive(Debug, Clone, Default)]
pub struct EngineConfig {
    pub partition: PartitionConfig,
    pub calibration: CalibrationConfig,
    /// Doubling cap on the number of regions.
    pub max_regions: usize,
}

impl EngineConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            calibration: CalibrationConfig {
                seed,
                ..Default::default()
            },
            ..Default::default()
        }
    }
}

const DEFAULT_MAX_REGIONS: usize = 1024;

/// Running totals across the life of a sampler.
#[derive(Debug, Clone, Default)]
pub struct SamplerCounters {
    pub draws_per_region: Vec<u64>,
    pub doubling_events: u64,
    pub coalescence_sum: u64,
    pub coalescence_count: u64,
    pub coalescence_max: u64,
    pub consistency_retries: u64,
}

impl SamplerCounters {
    fn record(&mut self, region: usize, coalescence: u64) {
        if self.draws_per_region.len() <= region {
            self.draws_per_region.resize(region + 1, 0);
        }
        self.draws_per_region[region] += 1;
        self.coalescence_sum += coalescence;
        self.coalescence_count += 1;
        self.coalescence_max = self.coalescence_max.max(coalescence);
    }

    pub fn coalescence_mean(&self) -> f64 {
        if self.coalescence_count == 0 {
            0.0
        } else {
            self.coalescence_sum as f64 / self.coalescence_count as f64
        }
    }

    pub fn total_draws(&self) -> u64 {
        self.draws_per_region.iter().sum()
    }
}

/// Nominal total-variation error of the calibrated mixture.
#[derive(Debug, Clone, Copy)]
pub struct TvErrorReport {
    /// 3 times the largest weight relative SE among positive regions.
    pub epsilon_proxy: f64,
    /// epsilon / 2.
    pub tv_bound: f64,
    /// Set when some region missed the configured rel-SE target;
    /// recalibration with a larger budget is advised.
    pub recalibrate: bool,
}

/// Per-batch summary.
#[derive(Debug, Clone)]
pub struct BatchDiagnostics {
    pub n: usize,
    pub dim: usize,
    pub seed: u64,
    pub regions: usize,
    pub weights: Vec<f64>,
    pub p_hat: Vec<Option<f64>>,
    pub draws_per_region: Vec<u64>,
    pub coalescence_mean: f64,
    pub coalescence_max: u64,
    pub doubling_events: u64,
    pub epsilon_proxy: f64,
    pub tv_bound: f64,
    pub recalibrate_advisory: bool,
    pub wall_seconds: f64,
}

/// A calibrated sampler: immutable partition snapshot, per-region
/// calibrations with normalized weights, and counters.
pub struct SamplerState {
    target: TargetDistribution,
    partition: EllipsoidalPartition,
    calibrations: Vec<RegionCalibration>,
    weights: Vec<f64>,
    config: EngineConfig,
    counters: SamplerCounters,
    /// Deterministic per-region refinements, computed on first demand by
    /// whichever draw trips a split inconsistency.
    refined: Mutex<HashMap<usize, RegionCalibration>>,
}

impl SamplerState {
    /// Pilot run, default partition, full calibration.
    pub fn build(target: TargetDistribution, config: EngineConfig) -> Result<Self> {
        config.calibration.validate()?;
        let mut pilot_rng = stream(config.calibration.seed, domain::PILOT, 0, 0);
        let (mean, cov) = run_pilot(&target, &config.calibration, &mut pilot_rng)?;
        let partition = EllipsoidalPartition::build_default(&mean, &cov, &config.partition)?;
        Self::with_partition(target, partition, config)
    }

    /// Calibrate an explicitly constructed partition.
    pub fn with_partition(
        target: TargetDistribution,
        partition: EllipsoidalPartition,
        config: EngineConfig,
    ) -> Result<Self> {
        config.calibration.validate()?;
        if target.dim() != partition.dim() {
            return Err(Error::DimensionMismatch {
                expected: target.dim(),
                got: partition.dim(),
            });
        }
        let set = calibrate_all(&target, &partition, &config.calibration)?;
        Ok(Self {
            target,
            partition,
            calibrations: set.regions,
            weights: set.weights,
            config,
            counters: SamplerCounters::default(),
            refined: Mutex::new(HashMap::new()),
        })
    }

    pub fn target(&self) -> &TargetDistribution {
        &self.target
    }

    pub fn partition(&self) -> &EllipsoidalPartition {
        &self.partition
    }

    pub fn calibrations(&self) -> &[RegionCalibration] {
        &self.calibrations
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn counters(&self) -> &SamplerCounters {
        &self.counters
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    fn max_regions(&self) -> usize {
        if self.config.max_regions == 0 {
            DEFAULT_MAX_REGIONS
        } else {
            self.config.max_regions
        }
    }

    /// Nominal TV error from the calibration relative SEs.
    pub fn tv_error_report(&self) -> TvErrorReport {
        let mut max_rel_se = 0.0f64;
        let mut recalibrate = false;
        for r in &self.calibrations {
            if r.is_zero_weight() {
                continue;
            }
            max_rel_se = max_rel_se.max(r.weight_rel_se);
            if r.weight_rel_se > self.config.calibration.target_rel_se {
                recalibrate = true;
            }
        }
        let epsilon_proxy = 3.0 * max_rel_se;
        TvErrorReport {
            epsilon_proxy,
            tv_bound: epsilon_proxy / 2.0,
            recalibrate,
        }
    }

    /// Extend the partition toward the doubling target, bounded by the
    /// region cap. Fails once the cap is reached.
    fn double(&mut self) -> Result<()> {
        let m = self.partition.regions();
        let cap = self.max_regions();
        if m >= cap {
            return Err(Error::TailMass {
                regions: m,
                outer_weight: *self.weights.last().unwrap_or(&0.0),
            });
        }
        let additional = m.min(cap - m);
        let extended = self.partition.extended(additional);
        // calibrate only the new regions on their own streams
        let fresh: Vec<RegionCalibration> = (m..extended.regions())
            .into_par_iter()
            .map(|i| {
                let mut rng = stream(
                    self.config.calibration.seed,
                    domain::CALIBRATE,
                    i as u64,
                    0,
                );
                crate::calibration::calibrate_region(
                    &self.target,
                    &extended,
                    i,
                    &self.config.calibration,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        self.calibrations.extend(fresh);
        self.weights = crate::calibration::normalized_weights(&self.calibrations)?;
        self.partition = extended;
        self.counters.doubling_events += 1;
        Ok(())
    }

    /// Perfect draw from component `region`, with the bounded
    /// recalibrate-and-retry on a split inconsistency.
    fn sample_component<R: Rng>(
        &self,
        region: usize,
        rng: &mut R,
    ) -> Result<(DVector<f64>, ComponentSampleTrace, bool)> {
        match perfect_sample(&self.target, &self.partition, &self.calibrations[region], rng) {
            Ok((x, trace)) => Ok((x, trace, false)),
            Err(Error::SplitInconsistency { .. }) => {
                let refined = self.refined_calibration(region)?;
                let (x, trace) = perfect_sample(&self.target, &self.partition, &refined, rng)?;
                Ok((x, trace, true))
            }
            Err(e) => Err(e),
        }
    }

    /// Fetch or compute the deterministic refined calibration (4x budget)
    /// for a region whose sampled extremes proved too tight.
    fn refined_calibration(&self, region: usize) -> Result<RegionCalibration> {
        {
            let cache = self.refined.lock().unwrap();
            if let Some(c) = cache.get(&region) {
                return Ok(c.clone());
            }
        }
        let fresh = refine_region(
            &self.target,
            &self.partition,
            region,
            &self.config.calibration,
            1,
        )?;
        let mut cache = self.refined.lock().unwrap();
        Ok(cache.entry(region).or_insert(fresh).clone())
    }

    /// One iid draw. Selecting the outermost region triggers a doubling
    /// and the draw restarts at component selection with the renormalized
    /// weights.
    pub fn draw_iid<R: Rng>(&mut self, rng: &mut R) -> Result<DVector<f64>> {
        loop {
            let u = open01(rng);
            let region = select_component(&self.weights, u)?;
            if region + 1 == self.partition.regions() {
                self.double()?;
                continue;
            }
            let (x, trace, retried) = self.sample_component(region, rng)?;
            if retried {
                self.counters.consistency_retries += 1;
            }
            self.counters.record(region, trace.coalescence_time);
            return Ok(x);
        }
    }

    /// Generate `n` draws on per-draw streams keyed by `(seed, index)`.
    /// Output rows are ordered by draw index and are bit-identical for any
    /// worker count.
    pub fn draw_iid_batch(&mut self, n: usize, seed: u64) -> Result<(DMatrix<f64>, BatchDiagnostics)> {
        if n == 0 {
            return Err(Error::Precondition("batch size must be at least 1".into()));
        }
        let started = Instant::now();
        let dim = self.target.dim();

        struct Slot {
            rng: rand_chacha::ChaCha8Rng,
            outcome: Option<Result<(usize, DVector<f64>, u64, bool)>>,
        }
        let mut slots: Vec<Slot> = (0..n)
            .map(|k| Slot {
                rng: stream(seed, domain::DRAW, k as u64, 0),
                outcome: None,
            })
            .collect();

        let mut batch_doublings = 0u64;
        loop {
            let weights = &self.weights;
            let outermost = self.partition.regions() - 1;
            let needs_doubling: Vec<bool> = slots
                .par_iter_mut()
                .map(|slot| {
                    if slot.outcome.is_some() {
                        return false;
                    }
                    let u = open01(&mut slot.rng);
                    let region = match select_component(weights, u) {
                        Ok(r) => r,
                        Err(e) => {
                            slot.outcome = Some(Err(e));
                            return false;
                        }
                    };
                    if region == outermost {
                        return true;
                    }
                    slot.outcome = Some(
                        self.sample_component(region, &mut slot.rng)
                            .map(|(x, trace, retried)| {
                                (region, x, trace.coalescence_time, retried)
                            }),
                    );
                    false
                })
                .collect();
            if needs_doubling.iter().any(|&b| b) {
                self.double()?;
                batch_doublings += 1;
            } else {
                break;
            }
        }

        let mut samples = DMatrix::zeros(n, dim);
        let mut per_region = vec![0u64; self.partition.regions()];
        let mut coal_sum = 0u64;
        let mut coal_max = 0u64;
        for (k, slot) in slots.into_iter().enumerate() {
            let (region, x, coalescence, retried) =
                slot.outcome.expect("all slots resolved")?;
            per_region[region] += 1;
            coal_sum += coalescence;
            coal_max = coal_max.max(coalescence);
            if retried {
                self.counters.consistency_retries += 1;
            }
            self.counters.record(region, coalescence);
            samples.row_mut(k).copy_from_slice(x.as_slice());
        }

        let tv = self.tv_error_report();
        let diagnostics = BatchDiagnostics {
            n,
            dim,
            seed,
            regions: self.partition.regions(),
            weights: self.weights.clone(),
            p_hat: self.calibrations.iter().map(|c| c.p_hat).collect(),
            draws_per_region: per_region,
            coalescence_mean: coal_sum as f64 / n as f64,
            coalescence_max: coal_max,
            doubling_events: batch_doublings,
            epsilon_proxy: tv.epsilon_proxy,
            tv_bound: tv.tv_bound,
            recalibrate_advisory: tv.recalibrate,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        Ok((samples, diagnostics))
    }
}

/// Smallest index whose cumulative weight bracket contains `u` (upper
/// bracket closed); zero-weight regions are never selected.
pub fn select_component(weights: &[f64], u: f64) -> Result<usize> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Precondition(format!(
            "selection variate must lie in (0,1), got {u}"
        )));
    }
    let mut cum = 0.0;
    let mut last_positive = None;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        cum += w;
        last_positive = Some(i);
        if u <= cum {
            return Ok(i);
        }
    }
    // u fell into the rounding sliver above the accumulated sum
    last_positive.ok_or(Error::TargetUnreachable)
}
