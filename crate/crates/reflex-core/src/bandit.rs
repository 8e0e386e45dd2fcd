//! Thompson-sampling bandits over simulated environments: conjugate
//! posteriors for Bernoulli and Gaussian arms, pseudo-regret accounting,
//! and a bridge that runs Thompson sampling on a non-conjugate logistic
//! arm model by drawing its parameter from the ellipsoidal sampler.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Distribution;

use crate::calibration::CalibrationConfig;
use crate::ellipsoid::PartitionConfig;
use crate::engine::{EngineConfig, SamplerState};
use crate::error::{Error, Result};
use crate::inference::{conjugate_update, NaturalParams};
use crate::rng::{domain, stream};
use crate::target::{make_builtin, BuiltinTargetSpec, TargetDistribution};

/// Reward model of one arm.
#[derive(Debug, Clone, Copy)]
pub enum ArmSpec {
    /// Bernoulli rewards with the given success probability.
    Bernoulli { mean: f64 },
    /// Gaussian rewards with known variance.
    Gaussian { mean: f64, variance: f64 },
}

impl ArmSpec {
    pub fn mean(&self) -> f64 {
        match *self {
            ArmSpec::Bernoulli { mean } => mean,
            ArmSpec::Gaussian { mean, .. } => mean,
        }
    }
}

/// A simulated K-armed environment.
#[derive(Debug, Clone)]
pub struct BanditEnvironment {
    pub arms: Vec<ArmSpec>,
    pub seed: u64,
}

impl BanditEnvironment {
    pub fn bernoulli(means: &[f64], seed: u64) -> Result<Self> {
        if means.is_empty() {
            return Err(Error::Precondition("need at least one arm".into()));
        }
        if means.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::Precondition(
                "Bernoulli means must lie in [0,1]".into(),
            ));
        }
        Ok(Self {
            arms: means.iter().map(|&mean| ArmSpec::Bernoulli { mean }).collect(),
            seed,
        })
    }

    pub fn best_mean(&self) -> f64 {
        self.arms.iter().map(ArmSpec::mean).fold(f64::NEG_INFINITY, f64::max)
    }

    fn draw_reward<R: Rng>(&self, arm: usize, rng: &mut R) -> f64 {
        match self.arms[arm] {
            ArmSpec::Bernoulli { mean } => {
                if rng.random::<f64>() < mean {
                    1.0
                } else {
                    0.0
                }
            }
            ArmSpec::Gaussian { mean, variance } => {
                mean + variance.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal)
            }
        }
    }
}

/// Decision rule for the interaction loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Thompson,
    UniformRandom,
}

/// One interaction record.
#[derive(Debug, Clone, Copy)]
pub struct BanditRecord {
    pub t: u64,
    pub action: usize,
    pub reward: f64,
}

/// Interaction log plus the per-arm posterior state.
#[derive(Debug, Clone)]
pub struct BanditHistory {
    pub records: Vec<BanditRecord>,
    pub posteriors: Vec<NaturalParams>,
}

/// Cumulative pseudo-regret per step.
#[derive(Debug, Clone)]
pub struct RegretTrace {
    pub cumulative: Vec<f64>,
}

impl RegretTrace {
    pub fn final_regret(&self) -> f64 {
        *self.cumulative.last().unwrap_or(&0.0)
    }
}

/// Index of the largest value, ties broken by the lowest index. Invariant
/// under any strictly increasing transform of the values.
pub fn argmax_lowest_tie(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One Thompson decision: a single posterior draw per arm, then the argmax
/// of the sampled means.
pub fn thompson_step<R: Rng>(posteriors: &[NaturalParams], rng: &mut R) -> usize {
    let sampled: Vec<f64> = posteriors.iter().map(|p| sample_mean(p, rng)).collect();
    argmax_lowest_tie(&sampled)
}

fn sample_mean<R: Rng>(posterior: &NaturalParams, rng: &mut R) -> f64 {
    match posterior.family() {
        crate::inference::Family::BetaBernoulli => {
            let (a, b) = posterior.beta_params();
            rand_distr::Beta::new(a, b)
                .expect("positive Beta parameters")
                .sample(rng)
        }
        crate::inference::Family::GaussianKnownVariance { .. } => {
            let (mean, var) = posterior.gaussian_params();
            mean + var.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal)
        }
        crate::inference::Family::GammaPoisson => {
            let (shape, rate) = posterior.gamma_params();
            rand_distr::Gamma::new(shape, 1.0 / rate)
                .expect("positive Gamma parameters")
                .sample(rng)
        }
    }
}

fn initial_posterior(arm: &ArmSpec) -> NaturalParams {
    match *arm {
        ArmSpec::Bernoulli { .. } => NaturalParams::beta(1.0, 1.0).expect("valid prior"),
        ArmSpec::Gaussian { variance, .. } => {
            NaturalParams::gaussian_known_variance(0.0, 100.0, variance).expect("valid prior")
        }
    }
}

/// Full interaction loop with conjugate updates after each reward;
/// deterministic per seed.
pub fn run_bandit(
    env: &BanditEnvironment,
    policy: Policy,
    horizon: usize,
    seed: u64,
) -> (BanditHistory, RegretTrace) {
    let k = env.arms.len();
    let mut rng = stream(seed, domain::BANDIT, env.seed, 0);
    let mut posteriors: Vec<NaturalParams> = env.arms.iter().map(initial_posterior).collect();
    let mut records = Vec::with_capacity(horizon);
    let mut cumulative = Vec::with_capacity(horizon);
    let best = env.best_mean();
    let mut regret = 0.0;
    for t in 0..horizon {
        let action = match policy {
            Policy::Thompson => thompson_step(&posteriors, &mut rng),
            Policy::UniformRandom => rng.random_range(0..k),
        };
        let reward = env.draw_reward(action, &mut rng);
        posteriors[action] = conjugate_update(&posteriors[action], reward)
            .expect("simulated reward lies in the arm's support");
        regret += best - env.arms[action].mean();
        records.push(BanditRecord {
            t: t as u64,
            action,
            reward,
        });
        cumulative.push(regret);
    }
    (
        BanditHistory {
            records,
            posteriors,
        },
        RegretTrace { cumulative },
    )
}

/// Contextual logistic environment: arm `a` has feature vector `x_a` and
/// pays a Bernoulli reward with success probability `sigma(w* . x_a)`.
#[derive(Debug, Clone)]
pub struct LogisticBanditEnv {
    pub features: Vec<DVector<f64>>,
    pub true_weights: DVector<f64>,
    pub prior_mean: DVector<f64>,
    pub prior_variance: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl LogisticBanditEnv {
    pub fn arm_mean(&self, arm: usize) -> f64 {
        sigmoid(self.true_weights.dot(&self.features[arm]))
    }

    pub fn best_mean(&self) -> f64 {
        (0..self.features.len())
            .map(|a| self.arm_mean(a))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Bridge state: the logistic posterior over the shared weight vector,
/// refreshed through the ellipsoidal sampler every `refresh_every`
/// observations. Between refreshes draws come from the stale posterior,
/// which the diagnostics count.
pub struct ExactPosteriorBridge {
    env_prior_mean: DVector<f64>,
    env_prior_variance: f64,
    refresh_every: usize,
    engine_template: EngineConfig,
    rows: Vec<DVector<f64>>,
    responses: Vec<u8>,
    sampler: Option<SamplerState>,
    obs_at_refresh: usize,
    refreshes: u64,
    stale_draws: u64,
    total_draws: u64,
    warm_start: DVector<f64>,
    warm_scale: f64,
}

/// Diagnostics of a bridge run.
#[derive(Debug, Clone, Copy)]
pub struct BridgeDiagnostics {
    pub refreshes: u64,
    pub stale_draws: u64,
    pub total_draws: u64,
}

impl ExactPosteriorBridge {
    /// Default bridge: refresh every 25 observations, lean calibration
    /// budgets suited to a low-dimensional posterior rebuilt many times.
    pub fn new(env: &LogisticBanditEnv, seed: u64) -> Self {
        let calibration = CalibrationConfig {
            n_min: 256,
            n_max: 4096,
            target_rel_se: 0.05,
            pilot_iters: 1_000,
            pilot_burnin: 400,
            seed,
            ..Default::default()
        };
        let engine_template = EngineConfig {
            partition: PartitionConfig::default(),
            calibration,
            max_regions: 0,
        };
        Self {
            env_prior_mean: env.prior_mean.clone(),
            env_prior_variance: env.prior_variance,
            refresh_every: 25,
            engine_template,
            rows: Vec::new(),
            responses: Vec::new(),
            sampler: None,
            obs_at_refresh: 0,
            refreshes: 0,
            stale_draws: 0,
            total_draws: 0,
            warm_start: env.prior_mean.clone(),
            warm_scale: env.prior_variance.sqrt(),
        }
    }

    fn posterior_target(&self) -> Result<TargetDistribution> {
        let dim = self.env_prior_mean.len();
        let design = if self.rows.is_empty() {
            DMatrix::zeros(0, dim)
        } else {
            DMatrix::from_fn(self.rows.len(), dim, |i, j| self.rows[i][j])
        };
        make_builtin(&BuiltinTargetSpec::LogisticRegression {
            design,
            responses: self.responses.clone(),
            prior_mean: self.env_prior_mean.clone(),
            prior_variance: self.env_prior_variance,
        })
    }

    fn refresh(&mut self) -> Result<()> {
        let target = self.posterior_target()?;
        let mut cfg = self.engine_template.clone();
        // one deterministic calibration stream family per refresh
        cfg.calibration.seed = stream(
            self.engine_template.calibration.seed,
            domain::BANDIT,
            1 + self.refreshes,
            1,
        )
        .random();
        let mut pilot_rng = stream(cfg.calibration.seed, domain::PILOT, 0, 0);
        let (mean, cov) = crate::calibration::run_pilot_scaled(
            &target,
            &self.warm_start,
            self.warm_scale,
            &cfg.calibration,
            &mut pilot_rng,
        )?;
        let partition =
            crate::ellipsoid::EllipsoidalPartition::build_default(&mean, &cov, &cfg.partition)?;
        self.sampler = Some(SamplerState::with_partition(target, partition, cfg)?);
        self.warm_start = mean;
        self.warm_scale = (cov.trace() / cov.nrows() as f64).sqrt().max(1e-6);
        self.obs_at_refresh = self.responses.len();
        self.refreshes += 1;
        Ok(())
    }

    /// Record an observed (feature, reward) pair; the posterior refreshes
    /// on the configured observation batch boundary.
    pub fn observe(&mut self, features: &DVector<f64>, reward: u8) {
        self.rows.push(features.clone());
        self.responses.push(reward);
    }

    fn needs_refresh(&self) -> bool {
        self.sampler.is_none()
            || self.responses.len() - self.obs_at_refresh >= self.refresh_every
    }

    pub fn diagnostics(&self) -> BridgeDiagnostics {
        BridgeDiagnostics {
            refreshes: self.refreshes,
            stale_draws: self.stale_draws,
            total_draws: self.total_draws,
        }
    }
}

/// One near-exact posterior draw of the shared weight vector, used as the
/// Thompson parameter sample. Refreshes the underlying sampler on batch
/// boundaries; otherwise draws from the stale posterior.
pub fn exact_posterior_arm_sample<R: Rng>(
    bridge: &mut ExactPosteriorBridge,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if bridge.needs_refresh() {
        bridge.refresh()?;
    } else {
        bridge.stale_draws += 1;
    }
    bridge.total_draws += 1;
    bridge
        .sampler
        .as_mut()
        .expect("sampler present after refresh")
        .draw_iid(rng)
}

/// Thompson sampling on the logistic environment via the ellipsoidal
/// bridge, or the uniform-random baseline.
pub fn run_logistic_bandit(
    env: &LogisticBanditEnv,
    policy: Policy,
    horizon: usize,
    seed: u64,
) -> Result<(RegretTrace, BridgeDiagnostics)> {
    let k = env.features.len();
    let mut rng = stream(seed, domain::BANDIT, 0, 2);
    let mut bridge = ExactPosteriorBridge::new(env, seed);
    let best = env.best_mean();
    let mut cumulative = Vec::with_capacity(horizon);
    let mut regret = 0.0;
    for _ in 0..horizon {
        let action = match policy {
            Policy::Thompson => {
                let theta = exact_posterior_arm_sample(&mut bridge, &mut rng)?;
                let values: Vec<f64> =
                    env.features.iter().map(|x| theta.dot(x)).collect();
                argmax_lowest_tie(&values)
            }
            Policy::UniformRandom => rng.random_range(0..k),
        };
        let reward = if rng.random::<f64>() < env.arm_mean(action) {
            1u8
        } else {
            0u8
        };
        if policy == Policy::Thompson {
            bridge.observe(&env.features[action], reward);
        }
        regret += best - env.arm_mean(action);
        cumulative.push(regret);
    }
    Ok((RegretTrace { cumulative }, bridge.diagnostics()))
}
