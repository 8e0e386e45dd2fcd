//! Sequential posterior updaters: exponential-family conjugate recursion,
//! Kalman filter with Joseph-form covariance updates, and a bootstrap
//! particle filter with ESS-triggered systematic resampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::open01;
use crate::stats::log_sum_exp;

/// The concrete conjugate families carried by [`NaturalParams`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    /// Beta prior, Bernoulli likelihood.
    BetaBernoulli,
    /// Gamma prior (shape/rate), Poisson likelihood.
    GammaPoisson,
    /// Normal prior on the mean of a Gaussian with known observation
    /// variance.
    GaussianKnownVariance { obs_variance: f64 },
}

/// Natural hyperparameters of a conjugate exponential-family prior: the
/// accumulated sufficient statistic `chi` and the pseudo-count `nu`.
/// Updating on an observation adds its sufficient statistic to `chi` and
/// one to `nu`.
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalParams {
    chi: f64,
    nu: f64,
    family: Family,
}

impl NaturalParams {
    /// Beta(a, b) prior for Bernoulli data; pseudo-counts must be positive.
    pub fn beta(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::Precondition(format!(
                "Beta pseudo-counts must be positive, got ({a}, {b})"
            )));
        }
        Ok(Self {
            chi: a - 1.0,
            nu: a + b - 2.0,
            family: Family::BetaBernoulli,
        })
    }

    /// Gamma(shape, rate) prior for Poisson counts.
    pub fn gamma(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && rate >= 0.0) {
            return Err(Error::Precondition(format!(
                "Gamma prior needs shape > 0 and rate >= 0, got ({shape}, {rate})"
            )));
        }
        Ok(Self {
            chi: shape - 1.0,
            nu: rate,
            family: Family::GammaPoisson,
        })
    }

    /// Normal(prior_mean, prior_variance) prior on the mean of Gaussian
    /// observations with known variance `obs_variance`.
    pub fn gaussian_known_variance(
        prior_mean: f64,
        prior_variance: f64,
        obs_variance: f64,
    ) -> Result<Self> {
        if !(prior_variance > 0.0 && obs_variance > 0.0) {
            return Err(Error::Precondition(
                "prior and observation variances must be positive".into(),
            ));
        }
        let nu = obs_variance / prior_variance;
        Ok(Self {
            chi: prior_mean * nu,
            nu,
            family: Family::GaussianKnownVariance { obs_variance },
        })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn chi(&self) -> f64 {
        self.chi
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    /// Beta posterior parameters (a, b).
    pub fn beta_params(&self) -> (f64, f64) {
        debug_assert_eq!(self.family, Family::BetaBernoulli);
        (self.chi + 1.0, self.nu - self.chi + 1.0)
    }

    /// Gamma posterior parameters (shape, rate).
    pub fn gamma_params(&self) -> (f64, f64) {
        debug_assert_eq!(self.family, Family::GammaPoisson);
        (self.chi + 1.0, self.nu)
    }

    /// Gaussian posterior (mean, variance) on the unknown mean.
    pub fn gaussian_params(&self) -> (f64, f64) {
        match self.family {
            Family::GaussianKnownVariance { obs_variance } => {
                (self.chi / self.nu, obs_variance / self.nu)
            }
            _ => panic!("not a Gaussian-known-variance belief"),
        }
    }
}

/// Add one observation's sufficient statistic to the hyperparameters.
pub fn conjugate_update(params: &NaturalParams, observation: f64) -> Result<NaturalParams> {
    let stat = match params.family {
        Family::BetaBernoulli => {
            if observation != 0.0 && observation != 1.0 {
                return Err(Error::OutsideSupport(format!(
                    "Bernoulli observation must be 0 or 1, got {observation}"
                )));
            }
            observation
        }
        Family::GammaPoisson => {
            if observation < 0.0 || observation.fract() != 0.0 {
                return Err(Error::OutsideSupport(format!(
                    "Poisson observation must be a nonnegative integer, got {observation}"
                )));
            }
            observation
        }
        Family::GaussianKnownVariance { .. } => {
            if !observation.is_finite() {
                return Err(Error::OutsideSupport(format!(
                    "Gaussian observation must be finite, got {observation}"
                )));
            }
            observation
        }
    };
    Ok(NaturalParams {
        chi: params.chi + stat,
        nu: params.nu + 1.0,
        family: params.family,
    })
}

/// Gaussian belief over a latent state.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Self {
        Self { mean, covariance }
    }
}

/// Linear Gaussian state-space model: state transition F, observation H,
/// process noise Q, observation noise R.
#[derive(Debug, Clone)]
pub struct LinearGaussianModel {
    pub transition: DMatrix<f64>,
    pub observation: DMatrix<f64>,
    pub process_noise: DMatrix<f64>,
    pub obs_noise: DMatrix<f64>,
}

impl LinearGaussianModel {
    fn check_dims(&self, belief: &GaussianBelief) -> Result<()> {
        let d = belief.mean.len();
        if self.transition.ncols() != d || self.transition.nrows() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: self.transition.ncols(),
            });
        }
        if self.process_noise.nrows() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: self.process_noise.nrows(),
            });
        }
        if self.observation.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: self.observation.ncols(),
            });
        }
        if self.obs_noise.nrows() != self.observation.nrows() {
            return Err(Error::DimensionMismatch {
                expected: self.observation.nrows(),
                got: self.obs_noise.nrows(),
            });
        }
        Ok(())
    }
}

/// Prediction step: mean -> F mean, covariance -> F P F^T + Q.
pub fn kalman_predict(belief: &GaussianBelief, model: &LinearGaussianModel) -> Result<GaussianBelief> {
    model.check_dims(belief)?;
    let mean = &model.transition * &belief.mean;
    let cov = &model.transition * &belief.covariance * model.transition.transpose()
        + &model.process_noise;
    Ok(GaussianBelief {
        mean,
        covariance: symmetrize(cov),
    })
}

/// Result of a measurement update.
#[derive(Debug, Clone)]
pub struct KalmanUpdate {
    pub belief: GaussianBelief,
    pub innovation: DVector<f64>,
    pub gain: DMatrix<f64>,
}

/// Measurement update with the Joseph-stabilized covariance form
/// `(I - K H) P (I - K H)^T + K R K^T`, algebraically equal to
/// `(I - K H) P` but symmetric in finite precision.
pub fn kalman_update(
    belief: &GaussianBelief,
    model: &LinearGaussianModel,
    observation: &DVector<f64>,
) -> Result<KalmanUpdate> {
    model.check_dims(belief)?;
    if observation.len() != model.observation.nrows() {
        return Err(Error::DimensionMismatch {
            expected: model.observation.nrows(),
            got: observation.len(),
        });
    }
    let h = &model.observation;
    let innovation = observation - h * &belief.mean;
    let s = h * &belief.covariance * h.transpose() + &model.obs_noise;
    let s_inv = s.try_inverse().ok_or(Error::SingularInnovation)?;
    let gain = &belief.covariance * h.transpose() * s_inv;
    let mean = &belief.mean + &gain * &innovation;
    let d = belief.mean.len();
    let ikh = DMatrix::identity(d, d) - &gain * h;
    let cov = &ikh * &belief.covariance * ikh.transpose()
        + &gain * &model.obs_noise * gain.transpose();
    Ok(KalmanUpdate {
        belief: GaussianBelief {
            mean,
            covariance: symmetrize(cov),
        },
        innovation,
        gain,
    })
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Weighted particle approximation of a posterior.
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    /// One particle per row.
    pub particles: DMatrix<f64>,
    /// Normalized weights.
    pub weights: Vec<f64>,
}

impl ParticleEnsemble {
    /// Equal-weight ensemble from initial particles.
    pub fn new(particles: DMatrix<f64>) -> Self {
        let n = particles.nrows();
        Self {
            particles,
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn len(&self) -> usize {
        self.particles.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Weighted posterior mean.
    pub fn mean(&self) -> DVector<f64> {
        let d = self.particles.ncols();
        let mut mean = DVector::zeros(d);
        for (i, w) in self.weights.iter().enumerate() {
            for j in 0..d {
                mean[j] += w * self.particles[(i, j)];
            }
        }
        mean
    }
}

/// Effective sample size `1 / sum w_i^2` of normalized weights.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    1.0 / sum_sq
}

/// One bootstrap-filter step: propagate every particle through the
/// transition sampler, reweight by the observation log-likelihood,
/// normalize, and systematically resample to equal weights when the
/// effective sample size falls below `ess_threshold`.
pub fn pf_step<R, T, L>(
    ensemble: &ParticleEnsemble,
    mut transition: T,
    log_likelihood: L,
    ess_threshold: f64,
    rng: &mut R,
) -> Result<ParticleEnsemble>
where
    R: Rng,
    T: FnMut(&DVector<f64>, &mut R) -> DVector<f64>,
    L: Fn(&DVector<f64>) -> f64,
{
    let n = ensemble.len();
    let d = ensemble.particles.ncols();
    let mut propagated = DMatrix::zeros(n, d);
    let mut log_weights = vec![0.0f64; n];
    for i in 0..n {
        let particle = DVector::from_iterator(d, ensemble.particles.row(i).iter().copied());
        let next = transition(&particle, rng);
        let ll = log_likelihood(&next);
        log_weights[i] = ensemble.weights[i].ln() + ll;
        propagated.row_mut(i).copy_from_slice(next.as_slice());
    }
    let norm = log_sum_exp(&log_weights);
    if norm == f64::NEG_INFINITY {
        return Err(Error::Degeneracy(
            "every particle has zero likelihood".into(),
        ));
    }
    let mut weights: Vec<f64> = log_weights.iter().map(|lw| (lw - norm).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }

    if effective_sample_size(&weights) < ess_threshold {
        let indices = systematic_resample(&weights, rng);
        let mut resampled = DMatrix::zeros(n, d);
        for (row, &src) in indices.iter().enumerate() {
            resampled.row_mut(row).copy_from(&propagated.row(src));
        }
        Ok(ParticleEnsemble {
            particles: resampled,
            weights: vec![1.0 / n as f64; n],
        })
    } else {
        Ok(ParticleEnsemble {
            particles: propagated,
            weights,
        })
    }
}

/// Systematic resampling: one uniform offset, N evenly spaced pointers.
fn systematic_resample<R: Rng>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let n = weights.len();
    let step = 1.0 / n as f64;
    let mut pointer = open01(rng) * step;
    let mut indices = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut j = 0usize;
    for _ in 0..n {
        while pointer > cum && j + 1 < n {
            j += 1;
            cum += weights[j];
        }
        indices.push(j);
        pointer += step;
    }
    indices
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, stream};
    use approx::assert_relative_eq;
    use rand_distr::StandardNormal;

    #[test]
    fn beta_bernoulli_update() {
        let prior = NaturalParams::beta(1.0, 1.0).unwrap();
        let post = conjugate_update(&prior, 1.0).unwrap();
        assert_eq!(post.beta_params(), (2.0, 1.0));
        let post2 = conjugate_update(&post, 0.0).unwrap();
        assert_eq!(post2.beta_params(), (2.0, 2.0));
        assert!(conjugate_update(&prior, 0.5).is_err());
    }

    #[test]
    fn gamma_poisson_update() {
        let prior = NaturalParams::gamma(2.0, 3.0).unwrap();
        let post = conjugate_update(&prior, 4.0).unwrap();
        assert_eq!(post.gamma_params(), (6.0, 4.0));
        assert!(conjugate_update(&prior, -1.0).is_err());
        assert!(conjugate_update(&prior, 2.5).is_err());
    }

    #[test]
    fn sequential_equals_batch_and_permutation_invariant() {
        let prior = NaturalParams::beta(1.0, 1.0).unwrap();
        let data = [1.0, 0.0, 1.0, 1.0, 0.0, 1.0];
        let mut forward = prior.clone();
        for &x in &data {
            forward = conjugate_update(&forward, x).unwrap();
        }
        let mut backward = prior.clone();
        for &x in data.iter().rev() {
            backward = conjugate_update(&backward, x).unwrap();
        }
        assert_eq!(forward, backward);
        assert_eq!(forward.beta_params(), (5.0, 3.0));
    }

    fn scalar_model(f: f64, h: f64, q: f64, r: f64) -> LinearGaussianModel {
        LinearGaussianModel {
            transition: DMatrix::from_element(1, 1, f),
            observation: DMatrix::from_element(1, 1, h),
            process_noise: DMatrix::from_element(1, 1, q),
            obs_noise: DMatrix::from_element(1, 1, r),
        }
    }

    #[test]
    fn predict_identity_and_scalar() {
        let belief = GaussianBelief::new(DVector::from_element(1, 1.0), DMatrix::from_element(1, 1, 1.0));
        let same = kalman_predict(&belief, &scalar_model(1.0, 1.0, 0.0, 1.0)).unwrap();
        assert_eq!(same.mean[0], 1.0);
        assert_eq!(same.covariance[(0, 0)], 1.0);

        // F=2, Q=0.5: mean 2, var 2^2 * 1 + 0.5
        let scaled = kalman_predict(&belief, &scalar_model(2.0, 1.0, 0.5, 1.0)).unwrap();
        assert_relative_eq!(scaled.mean[0], 2.0);
        assert_relative_eq!(scaled.covariance[(0, 0)], 4.5);

        // F=0, Q=I: prior forgotten
        let reset = kalman_predict(&belief, &scalar_model(0.0, 1.0, 1.0, 1.0)).unwrap();
        assert_relative_eq!(reset.mean[0], 0.0);
        assert_relative_eq!(reset.covariance[(0, 0)], 1.0);
    }

    #[test]
    fn update_matches_conjugate_gaussian_product() {
        // prior N(0,1), obs 2 with R=1: posterior N(1, 0.5)
        let belief = GaussianBelief::new(DVector::zeros(1), DMatrix::from_element(1, 1, 1.0));
        let model = scalar_model(1.0, 1.0, 0.0, 1.0);
        let upd = kalman_update(&belief, &model, &DVector::from_element(1, 2.0)).unwrap();
        assert_relative_eq!(upd.belief.mean[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(upd.belief.covariance[(0, 0)], 0.5, epsilon = 1e-12);
        assert_relative_eq!(upd.innovation[0], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn update_with_zero_observation_matrix_is_noop() {
        let belief = GaussianBelief::new(DVector::from_element(1, 0.3), DMatrix::from_element(1, 1, 2.0));
        let model = scalar_model(1.0, 0.0, 0.0, 1.0);
        let upd = kalman_update(&belief, &model, &DVector::from_element(1, 9.0)).unwrap();
        assert_relative_eq!(upd.belief.mean[0], 0.3, epsilon = 1e-12);
        assert_relative_eq!(upd.belief.covariance[(0, 0)], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn tiny_observation_noise_pins_mean_to_observation() {
        let belief = GaussianBelief::new(DVector::zeros(1), DMatrix::from_element(1, 1, 1.0));
        let model = scalar_model(1.0, 1.0, 0.0, 1e-12);
        let upd = kalman_update(&belief, &model, &DVector::from_element(1, 3.0)).unwrap();
        assert_relative_eq!(upd.belief.mean[0], 3.0, epsilon = 1e-6);
    }

    #[test]
    fn singular_innovation_is_an_error() {
        let belief = GaussianBelief::new(DVector::zeros(1), DMatrix::zeros(1, 1));
        let model = scalar_model(1.0, 1.0, 0.0, 0.0);
        assert!(matches!(
            kalman_update(&belief, &model, &DVector::zeros(1)),
            Err(Error::SingularInnovation)
        ));
    }

    #[test]
    fn static_parameter_filter_equals_closed_form_posterior() {
        // F=I, Q=0: filtering n observations of a static parameter equals
        // the conjugate Gaussian posterior
        //   var = 1/(1/v0 + n/r), mean = var * (m0/v0 + sum x / r).
        let mut belief =
            GaussianBelief::new(DVector::from_element(1, 0.5), DMatrix::from_element(1, 1, 2.0));
        let model = scalar_model(1.0, 1.0, 0.0, 0.7);
        let mut rng = stream(2, domain::TEST, 0, 0);
        let mut sum = 0.0;
        let n = 100;
        for _ in 0..n {
            let x: f64 = 1.3 + 0.7f64.sqrt() * rng.sample::<f64, _>(StandardNormal);
            sum += x;
            belief = kalman_predict(&belief, &model).unwrap();
            belief = kalman_update(&belief, &model, &DVector::from_element(1, x))
                .unwrap()
                .belief;
        }
        let var = 1.0 / (1.0 / 2.0 + n as f64 / 0.7);
        let mean = var * (0.5 / 2.0 + sum / 0.7);
        assert_relative_eq!(belief.mean[0], mean, epsilon = 1e-10);
        assert_relative_eq!(belief.covariance[(0, 0)], var, epsilon = 1e-10);
    }

    #[test]
    fn covariances_stay_spd_under_random_models() {
        let mut rng = stream(3, domain::TEST, 0, 0);
        let mut belief = GaussianBelief::new(DVector::zeros(2), DMatrix::identity(2, 2));
        for _ in 0..10_000 {
            let rand_mat = |rng: &mut rand_chacha::ChaCha8Rng, scale: f64| {
                DMatrix::from_fn(2, 2, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
            };
            let f = rand_mat(&mut rng, 0.5);
            let g = rand_mat(&mut rng, 0.3);
            let model = LinearGaussianModel {
                transition: f,
                observation: DMatrix::identity(2, 2),
                process_noise: &g * g.transpose(),
                obs_noise: DMatrix::identity(2, 2),
            };
            belief = kalman_predict(&belief, &model).unwrap();
            let obs = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
            belief = kalman_update(&belief, &model, &obs).unwrap().belief;
            let eig = belief.covariance.clone().symmetric_eigenvalues();
            assert!(
                eig.iter().all(|&v| v >= -1e-10),
                "covariance lost positive semidefiniteness: {eig:?}"
            );
        }
    }

    #[test]
    fn ess_known_values() {
        assert_relative_eq!(effective_sample_size(&vec![0.01; 100]), 100.0, epsilon = 1e-9);
        let mut onehot = vec![0.0; 8];
        onehot[3] = 1.0;
        assert_relative_eq!(effective_sample_size(&onehot), 1.0);
        assert_relative_eq!(effective_sample_size(&[0.5, 0.5, 0.0, 0.0]), 2.0);
    }

    #[test]
    fn constant_likelihood_keeps_weights() {
        let particles = DMatrix::from_fn(100, 1, |i, _| i as f64);
        let ens = ParticleEnsemble::new(particles);
        let mut rng = stream(4, domain::TEST, 0, 0);
        let next = pf_step(&ens, |x, _| x.clone(), |_| 0.0, 50.0, &mut rng).unwrap();
        for w in &next.weights {
            assert_relative_eq!(*w, 0.01, epsilon = 1e-12);
        }
        assert_eq!(next.particles, ens.particles);
    }

    #[test]
    fn total_mass_collapse_resamples_to_that_particle() {
        let particles = DMatrix::from_fn(50, 1, |i, _| i as f64);
        let ens = ParticleEnsemble::new(particles);
        let mut rng = stream(5, domain::TEST, 0, 0);
        let next = pf_step(
            &ens,
            |x, _| x.clone(),
            |x| if x[0] == 7.0 { 0.0 } else { f64::NEG_INFINITY },
            25.0,
            &mut rng,
        )
        .unwrap();
        for i in 0..next.len() {
            assert_eq!(next.particles[(i, 0)], 7.0);
        }
        assert_relative_eq!(effective_sample_size(&next.weights), 50.0);
    }

    #[test]
    fn zero_likelihood_everywhere_is_degenerate() {
        let ens = ParticleEnsemble::new(DMatrix::zeros(10, 1));
        let mut rng = stream(6, domain::TEST, 0, 0);
        assert!(matches!(
            pf_step(&ens, |x, _| x.clone(), |_| f64::NEG_INFINITY, 5.0, &mut rng),
            Err(Error::Degeneracy(_))
        ));
    }

    #[test]
    fn weights_normalized_after_every_step() {
        let mut rng = stream(7, domain::TEST, 0, 0);
        let mut ens = ParticleEnsemble::new(DMatrix::from_fn(200, 1, |i, _| (i as f64) / 100.0));
        for step in 0..50 {
            ens = pf_step(
                &ens,
                |x, r| {
                    DVector::from_element(1, 0.9 * x[0] + 0.3 * r.sample::<f64, _>(StandardNormal))
                },
                |x| -0.5 * (x[0] - 0.2) * (x[0] - 0.2),
                100.0,
                &mut rng,
            )
            .unwrap();
            let sum: f64 = ens.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "step {step}: weight sum {sum}");
            let ess = effective_sample_size(&ens.weights);
            assert!(ess >= 1.0 - 1e-9 && ess <= 200.0 + 1e-9);
        }
    }

    #[test]
    fn filtered_mean_tracks_kalman_oracle() {
        // Scalar linear-Gaussian model over 100 steps: the particle mean
        // must track the exact Kalman mean with small RMSE.
        let (f, q, r) = (0.95, 0.3, 0.5);
        let model = scalar_model(f, 1.0, q, r);
        let mut rng = stream(8, domain::TEST, 0, 0);

        let mut truth = 0.0f64;
        let mut observations = Vec::with_capacity(100);
        for _ in 0..100 {
            truth = f * truth + q.sqrt() * rng.sample::<f64, _>(StandardNormal);
            observations.push(truth + r.sqrt() * rng.sample::<f64, _>(StandardNormal));
        }

        let n = 10_000;
        let mut ens = ParticleEnsemble::new(DMatrix::from_fn(n, 1, |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        }));
        let mut belief = GaussianBelief::new(DVector::zeros(1), DMatrix::identity(1, 1));
        let mut sq_err = 0.0;
        for &obs in &observations {
            belief = kalman_predict(&belief, &model).unwrap();
            belief = kalman_update(&belief, &model, &DVector::from_element(1, obs))
                .unwrap()
                .belief;
            ens = pf_step(
                &ens,
                |x, rng| {
                    DVector::from_element(
                        1,
                        f * x[0] + q.sqrt() * rng.sample::<f64, _>(StandardNormal),
                    )
                },
                |x| -0.5 * (obs - x[0]) * (obs - x[0]) / r,
                n as f64 / 2.0,
                &mut rng,
            )
            .unwrap();
            let diff = ens.mean()[0] - belief.mean[0];
            sq_err += diff * diff;
        }
        let rmse = (sq_err / 100.0).sqrt();
        assert!(rmse < 0.1, "particle-vs-Kalman RMSE {rmse}");
    }
}
