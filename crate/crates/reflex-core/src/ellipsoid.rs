//! Nested ellipsoidal partition of R^d: membership, exact region volumes,
//! and exact uniform sampling inside each region.
//!
//! Region `i` (0-based) is the annulus `c_{i-1} < m(x) <= c_i` in squared
//! Mahalanobis distance `m(x) = (x - mu)^T Sigma^{-1} (x - mu)`, with
//! `c_{-1} = 0` so region 0 is the central closed ellipsoid. Points beyond
//! the outermost radius report `Overflow`. Boundary ties go to the inner
//! region.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::rng::open01;

/// Configuration for the default partition construction.
#[derive(Debug, Clone)]
pub struct PartitionConfig {
    /// Mahalanobis-radius spacing: sqrt(c_i) = (i + 1) * radius_step.
    pub radius_step: f64,
    /// Number of regions; `None` picks the smallest count whose outer
    /// radius covers the chi-square(d) quantile at 1 - 1e-6, so a
    /// reference Gaussian leaves negligible mass outside.
    pub num_regions: Option<usize>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            radius_step: 1.0,
            num_regions: None,
        }
    }
}

/// Where a point falls relative to the partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionLocation {
    /// 0-based region index.
    Region(usize),
    /// Beyond the outermost radius.
    Overflow,
}

/// Immutable nested ellipsoidal partition: center, lower-triangular scale
/// factor B (Sigma = B B^T), and strictly increasing squared radii.
#[derive(Debug, Clone)]
pub struct EllipsoidalPartition {
    center: DVector<f64>,
    scale_lower: DMatrix<f64>,
    radii_sq: Vec<f64>,
    log_det_scale: f64,
}

impl EllipsoidalPartition {
    /// Build from explicit parts. `scale_lower` must be lower triangular
    /// with positive diagonal; `radii_sq` strictly increasing and positive.
    pub fn new(
        center: DVector<f64>,
        scale_lower: DMatrix<f64>,
        radii_sq: Vec<f64>,
    ) -> Result<Self> {
        let d = center.len();
        if scale_lower.nrows() != d || scale_lower.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: scale_lower.nrows(),
            });
        }
        if scale_lower.diagonal().iter().any(|&v| v <= 0.0) {
            return Err(Error::NotPositiveDefinite(
                "partition scale factor must have positive diagonal".into(),
            ));
        }
        if radii_sq.is_empty() || radii_sq[0] <= 0.0 {
            return Err(Error::Precondition(
                "first squared radius must be strictly positive".into(),
            ));
        }
        if radii_sq.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Precondition(
                "squared radii must be strictly increasing".into(),
            ));
        }
        let log_det_scale = scale_lower.diagonal().iter().map(|v| v.ln()).sum();
        Ok(Self {
            center,
            scale_lower,
            radii_sq,
            log_det_scale,
        })
    }

    /// Partition with center `pilot_mean` and scale from the Cholesky
    /// factor of `pilot_cov`, radii equally spaced in Mahalanobis radius.
    pub fn build_default(
        pilot_mean: &DVector<f64>,
        pilot_cov: &DMatrix<f64>,
        cfg: &PartitionConfig,
    ) -> Result<Self> {
        let d = pilot_mean.len();
        let lower = nalgebra::Cholesky::new(pilot_cov.clone())
            .map(|c| c.l())
            .ok_or_else(|| Error::NotPositiveDefinite("pilot covariance".into()))?;
        let step = cfg.radius_step;
        if !(step > 0.0) {
            return Err(Error::Precondition("radius step must be positive".into()));
        }
        let regions = match cfg.num_regions {
            Some(m) if m >= 1 => m,
            Some(_) => return Err(Error::Precondition("need at least one region".into())),
            None => {
                let chi = ChiSquared::new(d as f64).expect("d >= 1");
                let needed = chi.inverse_cdf(1.0 - 1e-6).sqrt();
                ((needed / step).ceil() as usize).max(1)
            }
        };
        let radii_sq = (1..=regions)
            .map(|i| (i as f64 * step).powi(2))
            .collect();
        Self::new(pilot_mean.clone(), lower, radii_sq)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Number of regions M.
    pub fn regions(&self) -> usize {
        self.radii_sq.len()
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn scale_lower(&self) -> &DMatrix<f64> {
        &self.scale_lower
    }

    /// Squared radii c_0 < c_1 < ... (0-based; the implicit inner bound of
    /// region 0 is zero).
    pub fn radii_sq(&self) -> &[f64] {
        &self.radii_sq
    }

    fn radius_bounds(&self, region: usize) -> (f64, f64) {
        let lo = if region == 0 {
            0.0
        } else {
            self.radii_sq[region - 1]
        };
        (lo, self.radii_sq[region])
    }

    /// Squared Mahalanobis distance of `point` from the center.
    pub fn mahalanobis_sq(&self, point: &DVector<f64>) -> f64 {
        let diff = point - &self.center;
        let y = self
            .scale_lower
            .solve_lower_triangular(&diff)
            .expect("scale factor has positive diagonal");
        y.norm_squared()
    }

    /// Smallest region containing `point`; boundary ties to the inner
    /// region; `Overflow` beyond the outermost radius.
    pub fn region_index(&self, point: &DVector<f64>) -> RegionLocation {
        let m = self.mahalanobis_sq(point);
        match self.radii_sq.partition_point(|&c| c < m) {
            i if i < self.radii_sq.len() => RegionLocation::Region(i),
            _ => RegionLocation::Overflow,
        }
    }

    /// Natural log of the Lebesgue measure of region `i`:
    /// `log|B| + (d/2) log pi - log Gamma(d/2 + 1) + log(c_i^{d/2} - c_{i-1}^{d/2})`.
    pub fn log_lebesgue_measure(&self, region: usize) -> Result<f64> {
        if region >= self.regions() {
            return Err(Error::RegionOutOfRange {
                index: region,
                regions: self.regions(),
            });
        }
        let d = self.dim() as f64;
        let (lo, hi) = self.radius_bounds(region);
        let log_ball = self.log_det_scale + 0.5 * d * std::f64::consts::PI.ln()
            - ln_gamma(0.5 * d + 1.0);
        // log(hi^{d/2} - lo^{d/2}) without forming the powers directly
        let log_shell = 0.5 * d * hi.ln()
            + if lo > 0.0 {
                (-((lo / hi).powf(0.5 * d))).ln_1p()
            } else {
                0.0
            };
        Ok(log_ball + log_shell)
    }

    /// Exact Lebesgue measure of region `i`.
    pub fn lebesgue_measure(&self, region: usize) -> Result<f64> {
        self.log_lebesgue_measure(region).map(f64::exp)
    }

    /// Exact uniform draw from region `i`: uniform direction on the sphere
    /// and inverse-CDF radius with density proportional to r^{d-1} on
    /// [sqrt(c_{i-1}), sqrt(c_i)].
    pub fn sample_uniform_region<R: Rng>(&self, region: usize, rng: &mut R) -> DVector<f64> {
        assert!(region < self.regions(), "region out of range");
        let d = self.dim();
        let mut direction = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        while direction.norm_squared() == 0.0 {
            direction = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        }
        direction /= direction.norm();
        let (lo, hi) = self.radius_bounds(region);
        let u = open01(rng);
        let half_d = 0.5 * d as f64;
        let lo_pow = if lo > 0.0 { lo.powf(half_d) } else { 0.0 };
        let radius = (lo_pow + u * (hi.powf(half_d) - lo_pow)).powf(1.0 / d as f64);
        &self.center + &self.scale_lower * (radius * direction)
    }

    /// Extend with `additional` regions continuing the trailing
    /// Mahalanobis-radius spacing. Existing radii are unchanged.
    pub fn extended(&self, additional: usize) -> Self {
        let m = self.regions();
        let last = self.radii_sq[m - 1].sqrt();
        let step = if m >= 2 {
            last - self.radii_sq[m - 2].sqrt()
        } else {
            last
        };
        let mut radii_sq = self.radii_sq.clone();
        radii_sq.extend((1..=additional).map(|k| (last + k as f64 * step).powi(2)));
        Self {
            center: self.center.clone(),
            scale_lower: self.scale_lower.clone(),
            radii_sq,
            log_det_scale: self.log_det_scale,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, stream};
    use approx::assert_relative_eq;

    fn v(values: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(values)
    }

    fn unit_partition(d: usize, radii_sq: &[f64]) -> EllipsoidalPartition {
        EllipsoidalPartition::new(
            DVector::zeros(d),
            DMatrix::identity(d, d),
            radii_sq.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn mahalanobis_identity_scale() {
        let p = unit_partition(2, &[1.0]);
        assert_relative_eq!(p.mahalanobis_sq(&v(&[3.0, 4.0])), 25.0, epsilon = 1e-12);
        assert_relative_eq!(p.mahalanobis_sq(&v(&[0.0, 0.0])), 0.0);
    }

    #[test]
    fn mahalanobis_diagonal_scale() {
        let p = EllipsoidalPartition::new(
            v(&[0.0]),
            DMatrix::from_element(1, 1, 2.0),
            vec![1.0],
        )
        .unwrap();
        assert_relative_eq!(p.mahalanobis_sq(&v(&[2.0])), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn region_index_brackets_and_overflow() {
        let p = unit_partition(1, &[1.0, 4.0, 9.0]);
        assert_eq!(p.region_index(&v(&[0.5])), RegionLocation::Region(0));
        // boundary point (m = 4 exactly) belongs to the inner region
        assert_eq!(p.region_index(&v(&[2.0])), RegionLocation::Region(1));
        assert_eq!(p.region_index(&v(&[10.0])), RegionLocation::Overflow);
    }

    #[test]
    fn lebesgue_measures_match_geometry() {
        // d=1: the interval [-2, 2] has length 4
        let p1 = unit_partition(1, &[4.0]);
        assert_relative_eq!(p1.lebesgue_measure(0).unwrap(), 4.0, epsilon = 1e-12);

        // d=2: unit disk area pi, annulus 1 <= m <= 4 has area 3 pi
        let p2 = unit_partition(2, &[1.0, 4.0]);
        assert_relative_eq!(
            p2.lebesgue_measure(0).unwrap(),
            std::f64::consts::PI,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            p2.lebesgue_measure(1).unwrap(),
            3.0 * std::f64::consts::PI,
            epsilon = 1e-10
        );
        assert!(p2.lebesgue_measure(2).is_err());
    }

    #[test]
    fn default_partition_radii_and_scale() {
        let cfg = PartitionConfig {
            radius_step: 1.0,
            num_regions: Some(8),
        };
        let p = EllipsoidalPartition::build_default(
            &v(&[0.0]),
            &DMatrix::identity(1, 1),
            &cfg,
        )
        .unwrap();
        let expected: Vec<f64> = (1..=8).map(|i| (i as f64).powi(2)).collect();
        assert_eq!(p.radii_sq(), expected.as_slice());
        assert_eq!(p.scale_lower(), &DMatrix::identity(1, 1));

        let p2 = EllipsoidalPartition::build_default(
            &DVector::zeros(2),
            &(DMatrix::identity(2, 2) * 4.0),
            &cfg,
        )
        .unwrap();
        assert_relative_eq!(p2.scale_lower()[(0, 0)], 2.0, epsilon = 1e-12);
        assert_relative_eq!(p2.scale_lower()[(1, 1)], 2.0, epsilon = 1e-12);
    }

    #[test]
    fn default_region_count_covers_gaussian_mass() {
        // d=1: chi-square(1) quantile at 1-1e-6 is 23.93, radius 4.89 -> M=5
        let p = EllipsoidalPartition::build_default(
            &v(&[0.0]),
            &DMatrix::identity(1, 1),
            &PartitionConfig::default(),
        )
        .unwrap();
        assert_eq!(p.regions(), 5);
    }

    #[test]
    fn uniform_draws_stay_in_region_and_center() {
        let p = unit_partition(1, &[1.0]);
        let mut rng = stream(3, domain::TEST, 1, 0);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let x = p.sample_uniform_region(0, &mut rng);
            assert!(x[0].abs() <= 1.0);
            sum += x[0];
        }
        assert!((sum / n as f64).abs() < 0.01);
    }

    #[test]
    fn squared_radius_is_uniform_on_disk() {
        // d=2 ball: P(r^2 <= t) = t on [0,1]
        let p = unit_partition(2, &[1.0]);
        let mut rng = stream(4, domain::TEST, 2, 0);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| p.mahalanobis_sq(&p.sample_uniform_region(0, &mut rng)))
            .collect();
        let d = crate::stats::ks_statistic(&draws, |t| t.clamp(0.0, 1.0));
        assert!(d < 0.01, "KS statistic {d}");
    }

    #[test]
    fn squared_radius_cdf_on_annulus() {
        // d=2 annulus 1 <= m <= 4: P(r^2 <= t) = (t - 1) / 3
        let p = unit_partition(2, &[1.0, 4.0]);
        let mut rng = stream(5, domain::TEST, 3, 0);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| p.mahalanobis_sq(&p.sample_uniform_region(1, &mut rng)))
            .collect();
        let d = crate::stats::ks_statistic(&draws, |t| ((t - 1.0) / 3.0).clamp(0.0, 1.0));
        assert!(d < 0.01, "KS statistic {d}");
    }

    #[test]
    fn round_trip_region_membership() {
        let p = unit_partition(3, &[1.0, 4.0, 9.0, 16.0]);
        let mut rng = stream(6, domain::TEST, 4, 0);
        for region in 0..p.regions() {
            for _ in 0..10_000 {
                let x = p.sample_uniform_region(region, &mut rng);
                assert_eq!(p.region_index(&x), RegionLocation::Region(region));
            }
        }
    }

    #[test]
    fn volume_consistency_hit_or_miss() {
        // Hit-or-miss estimate over the bounding box of the outermost
        // ellipsoid agrees with the closed form within 3 relative SEs.
        let p = unit_partition(2, &[1.0, 4.0]);
        let mut rng = stream(7, domain::TEST, 5, 0);
        let half = 2.0; // sqrt(c_M) with identity scale
        let box_vol = (2.0 * half) * (2.0 * half);
        let n = 200_000;
        for region in 0..2 {
            let mut hits = 0u64;
            for _ in 0..n {
                let x = v(&[
                    rng.random_range(-half..half),
                    rng.random_range(-half..half),
                ]);
                if p.region_index(&x) == RegionLocation::Region(region) {
                    hits += 1;
                }
            }
            let frac = hits as f64 / n as f64;
            let estimate = box_vol * frac;
            let se = box_vol * (frac * (1.0 - frac) / n as f64).sqrt();
            let truth = p.lebesgue_measure(region).unwrap();
            assert!(
                (estimate - truth).abs() < 3.0 * se,
                "region {region}: estimate {estimate}, truth {truth}, se {se}"
            );
        }
    }

    #[test]
    fn affine_equivariance_bitwise() {
        let center = v(&[1.0, -2.0]);
        let lower = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.5, 1.5]);
        let shaped =
            EllipsoidalPartition::new(center.clone(), lower.clone(), vec![1.0, 4.0]).unwrap();
        let unit = unit_partition(2, &[1.0, 4.0]);
        for region in 0..2 {
            let mut r1 = stream(9, domain::TEST, 6, 0);
            let mut r2 = stream(9, domain::TEST, 6, 0);
            for _ in 0..1_000 {
                let a = shaped.sample_uniform_region(region, &mut r1);
                let b = &center + &lower * unit.sample_uniform_region(region, &mut r2);
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn extension_continues_spacing() {
        let p = unit_partition(1, &[1.0, 4.0, 9.0, 16.0]);
        let q = p.extended(4);
        let roots: Vec<f64> = q.radii_sq().iter().map(|c| c.sqrt()).collect();
        for (i, r) in roots.iter().enumerate() {
            assert_relative_eq!(*r, (i + 1) as f64, epsilon = 1e-9);
        }
        // radii already present are untouched
        assert_eq!(&q.radii_sq()[..4], p.radii_sq());
    }

}
