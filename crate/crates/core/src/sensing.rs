//! Observation generation with independent per-sensor outlier contamination,
//! and the two-point indicator model shared with the robust filter.
//!
//! Each sensor reading is y_l = H_l(x) + noise, where the noise variance is
//! R_ll under nominal conditions and R_ll/ς (inflated) when an outlier
//! occurs. The latent indicator ℐ_l takes the value 1 with probability θ_l
//! and ς otherwise.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dynamics::StateFn;
use crate::error::{Error, Result};
use crate::math::gaussian_log_pdf_1d;

/// Observation channel plus the noise/outlier parameters. R is diagonal and
/// constant over time; sensors are independent.
#[derive(Clone)]
pub struct ObservationModel {
    channel: StateFn,
    dim_obs: usize,
    noise_diag: DVector<f64>,
    outlier_free_prob: DVector<f64>,
    outlier_scale: f64,
}

impl ObservationModel {
    pub fn new(
        channel: StateFn,
        dim_obs: usize,
        noise_diag: DVector<f64>,
        outlier_free_prob: DVector<f64>,
        outlier_scale: f64,
    ) -> Result<Self> {
        if noise_diag.len() != dim_obs || outlier_free_prob.len() != dim_obs {
            return Err(Error::DimensionMismatch { expected: dim_obs, got: noise_diag.len() });
        }
        if noise_diag.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidParameter(
                "measurement noise variances must be positive".into(),
            ));
        }
        if !(outlier_scale > 0.0 && outlier_scale < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "outlier precision scale must lie in (0,1), got {outlier_scale}"
            )));
        }
        if outlier_free_prob.iter().any(|&t| !(0.0..=1.0).contains(&t)) {
            return Err(Error::InvalidParameter(
                "outlier-free probabilities must lie in [0,1]".into(),
            ));
        }
        Ok(Self { channel, dim_obs, noise_diag, outlier_free_prob, outlier_scale })
    }

    /// Channel projecting the first two state coordinates (the position).
    pub fn position(
        dim_state: usize,
        noise_diag: DVector<f64>,
        outlier_free_prob: DVector<f64>,
        outlier_scale: f64,
    ) -> Result<Self> {
        if dim_state < 2 {
            return Err(Error::InvalidParameter("position channel needs dim_state >= 2".into()));
        }
        let channel: StateFn =
            Arc::new(|x: &DVector<f64>| DVector::from_vec(vec![x[0], x[1]]));
        Self::new(channel, 2, noise_diag, outlier_free_prob, outlier_scale)
    }

    /// Identity channel observing the whole state.
    pub fn identity(
        dim_state: usize,
        noise_diag: DVector<f64>,
        outlier_free_prob: DVector<f64>,
        outlier_scale: f64,
    ) -> Result<Self> {
        let channel: StateFn = Arc::new(|x: &DVector<f64>| x.clone());
        Self::new(channel, dim_state, noise_diag, outlier_free_prob, outlier_scale)
    }

    /// Linear channel y = H x.
    pub fn linear(
        h: DMatrix<f64>,
        noise_diag: DVector<f64>,
        outlier_free_prob: DVector<f64>,
        outlier_scale: f64,
    ) -> Result<Self> {
        let dim_obs = h.nrows();
        let channel: StateFn = Arc::new(move |x: &DVector<f64>| &h * x);
        Self::new(channel, dim_obs, noise_diag, outlier_free_prob, outlier_scale)
    }

    /// Same model with the outlier-free probability forced to one on every
    /// sensor; the filter built on it reduces to a standard Gaussian filter.
    pub fn force_nominal(&self) -> Self {
        let mut copy = self.clone();
        copy.outlier_free_prob = DVector::from_element(self.dim_obs, 1.0);
        copy
    }

    pub fn dim_obs(&self) -> usize {
        self.dim_obs
    }

    pub fn noise_diag(&self) -> &DVector<f64> {
        &self.noise_diag
    }

    pub fn outlier_free_prob(&self) -> &DVector<f64> {
        &self.outlier_free_prob
    }

    pub fn outlier_scale(&self) -> f64 {
        self.outlier_scale
    }

    pub fn channel_eval(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.channel)(x)
    }

    pub fn indicator_density(&self) -> IndicatorDensity {
        IndicatorDensity {
            no_outlier_prob: self.outlier_free_prob.clone(),
            outlier_value: self.outlier_scale,
        }
    }

    /// Draw an observation of `x`: per sensor, the indicator is 1 with
    /// probability θ_l and ς otherwise, and the noise variance is R_ll/ℐ_l.
    /// The realized indicators are returned for diagnostics only and are
    /// never fed back to the filter.
    pub fn observe(&self, x: &DVector<f64>, rng: &mut impl Rng) -> (DVector<f64>, DVector<f64>) {
        let h = self.channel_eval(x);
        let mut y = DVector::zeros(self.dim_obs);
        let mut indicators = DVector::zeros(self.dim_obs);
        for l in 0..self.dim_obs {
            let nominal = rng.random::<f64>() < self.outlier_free_prob[l];
            let ind = if nominal { 1.0 } else { self.outlier_scale };
            let z: f64 = rng.sample(StandardNormal);
            y[l] = h[l] + (self.noise_diag[l] / ind).sqrt() * z;
            indicators[l] = ind;
        }
        (y, indicators)
    }

    /// log ∏_l N(y_l; H_l(x), R_ll/ℐ_l) for a given indicator configuration.
    pub fn log_measurement_likelihood(
        &self,
        y: &DVector<f64>,
        x: &DVector<f64>,
        indicators: &DVector<f64>,
    ) -> Result<f64> {
        if y.len() != self.dim_obs || indicators.len() != self.dim_obs {
            return Err(Error::DimensionMismatch { expected: self.dim_obs, got: y.len() });
        }
        if indicators.iter().any(|&i| !(i > 0.0)) {
            return Err(Error::InvalidParameter(
                "indicators must be positive (got a non-positive variance)".into(),
            ));
        }
        let h = self.channel_eval(x);
        Ok((0..self.dim_obs)
            .map(|l| gaussian_log_pdf_1d(y[l], h[l], self.noise_diag[l] / indicators[l]))
            .sum())
    }

    pub fn measurement_likelihood(
        &self,
        y: &DVector<f64>,
        x: &DVector<f64>,
        indicators: &DVector<f64>,
    ) -> Result<f64> {
        Ok(self.log_measurement_likelihood(y, x, indicators)?.exp())
    }
}

/// Two-point prior density of the indicator vector: weight θ_l on 1 and
/// 1−θ_l on ς, independently per sensor.
#[derive(Debug, Clone)]
pub struct IndicatorDensity {
    no_outlier_prob: DVector<f64>,
    outlier_value: f64,
}

impl IndicatorDensity {
    pub fn no_outlier_prob(&self) -> &DVector<f64> {
        &self.no_outlier_prob
    }

    pub fn outlier_value(&self) -> f64 {
        self.outlier_value
    }

    /// Prior mean E[ℐ_l] = θ_l + ς(1−θ_l).
    pub fn prior_mean(&self) -> DVector<f64> {
        self.no_outlier_prob
            .map(|t| t + self.outlier_value * (1.0 - t))
    }

    /// The two support points (value, log weight) for one sensor; zero-weight
    /// branches are omitted so degenerate θ ∈ {0, 1} stays exact.
    pub fn support(&self, sensor: usize) -> Vec<(f64, f64)> {
        let theta = self.no_outlier_prob[sensor];
        let mut out = Vec::with_capacity(2);
        if theta > 0.0 {
            out.push((1.0, theta.ln()));
        }
        if theta < 1.0 {
            out.push((self.outlier_value, (1.0 - theta).ln()));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::gaussian_log_pdf;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn case_study_model() -> ObservationModel {
        ObservationModel::position(
            3,
            DVector::from_vec(vec![0.1, 0.06]),
            DVector::from_vec(vec![0.98, 0.98]),
            0.08,
        )
        .unwrap()
    }

    #[test]
    fn outliers_inflate_variance() {
        let model = case_study_model();
        // Effective variance on sensor 1 under an outlier: 0.1/0.08 = 1.25.
        let inflated = model.noise_diag()[0] / model.outlier_scale();
        assert_relative_eq!(inflated, 1.25, epsilon = 1e-12);
        assert!(inflated > model.noise_diag()[0]);
    }

    #[test]
    fn theta_one_never_draws_outliers() {
        let model = ObservationModel::position(
            3,
            DVector::from_vec(vec![0.1, 0.06]),
            DVector::from_vec(vec![1.0, 1.0]),
            0.08,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = DVector::from_vec(vec![0.5, -0.5, 0.0]);
        for _ in 0..200 {
            let (_, ind) = model.observe(&x, &mut rng);
            assert!(ind.iter().all(|&i| i == 1.0));
        }
    }

    #[test]
    fn empirical_outlier_frequency_matches_theta() {
        let model = case_study_model();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let x = DVector::from_vec(vec![0.0, 0.0, 0.0]);
        let n = 100_000;
        let mut outliers = 0usize;
        for _ in 0..n {
            let (_, ind) = model.observe(&x, &mut rng);
            if ind[0] < 1.0 {
                outliers += 1;
            }
        }
        let freq = outliers as f64 / n as f64;
        // Binomial 3σ band around 0.02.
        let sigma = (0.02f64 * 0.98 / n as f64).sqrt();
        assert!((freq - 0.02).abs() < 3.0 * sigma, "freq {freq}");
    }

    #[test]
    fn likelihood_peak_values() {
        let model = ObservationModel::identity(
            2,
            DVector::from_vec(vec![1.0, 1.0]),
            DVector::from_vec(vec![0.9, 0.9]),
            0.25,
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.3, -0.7]);
        let y = model.channel_eval(&x);
        let nominal = DVector::from_vec(vec![1.0, 1.0]);
        assert_relative_eq!(
            model.measurement_likelihood(&y, &x, &nominal).unwrap(),
            1.0 / (2.0 * std::f64::consts::PI),
            epsilon = 1e-12
        );
        // One inflated sensor scales the peak by √ς.
        let mixed = DVector::from_vec(vec![0.25, 1.0]);
        assert_relative_eq!(
            model.measurement_likelihood(&y, &x, &mixed).unwrap(),
            1.0 / (4.0 * std::f64::consts::PI),
            epsilon = 1e-12
        );
    }

    #[test]
    fn likelihood_matches_dense_gaussian_oracle() {
        let model = case_study_model();
        let x = DVector::from_vec(vec![0.4, 0.9, -0.3]);
        let y = DVector::from_vec(vec![0.1, 1.4]);
        let indicators = DVector::from_vec(vec![0.08, 1.0]);
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![0.1 / 0.08, 0.06]));
        let mean = model.channel_eval(&x);
        assert_relative_eq!(
            model.log_measurement_likelihood(&y, &x, &indicators).unwrap(),
            gaussian_log_pdf(&y, &mean, &cov).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn likelihood_integrates_to_one_in_one_dimension() {
        let model = ObservationModel::identity(
            1,
            DVector::from_vec(vec![0.5]),
            DVector::from_vec(vec![0.9]),
            0.2,
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.3]);
        let indicators = DVector::from_vec(vec![0.2]);
        // Simpson quadrature over ±10 standard deviations.
        let sigma = (0.5f64 / 0.2).sqrt();
        let (lo, hi) = (0.3 - 10.0 * sigma, 0.3 + 10.0 * sigma);
        let n = 4000;
        let h = (hi - lo) / n as f64;
        let f = |yv: f64| {
            model
                .measurement_likelihood(&DVector::from_vec(vec![yv]), &x, &indicators)
                .unwrap()
        };
        let mut integral = f(lo) + f(hi);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            integral += w * f(lo + i as f64 * h);
        }
        integral *= h / 3.0;
        assert_relative_eq!(integral, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn log_likelihood_concave_in_y() {
        let model = case_study_model();
        let x = DVector::from_vec(vec![0.0, 0.0, 0.0]);
        let indicators = DVector::from_vec(vec![1.0, 0.08]);
        let lls: Vec<f64> = (0..50)
            .map(|i| {
                let yv = -2.0 + 0.08 * i as f64;
                model
                    .log_measurement_likelihood(
                        &DVector::from_vec(vec![yv, 0.0]),
                        &x,
                        &indicators,
                    )
                    .unwrap()
            })
            .collect();
        for w in lls.windows(3) {
            assert!(w[2] - 2.0 * w[1] + w[0] <= 1e-9);
        }
    }

    #[test]
    fn near_unit_scale_makes_indicators_irrelevant() {
        let model = ObservationModel::identity(
            1,
            DVector::from_vec(vec![0.5]),
            DVector::from_vec(vec![0.9]),
            1.0 - 1e-13,
        )
        .unwrap();
        let x = DVector::from_vec(vec![0.1]);
        let y = DVector::from_vec(vec![0.7]);
        let nominal = model
            .log_measurement_likelihood(&y, &x, &DVector::from_vec(vec![1.0]))
            .unwrap();
        let outlier = model
            .log_measurement_likelihood(&y, &x, &DVector::from_vec(vec![1.0 - 1e-13]))
            .unwrap();
        assert!((nominal - outlier).abs() < 1e-12);
    }

    #[test]
    fn non_positive_indicator_is_an_error() {
        let model = case_study_model();
        let x = DVector::from_vec(vec![0.0, 0.0, 0.0]);
        let y = DVector::from_vec(vec![0.0, 0.0]);
        assert!(model
            .log_measurement_likelihood(&y, &x, &DVector::from_vec(vec![0.0, 1.0]))
            .is_err());
    }

    #[test]
    fn indicator_density_support_and_mean() {
        let model = case_study_model();
        let density = model.indicator_density();
        let mean = density.prior_mean();
        assert_relative_eq!(mean[0], 0.98 + 0.08 * 0.02, epsilon = 1e-15);
        let support = density.support(0);
        assert_eq!(support.len(), 2);
        let total: f64 = support.iter().map(|(_, lw)| lw.exp()).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);
        // Degenerate θ = 1 keeps only the nominal branch.
        let forced = model.force_nominal().indicator_density();
        assert_eq!(forced.support(0).len(), 1);
    }
}
