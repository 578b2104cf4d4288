//! Brute-force references used to validate the fast path: a high-resolution
//! RK4 integrator, a bootstrap particle filter with indicator-marginalized
//! weights, and the exact Bayesian change-point recursion for linear
//! Gaussian models without outliers. None of this runs in the detection
//! pipeline itself.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dynamics::{ChangePrior, DiscreteMap};
use crate::error::{Error, Result};
use crate::math::{gaussian_log_pdf, gaussian_log_pdf_1d, log_sum_exp, robust_cholesky, sigmoid, symmetrize};
use crate::robust_filter::GaussianBelief;
use crate::sensing::ObservationModel;

/// Classic fixed-step RK4 for an autonomous drift.
pub fn rk4_integrate<F>(f: &F, x0: &DVector<f64>, t_end: f64, steps: usize) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let h = t_end / steps as f64;
    let mut x = x0.clone();
    for _ in 0..steps {
        let k1 = f(&x);
        let k2 = f(&(&x + &k1 * (h / 2.0)));
        let k3 = f(&(&x + &k2 * (h / 2.0)));
        let k4 = f(&(&x + &k3 * h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    x
}

/// Weighted particle cloud; log weights are kept normalized.
pub struct ParticleEnsemble {
    pub particles: Vec<DVector<f64>>,
    pub log_weights: Vec<f64>,
}

impl ParticleEnsemble {
    /// All particles at a known initial state.
    pub fn from_point(x: &DVector<f64>, n: usize) -> Self {
        let lw = -(n as f64).ln();
        Self { particles: vec![x.clone(); n], log_weights: vec![lw; n] }
    }

    /// Particles drawn from a Gaussian belief.
    pub fn from_belief(belief: &GaussianBelief, n: usize, rng: &mut impl Rng) -> Result<Self> {
        let l = robust_cholesky(&belief.cov)?.l();
        let dim = belief.dim();
        let lw = -(n as f64).ln();
        let particles = (0..n)
            .map(|_| {
                let z = DVector::from_fn(dim, |_, _| rng.sample(StandardNormal));
                &belief.mean + &l * z
            })
            .collect();
        Ok(Self { particles, log_weights: vec![lw; n] })
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// Effective sample size 1/Σwᵢ² of the normalized weights.
    pub fn ess(&self) -> f64 {
        let sum_sq: f64 = self.log_weights.iter().map(|lw| (2.0 * lw).exp()).sum();
        1.0 / sum_sq
    }

    pub fn mean(&self) -> DVector<f64> {
        let dim = self.particles[0].len();
        let mut acc = DVector::zeros(dim);
        for (p, lw) in self.particles.iter().zip(&self.log_weights) {
            acc += p * lw.exp();
        }
        acc
    }

    fn systematic_resample(&mut self, rng: &mut impl Rng) {
        let n = self.len();
        let offset: f64 = rng.random::<f64>() / n as f64;
        let mut cumulative = 0.0;
        let mut idx = 0usize;
        let mut resampled = Vec::with_capacity(n);
        for i in 0..n {
            let u = offset + i as f64 / n as f64;
            while idx < n - 1 && cumulative + self.log_weights[idx].exp() < u {
                cumulative += self.log_weights[idx].exp();
                idx += 1;
            }
            resampled.push(self.particles[idx].clone());
        }
        self.particles = resampled;
        let lw = -(n as f64).ln();
        self.log_weights.iter_mut().for_each(|w| *w = lw);
    }
}

/// One bootstrap step: propagate through the mode's map plus process noise
/// (with the same jitter floor the filter assumes), weight by the indicator-
/// marginalized measurement likelihood, and return the log predictive
/// likelihood. Resamples systematically when ESS < N/2.
pub fn pf_step(
    ensemble: &mut ParticleEnsemble,
    map: &DiscreteMap,
    q_jitter: f64,
    y: &DVector<f64>,
    obs: &ObservationModel,
    rng: &mut impl Rng,
) -> Result<f64> {
    let n = ensemble.len();
    if n < 100 {
        return Err(Error::InvalidParameter(
            "particle oracle needs at least 100 particles".into(),
        ));
    }
    if y.len() != obs.dim_obs() {
        return Err(Error::DimensionMismatch { expected: obs.dim_obs(), got: y.len() });
    }
    let dim = map.dim();
    let mut q = map.noise_cov.clone();
    for i in 0..dim {
        q[(i, i)] += q_jitter;
    }
    let noise_factor = robust_cholesky(&q)?.l();
    let density = obs.indicator_density();
    let noise_diag = obs.noise_diag();

    for (particle, log_weight) in ensemble.particles.iter_mut().zip(&mut ensemble.log_weights) {
        let z = DVector::from_fn(dim, |_, _| rng.sample(StandardNormal));
        let mut moved = map.apply(particle) + &noise_factor * z;
        map.wrap(&mut moved);
        let h = obs.channel_eval(&moved);
        let mut increment = 0.0;
        for l in 0..obs.dim_obs() {
            let branches: Vec<f64> = density
                .support(l)
                .iter()
                .map(|(value, lw)| lw + gaussian_log_pdf_1d(y[l], h[l], noise_diag[l] / value))
                .collect();
            increment += log_sum_exp(&branches);
        }
        *particle = moved;
        *log_weight += increment;
    }

    let log_predictive = log_sum_exp(&ensemble.log_weights);
    if !log_predictive.is_finite() {
        return Err(Error::ParticleDegeneracy);
    }
    ensemble.log_weights.iter_mut().for_each(|lw| *lw -= log_predictive);
    if ensemble.ess() < n as f64 / 2.0 {
        ensemble.systematic_resample(rng);
    }
    Ok(log_predictive)
}

/// Affine transition x′ = A x + b + w, w ~ N(0, Q), extracted from a
/// [`DiscreteMap`] with a linearity probe.
#[derive(Debug, Clone)]
pub struct LinearStateModel {
    pub transition: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub noise_cov: DMatrix<f64>,
}

impl LinearStateModel {
    pub fn new(transition: DMatrix<f64>, offset: DVector<f64>, noise_cov: DMatrix<f64>) -> Self {
        Self { transition, offset, noise_cov }
    }

    /// Extract (A, b) from the map by probing basis vectors, then verify the
    /// map really is affine on a handful of off-basis points. The noise
    /// covariance picks up the same jitter floor the filter uses.
    pub fn probe_from_map(map: &DiscreteMap, q_jitter: f64) -> Result<Self> {
        let d = map.dim();
        let offset = map.apply(&DVector::zeros(d));
        let mut transition = DMatrix::zeros(d, d);
        for j in 0..d {
            let mut e = DVector::zeros(d);
            e[j] = 1.0;
            transition.set_column(j, &(map.apply(&e) - &offset));
        }
        for trial in 0..4usize {
            let x = DVector::from_fn(d, |i, _| {
                (((i * 7 + trial * 13) as f64) * 0.618_033_9).sin() * 1.7
            });
            let expected = &transition * &x + &offset;
            let got = map.apply(&x);
            if (got - &expected).abs().max() > 1e-8 * (1.0 + expected.abs().max()) {
                return Err(Error::NonLinearModel);
            }
        }
        let mut noise_cov = map.noise_cov.clone();
        for i in 0..d {
            noise_cov[(i, i)] += q_jitter;
        }
        Ok(Self { transition, offset, noise_cov })
    }
}

struct KalmanChain {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    cum_log_ratio: f64,
}

fn kalman_predict(model: &LinearStateModel, mean: &DVector<f64>, cov: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let m = &model.transition * mean + &model.offset;
    let mut p = &model.transition * cov * model.transition.transpose() + &model.noise_cov;
    symmetrize(&mut p);
    (m, p)
}

/// Innovation log-likelihood and the updated (mean, cov).
fn kalman_update(
    mean_pred: &DVector<f64>,
    cov_pred: &DMatrix<f64>,
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    let innovation_mean = h * mean_pred;
    let s = h * cov_pred * h.transpose() + r;
    let log_lik = gaussian_log_pdf(y, &innovation_mean, &s)?;
    let s_inv = s.clone().try_inverse().ok_or(Error::CovarianceFactorization)?;
    let gain = cov_pred * h.transpose() * s_inv;
    let mean = mean_pred + &gain * (y - innovation_mean);
    let eye = DMatrix::identity(mean_pred.len(), mean_pred.len());
    let mut cov = (eye - &gain * h) * cov_pred;
    symmetrize(&mut cov);
    Ok((log_lik, mean, cov))
}

/// Exact posterior change probabilities p₁..p_N for a linear-Gaussian
/// dual-mode model observed through y = Hx + v with diagonal noise and no
/// outliers. A bank of plain Kalman filters with exact innovation
/// likelihoods; no variational step, no quadrature.
pub fn exact_linear_change_posterior(
    observations: &[DVector<f64>],
    alpha: &LinearStateModel,
    beta: &LinearStateModel,
    h: &DMatrix<f64>,
    noise_diag: &DVector<f64>,
    initial: &GaussianBelief,
    prior: &ChangePrior,
) -> Result<Vec<f64>> {
    let r = DMatrix::from_diagonal(noise_diag);
    let mut infinity = KalmanChain {
        mean: initial.mean.clone(),
        cov: initial.cov.clone(),
        cum_log_ratio: 0.0,
    };
    let mut chains: Vec<KalmanChain> = Vec::new();
    let mut posteriors = Vec::with_capacity(observations.len());

    for (idx, y) in observations.iter().enumerate() {
        let n = idx + 1;
        let previous = (infinity.mean.clone(), infinity.cov.clone());

        let (m_pred, p_pred) = kalman_predict(alpha, &infinity.mean, &infinity.cov);
        let (log_lik_inf, m_new, p_new) = kalman_update(&m_pred, &p_pred, y, h, &r)?;
        infinity.mean = m_new;
        infinity.cov = p_new;

        chains.push(KalmanChain { mean: previous.0, cov: previous.1, cum_log_ratio: 0.0 });
        let mut terms = Vec::with_capacity(chains.len());
        for (k, chain) in chains.iter_mut().enumerate() {
            let (m_pred, p_pred) = kalman_predict(beta, &chain.mean, &chain.cov);
            let (log_lik, m_new, p_new) = kalman_update(&m_pred, &p_pred, y, h, &r)?;
            chain.mean = m_new;
            chain.cov = p_new;
            chain.cum_log_ratio += log_lik - log_lik_inf;
            terms.push(prior.log_mass(k + 1) + chain.cum_log_ratio);
        }
        let log_l = log_sum_exp(&terms) - prior.log_tail(n);
        posteriors.push(sigmoid(log_l));
    }
    Ok(posteriors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{DualModeModel, Mode, StateFn};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn rk4_integrates_the_exponential() {
        let f = |x: &DVector<f64>| x.clone();
        let x0 = DVector::from_vec(vec![1.0]);
        let out = rk4_integrate(&f, &x0, 1.0, 128);
        assert_relative_eq!(out[0], std::f64::consts::E, epsilon = 1e-8);
    }

    fn scalar_map(a: f64, q: f64) -> (DiscreteMap, LinearStateModel) {
        let dt = 1.0;
        let drift: StateFn = Arc::new(move |x: &DVector<f64>| x * ((a - 1.0) / dt));
        let model = DualModeModel::new(
            1,
            Arc::clone(&drift),
            drift,
            DMatrix::from_vec(1, 1, vec![q.sqrt()]),
            DMatrix::from_vec(1, 1, vec![q.sqrt()]),
            0.999,
            dt,
            vec![],
        )
        .unwrap();
        // ε²·dt·BBᵀ ≈ q (ε pinned just below 1; fold the mismatch into B).
        let map = model.discretize(Mode::Alpha);
        let linear = LinearStateModel::probe_from_map(&map, 0.0).unwrap();
        (map, linear)
    }

    /// Kalman filter marginal likelihood, written directly.
    fn kalman_log_marginal(
        ys: &[f64],
        a: f64,
        q: f64,
        r: f64,
        m0: f64,
        p0: f64,
    ) -> f64 {
        let (mut m, mut p) = (m0, p0);
        let mut total = 0.0;
        for &y in ys {
            let m_pred = a * m;
            let p_pred = a * p * a + q;
            let s = p_pred + r;
            total += gaussian_log_pdf_1d(y, m_pred, s);
            let k = p_pred / s;
            m = m_pred + k * (y - m_pred);
            p = (1.0 - k) * p_pred;
        }
        total
    }

    #[test]
    fn particle_filter_matches_kalman_marginal_likelihood() {
        let (map, linear) = scalar_map(0.9, 0.05);
        let q_true = linear.noise_cov[(0, 0)];
        let obs = ObservationModel::identity(
            1,
            DVector::from_vec(vec![0.1]),
            DVector::from_vec(vec![1.0]),
            0.08,
        )
        .unwrap();
        // Simulate a short run.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut x = 0.4;
        let mut ys = Vec::new();
        for _ in 0..30 {
            x = 0.9 * x + q_true.sqrt() * rng.sample::<f64, _>(StandardNormal);
            ys.push(x + 0.1f64.sqrt() * rng.sample::<f64, _>(StandardNormal));
        }
        let reference = kalman_log_marginal(&ys, 0.9, q_true, 0.1, 0.4, 0.0);

        let mut estimates = Vec::new();
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let mut ens = ParticleEnsemble::from_point(&DVector::from_vec(vec![0.4]), 20_000);
            let mut total = 0.0;
            for y in &ys {
                total += pf_step(
                    &mut ens,
                    &map,
                    0.0,
                    &DVector::from_vec(vec![*y]),
                    &obs,
                    &mut rng,
                )
                .unwrap();
            }
            estimates.push(total);
        }
        let mean = estimates.iter().sum::<f64>() / estimates.len() as f64;
        let sd = (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>()
            / (estimates.len() - 1) as f64)
            .sqrt();
        let se = sd / (estimates.len() as f64).sqrt();
        assert!(
            (mean - reference).abs() < 3.0 * se + 0.05,
            "PF {mean} vs Kalman {reference} (se {se})"
        );
    }

    #[test]
    fn particle_filter_is_unbiased_across_seeds() {
        let (map, linear) = scalar_map(0.8, 0.04);
        let q_true = linear.noise_cov[(0, 0)];
        let obs = ObservationModel::identity(
            1,
            DVector::from_vec(vec![0.2]),
            DVector::from_vec(vec![1.0]),
            0.08,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = 0.0;
        let mut ys = Vec::new();
        for _ in 0..15 {
            x = 0.8 * x + q_true.sqrt() * rng.sample::<f64, _>(StandardNormal);
            ys.push(x + 0.2f64.sqrt() * rng.sample::<f64, _>(StandardNormal));
        }
        let reference = kalman_log_marginal(&ys, 0.8, q_true, 0.2, 0.0, 0.0);
        let mut estimates = Vec::new();
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let mut ens = ParticleEnsemble::from_point(&DVector::zeros(1), 4000);
            let total: f64 = ys
                .iter()
                .map(|y| {
                    pf_step(&mut ens, &map, 0.0, &DVector::from_vec(vec![*y]), &obs, &mut rng)
                        .unwrap()
                })
                .sum();
            estimates.push(total);
        }
        let mean = estimates.iter().sum::<f64>() / estimates.len() as f64;
        let sd = (estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / 49.0).sqrt();
        let se = sd / 50f64.sqrt();
        assert!(
            (mean - reference).abs() < 3.0 * se + 0.05,
            "PF mean {mean} vs Kalman {reference} (se {se})"
        );
    }

    #[test]
    fn degenerate_weights_are_an_error() {
        let drift: StateFn = Arc::new(|x: &DVector<f64>| DVector::zeros(x.len()));
        let model = DualModeModel::new(
            1,
            Arc::clone(&drift),
            drift,
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            0.0,
            1.0,
            vec![],
        )
        .unwrap();
        let map = model.discretize(Mode::Alpha);
        let obs = ObservationModel::identity(
            1,
            DVector::from_vec(vec![1e-306]),
            DVector::from_vec(vec![1.0]),
            0.5,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ens = ParticleEnsemble::from_point(&DVector::zeros(1), 200);
        // Zero-noise limit: the squared residual over the vanishing variance
        // overflows and every log weight collapses to −∞.
        let far = DVector::from_vec(vec![1e3]);
        assert!(matches!(
            pf_step(&mut ens, &map, 0.0, &far, &obs, &mut rng),
            Err(Error::ParticleDegeneracy)
        ));
    }

    #[test]
    fn too_few_particles_is_rejected() {
        let (map, _) = scalar_map(0.9, 0.01);
        let obs = ObservationModel::identity(
            1,
            DVector::from_vec(vec![0.1]),
            DVector::from_vec(vec![1.0]),
            0.5,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ens = ParticleEnsemble::from_point(&DVector::zeros(1), 10);
        assert!(pf_step(&mut ens, &map, 0.0, &DVector::zeros(1), &obs, &mut rng).is_err());
    }

    #[test]
    fn probe_rejects_nonlinear_maps() {
        let drift: StateFn = Arc::new(|x: &DVector<f64>| DVector::from_vec(vec![x[0].sin()]));
        let model = DualModeModel::new(
            1,
            Arc::clone(&drift),
            drift,
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
            0.0,
            1.0,
            vec![],
        )
        .unwrap();
        assert!(matches!(
            LinearStateModel::probe_from_map(&model.discretize(Mode::Alpha), 0.0),
            Err(Error::NonLinearModel)
        ));
    }

    #[test]
    fn identical_modes_reduce_to_the_prior() {
        let a = LinearStateModel::new(
            DMatrix::from_vec(1, 1, vec![0.9]),
            DVector::zeros(1),
            DMatrix::from_vec(1, 1, vec![0.05]),
        );
        let prior = ChangePrior::new(0.1).unwrap();
        let h = DMatrix::identity(1, 1);
        let ys: Vec<DVector<f64>> =
            (0..40).map(|i| DVector::from_vec(vec![(i as f64 * 0.37).sin()])).collect();
        let init = GaussianBelief::around(DVector::zeros(1), 0.2);
        let ps = exact_linear_change_posterior(
            &ys,
            &a,
            &a.clone(),
            &h,
            &DVector::from_vec(vec![0.1]),
            &init,
            &prior,
        )
        .unwrap();
        for (idx, p) in ps.iter().enumerate() {
            let n = idx as i32 + 1;
            assert_relative_eq!(*p, 1.0 - 0.9f64.powi(n), epsilon = 1e-12);
        }
    }

    #[test]
    fn single_observation_matches_hand_bayes() {
        let alpha = LinearStateModel::new(
            DMatrix::from_vec(1, 1, vec![1.0]),
            DVector::from_vec(vec![0.0]),
            DMatrix::from_vec(1, 1, vec![0.02]),
        );
        let beta = LinearStateModel::new(
            DMatrix::from_vec(1, 1, vec![1.0]),
            DVector::from_vec(vec![0.7]),
            DMatrix::from_vec(1, 1, vec![0.02]),
        );
        let prior = ChangePrior::new(0.2).unwrap();
        let h = DMatrix::identity(1, 1);
        let init = GaussianBelief::around(DVector::from_vec(vec![0.1]), 0.05);
        let y = 0.55;
        let ps = exact_linear_change_posterior(
            &[DVector::from_vec(vec![y])],
            &alpha,
            &beta,
            &h,
            &DVector::from_vec(vec![0.1]),
            &init,
            &prior,
        )
        .unwrap();
        // Two-hypothesis Bayes: predictive variances coincide, means differ.
        let s = 0.05 + 0.02 + 0.1;
        let lik_beta = gaussian_log_pdf_1d(y, 0.1 + 0.7, s).exp();
        let lik_alpha = gaussian_log_pdf_1d(y, 0.1, s).exp();
        let expected = 0.2 * lik_beta / (0.2 * lik_beta + 0.8 * lik_alpha);
        assert_relative_eq!(ps[0], expected, epsilon = 1e-12);
    }

    #[test]
    fn exact_recursion_is_deterministic() {
        let alpha = LinearStateModel::new(
            DMatrix::from_vec(1, 1, vec![0.95]),
            DVector::zeros(1),
            DMatrix::from_vec(1, 1, vec![0.03]),
        );
        let beta = LinearStateModel::new(
            DMatrix::from_vec(1, 1, vec![0.95]),
            DVector::from_vec(vec![0.4]),
            DMatrix::from_vec(1, 1, vec![0.03]),
        );
        let prior = ChangePrior::new(0.05).unwrap();
        let h = DMatrix::identity(1, 1);
        let init = GaussianBelief::around(DVector::zeros(1), 0.1);
        let ys: Vec<DVector<f64>> =
            (0..25).map(|i| DVector::from_vec(vec![(i as f64 * 0.91).cos()])).collect();
        let r = DVector::from_vec(vec![0.08]);
        let a = exact_linear_change_posterior(&ys, &alpha, &beta, &h, &r, &init, &prior).unwrap();
        let b = exact_linear_change_posterior(&ys, &alpha, &beta, &h, &r, &init, &prior).unwrap();
        assert_eq!(a, b);
    }
}
