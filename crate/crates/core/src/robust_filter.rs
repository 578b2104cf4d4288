//! Outlier-robust variational-Bayes Gaussian filtering.
//!
//! One step of the filter consists of a sigma-point prediction through the
//! active mode's transition map followed by a coordinate-ascent loop that
//! alternates between
//!
//! * a Gaussian measurement update given the expected indicators, with
//!   innovation covariance S = U + R·diag(1/E[ℐ]), gain K = C S⁻¹,
//!   m⁺ = m⁻ + K(y − μ) and P⁺ = P⁻ − K S Kᵀ, and
//! * the closed-form indicator posterior built from the expected squared
//!   residual W_ll under the updated state belief,
//!
//! until the posterior mean stops moving. The per-step predictive likelihood
//! marginalizes the indicators exactly over their two-point support.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::DiscreteMap;
use crate::error::{Error, Result};
use crate::math::{gaussian_log_pdf, log_sum_exp, robust_cholesky, symmetrize};
use crate::sensing::ObservationModel;

/// Gaussian state belief (m, P).
#[derive(Debug, Clone)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    /// Validating constructor: the covariance must be square, symmetric to
    /// 1e-10 and have eigenvalues above −1e-10.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::DimensionMismatch { expected: mean.len(), got: cov.nrows() });
        }
        if (&cov - cov.transpose()).abs().max() > 1e-10 {
            return Err(Error::InvalidParameter("covariance is not symmetric".into()));
        }
        let mut sym = cov.clone();
        symmetrize(&mut sym);
        let min_eig = sym
            .symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -1e-10 {
            return Err(Error::InvalidParameter(format!(
                "covariance has eigenvalue {min_eig} below -1e-10"
            )));
        }
        Ok(Self { mean, cov: sym })
    }

    /// Tight belief around a known state: variance·I.
    pub fn around(mean: DVector<f64>, variance: f64) -> Self {
        let n = mean.len();
        Self { mean, cov: DMatrix::identity(n, n) * variance }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Deterministic quadrature rule used for the Gaussian integrals.
#[derive(Debug, Clone, Copy, Default)]
pub enum SigmaPointRule {
    /// Third-degree spherical cubature: 2n points m ± √n·Lᵢ with equal
    /// weights 1/(2n), where L Lᵀ = P. Exact for linear maps, exact in the
    /// mean for quadratics.
    #[default]
    SphericalCubature,
}

/// A generated point set with its common weight.
pub struct SigmaPoints {
    pub points: Vec<DVector<f64>>,
    pub weight: f64,
}

impl SigmaPointRule {
    pub fn points(&self, belief: &GaussianBelief) -> Result<SigmaPoints> {
        match self {
            SigmaPointRule::SphericalCubature => {
                let n = belief.dim();
                let chol = robust_cholesky(&belief.cov)?;
                let l = chol.l();
                let scale = (n as f64).sqrt();
                let mut points = Vec::with_capacity(2 * n);
                for i in 0..n {
                    let col = l.column(i) * scale;
                    points.push(&belief.mean + &col);
                    points.push(&belief.mean - &col);
                }
                Ok(SigmaPoints { points, weight: 1.0 / (2 * n) as f64 })
            }
        }
    }
}

/// Loop controls for the variational update and the filter's process-noise
/// floor (the jitter keeps a deterministic model numerically alive and lets
/// the filter absorb model mismatch at the change step).
#[derive(Debug, Clone, Copy)]
pub struct FilterParams {
    pub q_jitter: f64,
    pub vb_tol: f64,
    pub vb_max_iters: usize,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self { q_jitter: 1e-6, vb_tol: 1e-6, vb_max_iters: 10 }
    }
}

/// Posterior probability of *no* outlier per sensor, Φ_l.
#[derive(Debug, Clone)]
pub struct IndicatorPosterior {
    phi: DVector<f64>,
}

impl IndicatorPosterior {
    pub fn from_prior(obs: &ObservationModel) -> Self {
        Self { phi: obs.outlier_free_prob().clone() }
    }

    pub fn phi(&self) -> &DVector<f64> {
        &self.phi
    }

    /// E[ℐ_l] = ς(1−Φ_l) + Φ_l ∈ [ς, 1].
    pub fn expected_indicator(&self, outlier_scale: f64) -> DVector<f64> {
        self.phi.map(|p| outlier_scale * (1.0 - p) + p)
    }
}

/// Φ as a function of the expected squared residual:
/// Φ = 1 / (1 + √ς(1/θ − 1)·exp(W(1−ς)/(2R))).
pub fn no_outlier_posterior(
    expected_sq_residual: f64,
    noise_var: f64,
    no_outlier_prior: f64,
    outlier_scale: f64,
) -> f64 {
    if no_outlier_prior >= 1.0 {
        return 1.0;
    }
    if no_outlier_prior <= 0.0 {
        return 0.0;
    }
    let odds = outlier_scale.sqrt()
        * (1.0 / no_outlier_prior - 1.0)
        * (expected_sq_residual * (1.0 - outlier_scale) / (2.0 * noise_var)).exp();
    1.0 / (1.0 + odds)
}

/// Sigma-point prediction through one mode: m⁻ = Σ wᵢ f(χᵢ),
/// P⁻ = Σ wᵢ (f(χᵢ)−m⁻)(f(χᵢ)−m⁻)ᵀ + Q + q_jitter·I.
pub fn predict(
    belief: &GaussianBelief,
    map: &DiscreteMap,
    params: &FilterParams,
    rule: &SigmaPointRule,
) -> Result<GaussianBelief> {
    let pts = rule.points(belief)?;
    let n = belief.dim();
    let mapped: Vec<DVector<f64>> = pts.points.iter().map(|p| map.apply(p)).collect();

    let mut mean = DVector::zeros(n);
    for m in &mapped {
        mean += m;
    }
    mean *= pts.weight;
    map.wrap(&mut mean);

    let mut cov = DMatrix::zeros(n, n);
    for m in &mapped {
        let d = m - &mean;
        cov += &d * d.transpose();
    }
    cov *= pts.weight;
    cov += &map.noise_cov;
    for i in 0..n {
        cov[(i, i)] += params.q_jitter;
    }
    symmetrize(&mut cov);
    Ok(GaussianBelief { mean, cov })
}

/// Result of one variational measurement update.
pub struct VbUpdate {
    pub belief: GaussianBelief,
    pub indicators: IndicatorPosterior,
    pub iterations: usize,
    /// False when the mean had not settled within `vb_max_iters`; the last
    /// iterate is still returned.
    pub converged: bool,
}

/// Observation-space moments of a belief under the quadrature rule.
fn observation_moments(
    belief: &GaussianBelief,
    obs: &ObservationModel,
    rule: &SigmaPointRule,
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let pts = rule.points(belief)?;
    let m = obs.dim_obs();
    let n = belief.dim();
    let h_vals: Vec<DVector<f64>> = pts.points.iter().map(|p| obs.channel_eval(p)).collect();

    let mut mu = DVector::zeros(m);
    for h in &h_vals {
        mu += h;
    }
    mu *= pts.weight;

    let mut u = DMatrix::zeros(m, m);
    let mut c = DMatrix::zeros(n, m);
    for (chi, h) in pts.points.iter().zip(&h_vals) {
        let dh = h - &mu;
        u += &dh * dh.transpose();
        c += (chi - &belief.mean) * dh.transpose();
    }
    u *= pts.weight;
    c *= pts.weight;
    symmetrize(&mut u);
    Ok((mu, u, c))
}

/// Variational-Bayes measurement update of a predicted belief.
pub fn vb_update(
    predicted: &GaussianBelief,
    y: &DVector<f64>,
    obs: &ObservationModel,
    params: &FilterParams,
    rule: &SigmaPointRule,
) -> Result<VbUpdate> {
    if y.len() != obs.dim_obs() {
        return Err(Error::DimensionMismatch { expected: obs.dim_obs(), got: y.len() });
    }
    if params.vb_max_iters < 1 {
        return Err(Error::InvalidParameter("vb_max_iters must be at least 1".into()));
    }
    let m = obs.dim_obs();
    let noise = obs.noise_diag();
    let theta = obs.outlier_free_prob();
    let scale = obs.outlier_scale();

    // Moments of H(X) under the predicted belief stay fixed across the loop.
    let (mu, u, c) = observation_moments(predicted, obs, rule)?;

    let mut expected_ind = obs.indicator_density().prior_mean();
    let mut phi = obs.outlier_free_prob().clone();
    let mut belief = predicted.clone();
    let mut prev_mean: Option<DVector<f64>> = None;
    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..params.vb_max_iters {
        iterations += 1;

        // Gaussian stage given E[ℐ].
        let mut s = u.clone();
        for l in 0..m {
            s[(l, l)] += noise[l] / expected_ind[l];
        }
        let chol = robust_cholesky(&s)?;
        let gain = chol.solve(&c.transpose()).transpose();
        let mean = &predicted.mean + &gain * (y - &mu);
        let mut cov = &predicted.cov - &gain * &s * gain.transpose();
        symmetrize(&mut cov);
        belief = GaussianBelief { mean, cov };

        // Indicator stage from the updated belief: W_ll = (y_l − μ⁺_l)² + U⁺_ll.
        let (mu_post, u_post, _) = observation_moments(&belief, obs, rule)?;
        for l in 0..m {
            let w_ll = (y[l] - mu_post[l]).powi(2) + u_post[(l, l)];
            phi[l] = no_outlier_posterior(w_ll, noise[l], theta[l], scale);
            expected_ind[l] = scale * (1.0 - phi[l]) + phi[l];
        }

        if let Some(prev) = &prev_mean {
            if (&belief.mean - prev).abs().max() < params.vb_tol {
                converged = true;
                break;
            }
        }
        prev_mean = Some(belief.mean.clone());
    }

    Ok(VbUpdate {
        belief,
        indicators: IndicatorPosterior { phi },
        iterations,
        converged,
    })
}

/// Marginal predictive log-likelihood log ρ(y | predicted belief):
/// H(X) is moment-matched to N(μ, U), the indicators are summed exactly
/// over their two-point support (all 2^m configurations when m ≤ 10; the
/// per-sensor diagonal approximation beyond that).
pub fn predictive_log_likelihood(
    predicted: &GaussianBelief,
    y: &DVector<f64>,
    obs: &ObservationModel,
    rule: &SigmaPointRule,
) -> Result<f64> {
    if y.len() != obs.dim_obs() {
        return Err(Error::DimensionMismatch { expected: obs.dim_obs(), got: y.len() });
    }
    let m = obs.dim_obs();
    let noise = obs.noise_diag();
    let density = obs.indicator_density();
    let (mu, u, _) = observation_moments(predicted, obs, rule)?;

    if m <= 10 {
        // Exact enumeration of the indicator configurations that carry mass.
        let per_sensor: Vec<Vec<(f64, f64)>> = (0..m).map(|l| density.support(l)).collect();
        let mut terms = Vec::new();
        let mut stack: Vec<(usize, f64, Vec<f64>)> = vec![(0, 0.0, Vec::with_capacity(m))];
        while let Some((l, logw, inds)) = stack.pop() {
            if l == m {
                let mut cov = u.clone();
                for (i, ind) in inds.iter().enumerate() {
                    cov[(i, i)] += noise[i] / ind;
                }
                terms.push(logw + gaussian_log_pdf(y, &mu, &cov)?);
                continue;
            }
            for (value, lw) in &per_sensor[l] {
                let mut next = inds.clone();
                next.push(*value);
                stack.push((l + 1, logw + lw, next));
            }
        }
        Ok(log_sum_exp(&terms))
    } else {
        // Diagonal approximation: sensors treated marginally.
        let mut total = 0.0;
        for l in 0..m {
            let branch: Vec<f64> = density
                .support(l)
                .iter()
                .map(|(value, lw)| {
                    lw + crate::math::gaussian_log_pdf_1d(
                        y[l],
                        mu[l],
                        u[(l, l)] + noise[l] / value,
                    )
                })
                .collect();
            total += log_sum_exp(&branch);
        }
        Ok(total)
    }
}
