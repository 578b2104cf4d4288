//! Dual-mode agent dynamics: continuous drifts under feedback guidance
//! toward either target, Euler discretization, and truth simulation with a
//! switch at the change step.

pub(crate) mod lqr;
mod unicycle;

pub use lqr::{solve_care, CareSolution};
pub use unicycle::{unicycle_dual_mode, unicycle_guidance, GuidanceLaw, UnicycleConfig};

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::math::wrap_angle;

/// Closed-loop drift: state ↦ state derivative.
pub type StateFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// Which of the two dynamic regimes the agent is following.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Alpha,
    Beta,
}

/// A closed target ball around an equilibrium, tested on the leading
/// position coordinates of the state.
#[derive(Debug, Clone)]
pub struct Target {
    pub center: DVector<f64>,
    pub radius: f64,
}

impl Target {
    pub fn new(center: DVector<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "target radius must be positive, got {radius}"
            )));
        }
        Ok(Self { center, radius })
    }

    /// Closed-ball membership on the first `center.len()` state coordinates.
    pub fn contains(&self, x: &DVector<f64>) -> Result<bool> {
        if x.len() < self.center.len() {
            return Err(Error::DimensionMismatch {
                expected: self.center.len(),
                got: x.len(),
            });
        }
        let d2: f64 = (0..self.center.len())
            .map(|i| (x[i] - self.center[i]).powi(2))
            .sum();
        Ok(d2.sqrt() <= self.radius)
    }

    /// Distance from the position coordinates of `x` to the center.
    pub fn distance(&self, x: &DVector<f64>) -> f64 {
        (0..self.center.len())
            .map(|i| (x[i] - self.center[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Ball membership as a free function; see [`Target::contains`].
pub fn in_target(x: &DVector<f64>, target: &Target) -> Result<bool> {
    target.contains(x)
}

/// Geometric prior over the change step: P(ν = k) = d(1−d)^{k−1}, k ≥ 1.
#[derive(Debug, Clone, Copy)]
pub struct ChangePrior {
    d: f64,
}

impl ChangePrior {
    pub fn new(d: f64) -> Result<Self> {
        if !(d > 0.0 && d < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "geometric parameter d must lie in (0,1), got {d}"
            )));
        }
        Ok(Self { d })
    }

    pub fn d(&self) -> f64 {
        self.d
    }

    /// log P(ν = k) for k ≥ 1.
    pub fn log_mass(&self, k: usize) -> f64 {
        debug_assert!(k >= 1);
        self.d.ln() + (k as f64 - 1.0) * (1.0 - self.d).ln()
    }

    pub fn mass(&self, k: usize) -> f64 {
        self.log_mass(k).exp()
    }

    /// log P(ν > n) = n·log(1−d).
    pub fn log_tail(&self, n: usize) -> f64 {
        n as f64 * (1.0 - self.d).ln()
    }

    pub fn tail(&self, n: usize) -> f64 {
        self.log_tail(n).exp()
    }

    /// Inverse-CDF draw of ν ≥ 1.
    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let k = ((1.0 - u).ln() / (1.0 - self.d).ln()).ceil();
        (k as usize).max(1)
    }
}

/// How the change step is chosen for a simulated realization.
#[derive(Debug, Clone)]
pub enum ChangeSpec {
    /// Switch at a fixed step k ≥ 1 (k beyond the horizon means the window
    /// sees no change).
    Fixed(usize),
    /// Draw ν from the geometric prior.
    Drawn(ChangePrior),
    /// No switch ever.
    None,
}

/// The dual-mode agent as known to the observer: closed-loop drifts toward
/// each target, diffusion scaling, and the sampling period.
#[derive(Clone)]
pub struct DualModeModel {
    dim_state: usize,
    drift_alpha: StateFn,
    drift_beta: StateFn,
    diffusion_alpha: DMatrix<f64>,
    diffusion_beta: DMatrix<f64>,
    epsilon: f64,
    dt: f64,
    /// State coordinates that live on the circle and are wrapped to (−π, π]
    /// after every step.
    angle_dims: Vec<usize>,
}

impl DualModeModel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dim_state: usize,
        drift_alpha: StateFn,
        drift_beta: StateFn,
        diffusion_alpha: DMatrix<f64>,
        diffusion_beta: DMatrix<f64>,
        epsilon: f64,
        dt: f64,
        angle_dims: Vec<usize>,
    ) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must lie in [0,1), got {epsilon}"
            )));
        }
        for (name, b) in [("alpha", &diffusion_alpha), ("beta", &diffusion_beta)] {
            if b.nrows() != dim_state {
                return Err(Error::InvalidParameter(format!(
                    "diffusion matrix for mode {name} must have {dim_state} rows, got {}",
                    b.nrows()
                )));
            }
        }
        if angle_dims.iter().any(|&i| i >= dim_state) {
            return Err(Error::InvalidParameter("angle dimension out of range".into()));
        }
        Ok(Self {
            dim_state,
            drift_alpha,
            drift_beta,
            diffusion_alpha,
            diffusion_beta,
            epsilon,
            dt,
            angle_dims,
        })
    }

    pub fn dim_state(&self) -> usize {
        self.dim_state
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn drift(&self, mode: Mode, x: &DVector<f64>) -> DVector<f64> {
        match mode {
            Mode::Alpha => (self.drift_alpha)(x),
            Mode::Beta => (self.drift_beta)(x),
        }
    }

    pub fn diffusion(&self, mode: Mode) -> &DMatrix<f64> {
        match mode {
            Mode::Alpha => &self.diffusion_alpha,
            Mode::Beta => &self.diffusion_beta,
        }
    }

    /// One-step Euler map for the given mode, with the process-noise
    /// covariance Q = ε²·dt·BBᵀ exposed alongside.
    pub fn discretize(&self, mode: Mode) -> DiscreteMap {
        let drift = match mode {
            Mode::Alpha => Arc::clone(&self.drift_alpha),
            Mode::Beta => Arc::clone(&self.drift_beta),
        };
        let b = self.diffusion(mode);
        let noise_cov = b * b.transpose() * (self.epsilon * self.epsilon * self.dt);
        DiscreteMap {
            drift,
            dt: self.dt,
            noise_cov,
            angle_dims: self.angle_dims.clone(),
            dim: self.dim_state,
        }
    }
}

/// Discrete-time transition map x ↦ x + dt·F(x) for one mode, with the
/// associated process-noise covariance.
#[derive(Clone)]
pub struct DiscreteMap {
    drift: StateFn,
    dt: f64,
    pub noise_cov: DMatrix<f64>,
    angle_dims: Vec<usize>,
    dim: usize,
}

impl DiscreteMap {
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut next = x + (self.drift)(x) * self.dt;
        self.wrap(&mut next);
        next
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn wrap(&self, x: &mut DVector<f64>) {
        for &i in &self.angle_dims {
            x[i] = wrap_angle(x[i]);
        }
    }
}

/// Simulate the true state sequence X_0..X_horizon: mode α drives the
/// transition into X_n for n < ν and mode β from n ≥ ν on. With ε = 0 the
/// output is deterministic given ν.
pub fn simulate_truth(
    model: &DualModeModel,
    initial_state: &DVector<f64>,
    change: &ChangeSpec,
    horizon: usize,
    seed: u64,
) -> Result<(Option<usize>, Vec<DVector<f64>>)> {
    if horizon < 1 {
        return Err(Error::InvalidParameter("horizon must be at least 1".into()));
    }
    if initial_state.len() != model.dim_state {
        return Err(Error::DimensionMismatch {
            expected: model.dim_state,
            got: initial_state.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nu = match change {
        ChangeSpec::Fixed(k) => {
            if *k < 1 {
                return Err(Error::InvalidParameter("change step must be >= 1".into()));
            }
            Some(*k)
        }
        ChangeSpec::Drawn(prior) => Some(prior.sample(&mut rng)),
        ChangeSpec::None => None,
    };

    let map_alpha = model.discretize(Mode::Alpha);
    let map_beta = model.discretize(Mode::Beta);

    let mut states = Vec::with_capacity(horizon + 1);
    states.push(initial_state.clone());
    let mut x = initial_state.clone();
    for n in 1..=horizon {
        let post_change = nu.is_some_and(|k| n >= k);
        let map = if post_change { &map_beta } else { &map_alpha };
        x = map.apply(&x);
        if model.epsilon > 0.0 {
            let b = model.diffusion(if post_change { Mode::Beta } else { Mode::Alpha });
            let z = DVector::from_fn(b.ncols(), |_, _| rng.sample(StandardNormal));
            x += b * z * (model.epsilon * model.dt.sqrt());
            map.wrap(&mut x);
        }
        states.push(x.clone());
    }
    Ok((nu, states))
}
