//! Unicycle kinematics with LQR guidance toward a target ball.
//!
//! The guidance gain comes from linearizing the unicycle about the heading
//! that points from the agent's initial position toward the target, at a
//! nominal cruise speed. The gain acts on (position error, heading error)
//! expressed in the line-of-sight frame of the *current* state: the frame
//! re-aims at the target as the agent moves, which removes the spurious
//! stall equilibria a frozen reference frame exhibits (with v → 0 a
//! leftover lateral offset becomes uncontrollable and the vehicle parks
//! outside the ball). Heading error is wrapped to (−π, π] before it enters
//! the feedback.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::lqr::solve_care;
use super::{DualModeModel, StateFn, Target};
use crate::error::{Error, Result};
use crate::math::wrap_angle;

/// Case-study unicycle configuration: initial pose, LQR weights, and
/// optional control saturation.
///
/// The nominal linearization speed is a free modeling choice (the agent's
/// speed is an LQR output, not a fixed parameter); when unset it defaults
/// to the initial LQR speed command √(state_weight/control_weight)·dist,
/// which keeps the lateral loop well damped along the whole approach.
#[derive(Debug, Clone)]
pub struct UnicycleConfig {
    pub initial_state: [f64; 3],
    pub state_weight: f64,
    pub control_weight: f64,
    pub nominal_speed: Option<f64>,
    pub speed_bounds: Option<(f64, f64)>,
    pub turn_bounds: Option<(f64, f64)>,
}

impl Default for UnicycleConfig {
    fn default() -> Self {
        Self {
            initial_state: [-2.0, 0.0, -std::f64::consts::FRAC_PI_4],
            state_weight: 10.0,
            control_weight: 1.0,
            nominal_speed: None,
            speed_bounds: None,
            turn_bounds: None,
        }
    }
}

/// Static feedback law u = −K·(position error, wrapped heading error) in
/// the current line-of-sight frame, optionally saturated.
#[derive(Debug, Clone)]
pub struct GuidanceLaw {
    /// Gain in the original state frame (as solved for the linearization).
    gain: DMatrix<f64>,
    /// The same gain expressed in the line-of-sight-aligned frame.
    gain_los: DMatrix<f64>,
    reference: DVector<f64>,
    speed_bounds: Option<(f64, f64)>,
    turn_bounds: Option<(f64, f64)>,
}

impl GuidanceLaw {
    /// Control inputs (speed, turn rate) for the state (x₁, x₂, θ).
    pub fn control(&self, x: &DVector<f64>) -> (f64, f64) {
        let ex = x[0] - self.reference[0];
        let ey = x[1] - self.reference[1];
        // Line of sight from the current position toward the target; the
        // position error in this frame is purely along-track.
        let los = if ex == 0.0 && ey == 0.0 {
            self.reference[2]
        } else {
            (-ey).atan2(-ex)
        };
        let (c, s) = (los.cos(), los.sin());
        let e = DVector::from_vec(vec![
            c * ex + s * ey,
            -s * ex + c * ey,
            wrap_angle(x[2] - los),
        ]);
        let u = -&self.gain_los * e;
        let clamp = |v: f64, b: Option<(f64, f64)>| match b {
            Some((lo, hi)) => v.clamp(lo, hi),
            None => v,
        };
        (clamp(u[0], self.speed_bounds), clamp(u[1], self.turn_bounds))
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }

    /// Line-of-sight heading used for the linearization.
    pub fn heading_reference(&self) -> f64 {
        self.reference[2]
    }
}

/// Build the LQR guidance law driving the unicycle from its initial pose
/// into the given target ball.
pub fn unicycle_guidance(cfg: &UnicycleConfig, target: &Target) -> Result<GuidanceLaw> {
    if target.center.len() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, got: target.center.len() });
    }
    if !(cfg.state_weight > 0.0) || !(cfg.control_weight > 0.0) {
        return Err(Error::InvalidParameter(
            "state and control weights must be positive".into(),
        ));
    }
    let dx = target.center[0] - cfg.initial_state[0];
    let dy = target.center[1] - cfg.initial_state[1];
    let dist = (dx * dx + dy * dy).sqrt();
    let heading = dy.atan2(dx);
    let gain_ratio = (cfg.state_weight / cfg.control_weight).sqrt();
    let v0 = cfg.nominal_speed.unwrap_or(gain_ratio * dist).max(1e-3);

    let (c, s) = (heading.cos(), heading.sin());
    let a = DMatrix::from_row_slice(3, 3, &[
        0.0, 0.0, -v0 * s,
        0.0, 0.0, v0 * c,
        0.0, 0.0, 0.0,
    ]);
    let b = DMatrix::from_row_slice(3, 2, &[
        c, 0.0,
        s, 0.0,
        0.0, 1.0,
    ]);
    let q = DMatrix::from_diagonal(&DVector::from_vec(vec![
        cfg.state_weight,
        cfg.state_weight,
        0.0,
    ]));
    let r = DMatrix::identity(2, 2) * cfg.control_weight;

    // Stabilizing seed by pole placement on the decoupled approximation:
    // a single integrator along the approach line, a double integrator
    // (lateral offset, heading) across it.
    let rot = DMatrix::from_row_slice(3, 3, &[
        c, s, 0.0,
        -s, c, 0.0,
        0.0, 0.0, 1.0,
    ]);
    let seed_rot = DMatrix::from_row_slice(2, 3, &[
        1.0, 0.0, 0.0,
        0.0, 1.0 / v0, 2.0,
    ]);
    let seed = seed_rot * &rot;

    let sol = solve_care(&a, &b, &q, &r, Some(&seed))?;
    // K acts on rotated-frame errors: K = K_los·T, so K_los = K·Tᵀ.
    let gain_los = &sol.gain * rot.transpose();
    Ok(GuidanceLaw {
        gain: sol.gain,
        gain_los,
        reference: DVector::from_vec(vec![target.center[0], target.center[1], heading]),
        speed_bounds: cfg.speed_bounds,
        turn_bounds: cfg.turn_bounds,
    })
}

fn drift_from(law: GuidanceLaw) -> StateFn {
    Arc::new(move |x: &DVector<f64>| {
        let (v, w) = law.control(x);
        DVector::from_vec(vec![v * x[2].cos(), v * x[2].sin(), w])
    })
}

/// Dual-mode unicycle: mode α steers toward `target_alpha`, mode β toward
/// `target_beta`. The heading coordinate is wrapped after every step.
pub fn unicycle_dual_mode(
    cfg: &UnicycleConfig,
    target_alpha: &Target,
    target_beta: &Target,
    epsilon: f64,
    dt: f64,
) -> Result<DualModeModel> {
    let law_alpha = unicycle_guidance(cfg, target_alpha)?;
    let law_beta = unicycle_guidance(cfg, target_beta)?;
    DualModeModel::new(
        3,
        drift_from(law_alpha),
        drift_from(law_beta),
        DMatrix::identity(3, 3),
        DMatrix::identity(3, 3),
        epsilon,
        dt,
        vec![2],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::lqr::max_real_eigenvalue;
    use crate::dynamics::{simulate_truth, ChangeSpec, Mode};
    use approx::assert_relative_eq;

    fn case_study_targets() -> (Target, Target) {
        (
            Target::new(DVector::from_vec(vec![0.0, 0.0]), 0.1).unwrap(),
            Target::new(DVector::from_vec(vec![-0.2, 0.4]), 0.1).unwrap(),
        )
    }

    /// Closed-form gain for the decoupled rotated-frame Riccati equation:
    /// the along-track loop is a scalar CARE, the (lateral, heading) loop a
    /// double integrator at the nominal speed.
    fn closed_form_gain(cfg: &UnicycleConfig, target: &Target) -> DMatrix<f64> {
        let dx = target.center[0] - cfg.initial_state[0];
        let dy = target.center[1] - cfg.initial_state[1];
        let heading = dy.atan2(dx);
        let dist = (dx * dx + dy * dy).sqrt();
        let (q, r) = (cfg.state_weight, cfg.control_weight);
        let v0 = cfg.nominal_speed.unwrap_or((q / r).sqrt() * dist).max(1e-3);
        let k_along = (q / r).sqrt();
        let k_lat = (q / r).sqrt();
        let k_heading = (2.0 * v0 * (q * r).sqrt() / r).sqrt();
        let (c, s) = (heading.cos(), heading.sin());
        let rot = DMatrix::from_row_slice(3, 3, &[c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0]);
        DMatrix::from_row_slice(2, 3, &[k_along, 0.0, 0.0, 0.0, k_lat, k_heading]) * rot
    }

    #[test]
    fn gain_matches_closed_form_and_ode_oracle() {
        let cfg = UnicycleConfig::default();
        let (ta, _) = case_study_targets();
        let law = unicycle_guidance(&cfg, &ta).unwrap();

        // Route 1: decoupled closed form.
        let reference = closed_form_gain(&cfg, &ta);
        assert_relative_eq!((law.gain() - &reference).abs().max(), 0.0, epsilon = 1e-8);

        // Route 2: brute-force integration of the Riccati ODE.
        let dx = ta.center[0] - cfg.initial_state[0];
        let dy = ta.center[1] - cfg.initial_state[1];
        let heading = dy.atan2(dx);
        let v0 = (cfg.state_weight / cfg.control_weight).sqrt()
            * (dx * dx + dy * dy).sqrt();
        let (c, s) = (heading.cos(), heading.sin());
        let a = DMatrix::from_row_slice(3, 3, &[
            0.0, 0.0, -v0 * s,
            0.0, 0.0, v0 * c,
            0.0, 0.0, 0.0,
        ]);
        let b = DMatrix::from_row_slice(3, 2, &[c, 0.0, s, 0.0, 0.0, 1.0]);
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![10.0, 10.0, 0.0]));
        let r = DMatrix::identity(2, 2);
        let ode = crate::dynamics::lqr::tests::riccati_ode_gain(&a, &b, &q, &r);
        assert_relative_eq!((law.gain() - &ode).abs().max(), 0.0, epsilon = 1e-8);

        // Closed loop of the linearization is Hurwitz.
        assert!(max_real_eigenvalue(&(a - b * law.gain())) < -1e-6);
    }

    #[test]
    fn closed_loop_reaches_and_stays_in_each_target() {
        let cfg = UnicycleConfig::default();
        let (ta, tb) = case_study_targets();
        let model = unicycle_dual_mode(&cfg, &ta, &tb, 0.0, 0.01).unwrap();
        let x0 = DVector::from_vec(cfg.initial_state.to_vec());

        for (mode, target) in [(Mode::Alpha, &ta), (Mode::Beta, &tb)] {
            let map = model.discretize(mode);
            let mut x = x0.clone();
            let horizon = 300;
            let mut distances = Vec::with_capacity(horizon);
            for _ in 0..horizon {
                x = map.apply(&x);
                distances.push(target.distance(&x));
            }
            // Reach-and-stay: once inside the ball, never leave.
            let first_in = distances.iter().position(|&d| d <= target.radius);
            let first_in = first_in.expect("trajectory never entered the target ball");
            assert!(
                distances[first_in..].iter().all(|&d| d <= target.radius),
                "trajectory left the target ball after entering"
            );
            // Norm decrease after the transient.
            let transient = horizon / 3;
            for w in distances[transient..].windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "distance increased late in the run");
            }
            assert!(distances[horizon - 1] < 1e-2);
        }
    }

    #[test]
    fn case_study_switch_bends_trajectory_toward_beta() {
        let cfg = UnicycleConfig::default();
        let (ta, tb) = case_study_targets();
        let model = unicycle_dual_mode(&cfg, &ta, &tb, 0.0, 0.01).unwrap();
        let x0 = DVector::from_vec(cfg.initial_state.to_vec());

        let (nu, states) =
            simulate_truth(&model, &x0, &ChangeSpec::Fixed(10), 300, 1).unwrap();
        assert_eq!(nu, Some(10));
        // Early approach heads toward Γ_α, then the path bends toward Γ_β.
        let at_switch = &states[10];
        assert!(at_switch[0] > -2.0 && at_switch[0] < -1.0);
        assert!(tb.contains(states.last().unwrap()).unwrap());

        // Without a change the agent settles in Γ_α instead.
        let (_, alpha_states) =
            simulate_truth(&model, &x0, &ChangeSpec::Fixed(301), 300, 1).unwrap();
        assert!(ta.contains(alpha_states.last().unwrap()).unwrap());
    }

    #[test]
    fn saturation_clamps_the_command()  {
        let cfg = UnicycleConfig {
            speed_bounds: Some((0.0, 1.0)),
            turn_bounds: Some((-0.5, 0.5)),
            ..UnicycleConfig::default()
        };
        let (ta, _) = case_study_targets();
        let law = unicycle_guidance(&cfg, &ta).unwrap();
        let (v, w) = law.control(&DVector::from_vec(vec![-2.0, 0.0, -0.785]));
        assert!(v <= 1.0 && v >= 0.0);
        assert!(w.abs() <= 0.5);
    }
}
