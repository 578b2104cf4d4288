//! Experiment configuration: a strict TOML schema (unknown keys rejected)
//! that builds every pipeline component, re-validating module invariants on
//! load. Defaults reproduce the missile case study.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::change_stats::BankConfig;
use crate::detector::StoppingConfig;
use crate::dynamics::{
    unicycle_dual_mode, ChangePrior, ChangeSpec, DualModeModel, Target, UnicycleConfig,
};
use crate::error::{Error, Result};
use crate::robust_filter::{FilterParams, GaussianBelief, SigmaPointRule};
use crate::sensing::ObservationModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub sensing: SensingSection,
    pub filter: FilterSection,
    pub detection: DetectionSection,
    pub run: RunSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub initial_state: [f64; 3],
    pub target_alpha: TargetSection,
    pub target_beta: TargetSection,
    pub state_weight: f64,
    pub control_weight: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nominal_speed: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub speed_bounds: Option<[f64; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub turn_bounds: Option<[f64; 2]>,
    pub dt: f64,
    pub epsilon: f64,
    pub prior_d: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            initial_state: [-2.0, 0.0, -std::f64::consts::FRAC_PI_4],
            target_alpha: TargetSection { center: [0.0, 0.0], radius: 0.1 },
            target_beta: TargetSection { center: [-0.2, 0.4], radius: 0.1 },
            state_weight: 10.0,
            control_weight: 1.0,
            nominal_speed: None,
            speed_bounds: None,
            turn_bounds: None,
            dt: 0.01,
            epsilon: 0.0,
            prior_d: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSection {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensingSection {
    pub noise_cov_diag: Vec<f64>,
    pub outlier_free_prob: Vec<f64>,
    /// Precision multiplier ς ∈ (0,1) applied under an outlier
    /// (effective variance R/ς).
    pub outlier_scale: f64,
    pub channel: ChannelKind,
}

impl Default for SensingSection {
    fn default() -> Self {
        Self {
            noise_cov_diag: vec![0.1, 0.06],
            outlier_free_prob: vec![0.98, 0.98],
            outlier_scale: 0.08,
            channel: ChannelKind::Position,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    /// Observe the two position coordinates.
    Position,
    /// Observe the full state vector.
    FullState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSection {
    pub q_jitter: f64,
    pub vb_tol: f64,
    pub vb_max_iters: usize,
    /// Maximum retained change chains; 0 means unlimited.
    pub window: usize,
    /// Initial belief covariance (variance·I around the known start).
    pub init_cov: f64,
}

impl Default for FilterSection {
    fn default() -> Self {
        Self { q_jitter: 1e-6, vb_tol: 1e-6, vb_max_iters: 10, window: 200, init_cov: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectionSection {
    pub pfa_budget: f64,
    pub cusum_threshold: f64,
    pub max_steps: usize,
}

impl Default for DetectionSection {
    fn default() -> Self {
        Self { pfa_budget: 0.001, cusum_threshold: 10.0, max_steps: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub n_realizations: usize,
    pub seed: u64,
    /// Change step: a fixed integer, "drawn" (from the prior) or "never".
    pub change: ChangeSetting,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            n_realizations: 1000,
            seed: 42,
            change: ChangeSetting::Fixed(10),
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ChangeSetting {
    Fixed(usize),
    Policy(ChangePolicy),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChangePolicy {
    Drawn,
    Never,
}

impl ChangeSetting {
    pub fn to_spec(&self, prior: ChangePrior) -> ChangeSpec {
        match self {
            ChangeSetting::Fixed(k) => ChangeSpec::Fixed(*k),
            ChangeSetting::Policy(ChangePolicy::Drawn) => ChangeSpec::Drawn(prior),
            ChangeSetting::Policy(ChangePolicy::Never) => ChangeSpec::None,
        }
    }
}

/// Fully validated pipeline components built from a config.
#[derive(Clone)]
pub struct Components {
    pub model: DualModeModel,
    pub obs: ObservationModel,
    pub prior: ChangePrior,
    pub target_alpha: Target,
    pub target_beta: Target,
    pub initial_state: DVector<f64>,
    pub initial_belief: GaussianBelief,
    pub bank: BankConfig,
    pub stopping: StoppingConfig,
    pub change: ChangeSpec,
    pub horizon: usize,
    pub n_realizations: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hash of the canonical serialization; recorded in every manifest.
    pub fn sha256(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.build().map(|_| ())
    }

    /// Build and validate every component.
    pub fn build(&self) -> Result<Components> {
        let m = &self.model;
        let prior = ChangePrior::new(m.prior_d)?;
        let target_alpha =
            Target::new(DVector::from_vec(m.target_alpha.center.to_vec()), m.target_alpha.radius)?;
        let target_beta =
            Target::new(DVector::from_vec(m.target_beta.center.to_vec()), m.target_beta.radius)?;
        let unicycle = UnicycleConfig {
            initial_state: m.initial_state,
            state_weight: m.state_weight,
            control_weight: m.control_weight,
            nominal_speed: m.nominal_speed,
            speed_bounds: m.speed_bounds.map(|b| (b[0], b[1])),
            turn_bounds: m.turn_bounds.map(|b| (b[0], b[1])),
        };
        let model = unicycle_dual_mode(&unicycle, &target_alpha, &target_beta, m.epsilon, m.dt)?;

        let s = &self.sensing;
        let noise = DVector::from_vec(s.noise_cov_diag.clone());
        let theta = DVector::from_vec(s.outlier_free_prob.clone());
        let obs = match s.channel {
            ChannelKind::Position => {
                ObservationModel::position(model.dim_state(), noise, theta, s.outlier_scale)?
            }
            ChannelKind::FullState => {
                ObservationModel::identity(model.dim_state(), noise, theta, s.outlier_scale)?
            }
        };

        let f = &self.filter;
        if !(f.init_cov >= 0.0) {
            return Err(Error::Config("filter.init_cov must be non-negative".into()));
        }
        let bank = BankConfig {
            window: (f.window > 0).then_some(f.window),
            params: FilterParams {
                q_jitter: f.q_jitter,
                vb_tol: f.vb_tol,
                vb_max_iters: f.vb_max_iters,
            },
            rule: SigmaPointRule::default(),
        };

        let d = &self.detection;
        let stopping = StoppingConfig::new(d.pfa_budget, d.cusum_threshold, d.max_steps)?;

        let r = &self.run;
        if r.n_realizations == 0 {
            return Err(Error::Config("run.n_realizations must be positive".into()));
        }
        if let ChangeSetting::Fixed(k) = r.change {
            if k == 0 {
                return Err(Error::Config("run.change must be >= 1".into()));
            }
        }
        let initial_state = DVector::from_vec(m.initial_state.to_vec());
        let initial_belief = GaussianBelief::around(initial_state.clone(), f.init_cov);

        Ok(Components {
            model,
            obs,
            prior,
            target_alpha,
            target_beta,
            initial_state,
            initial_belief,
            bank,
            stopping,
            change: r.change.to_spec(prior),
            horizon: d.max_steps,
            n_realizations: r.n_realizations,
            seed: r.seed,
            out_dir: r.out_dir.clone(),
        })
    }
}
