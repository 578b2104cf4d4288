//! Sequential detection of a maneuvering agent's mid-course target switch
//! from noisy, outlier-contaminated partial observations.
//!
//! The pipeline: a dual-mode motion model ([`dynamics`]) generates the
//! truth; sensors with two-point outlier contamination ([`sensing`])
//! produce observations; a bank of outlier-robust variational-Bayes
//! Gaussian filters ([`robust_filter`], [`change_stats`]) tracks one
//! hypothesis per candidate switch step and accumulates likelihood-ratio
//! statistics; Shiryaev and CUSUM stopping rules ([`detector`]) turn the
//! statistics into alarms. Brute-force references for validation live in
//! [`oracle`], and the Monte Carlo experiment driver in [`harness`].

pub mod change_stats;
pub mod detector;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod math;
pub mod oracle;
pub mod robust_filter;
pub mod sensing;

pub use change_stats::{BankConfig, DetectionRecord, HypothesisBank, HypothesisChain, StepStats};
pub use detector::{MetricsReport, StoppingConfig, StoppingRule};
pub use dynamics::{
    ChangePrior, ChangeSpec, DiscreteMap, DualModeModel, Mode, Target, UnicycleConfig,
};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, Manifest, RunArtifact};
pub use robust_filter::{FilterParams, GaussianBelief, IndicatorPosterior, SigmaPointRule};
pub use sensing::{IndicatorDensity, ObservationModel};
