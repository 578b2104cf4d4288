//! Configuration, Monte Carlo orchestration and artifact files.

pub mod artifact;
pub mod config;
pub mod run;

pub use artifact::{Manifest, RunArtifact};
pub use config::{Components, ExperimentConfig};
pub use run::{
    cmd_detect, cmd_oracle_check, cmd_simulate, cmd_sweep, run_batch, run_detection, SweepParam,
    SweepRow, SweepTable,
};
