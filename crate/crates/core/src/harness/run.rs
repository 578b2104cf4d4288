//! Monte Carlo orchestration: simulate realizations, run the detection
//! pipeline over a worker pool, estimate metrics, sweep parameters, and
//! write the artifact files.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rayon::prelude::*;

use super::artifact::{
    compute_bands, write_bands_csv, write_manifest, write_metrics_json, write_observations_csv,
    write_statistics_csv, write_stopping_csv, write_trajectory_csv, Manifest, RunArtifact,
    MANIFEST_SCHEMA_VERSION,
};
use super::config::{Components, ExperimentConfig};
use crate::change_stats::{DetectionRecord, HypothesisBank};
use crate::detector::{
    cusum_stop, estimate_metrics, shiryaev_stop, CaddConfig, MetricsReport, StoppingRule,
};
use crate::dynamics::{simulate_truth, ChangeSpec, DiscreteMap, Mode};
use crate::error::{Error, Result};
use crate::math::mix_seed;
use crate::oracle::{exact_linear_change_posterior, pf_step, LinearStateModel, ParticleEnsemble};
use crate::robust_filter::{predict, vb_update, FilterParams, GaussianBelief, SigmaPointRule};
use crate::sensing::ObservationModel;

/// Truth and measurements for one realization.
pub struct RealizationOutput {
    pub change: Option<usize>,
    /// X_0..X_horizon.
    pub states: Vec<DVector<f64>>,
    /// y_0..y_horizon (y_0 is logged but carries no hypothesis information
    /// when the initial state is known).
    pub observations: Vec<DVector<f64>>,
    pub true_indicators: Vec<DVector<f64>>,
}

pub fn simulate_realization(c: &Components, seed: u64) -> Result<RealizationOutput> {
    let (change, states) =
        simulate_truth(&c.model, &c.initial_state, &c.change, c.horizon, mix_seed(seed, 1))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(seed, 2));
    let mut observations = Vec::with_capacity(states.len());
    let mut true_indicators = Vec::with_capacity(states.len());
    for x in &states {
        let (y, ind) = c.obs.observe(x, &mut rng);
        observations.push(y);
        true_indicators.push(ind);
    }
    Ok(RealizationOutput { change, states, observations, true_indicators })
}

/// One full pipeline run: simulate, advance the bank over y_1..y_H, apply
/// both stopping rules.
pub fn run_detection(c: &Components, seed: u64) -> Result<(DetectionRecord, RealizationOutput)> {
    let sim = simulate_realization(c, seed)?;
    let mut bank =
        HypothesisBank::new(&c.model, c.obs.clone(), c.prior, c.initial_belief.clone(), c.bank)?;
    let mut steps = Vec::with_capacity(c.horizon);
    for y in &sim.observations[1..] {
        steps.push(bank.advance(y)?);
    }
    let tau_shiryaev = shiryaev_stop(&steps, &c.stopping);
    let tau_cusum = cusum_stop(&steps, &c.stopping);
    Ok((
        DetectionRecord { true_change: sim.change, steps, tau_shiryaev, tau_cusum },
        sim,
    ))
}

/// Run `n_realizations` independent pipelines on the worker pool.
pub fn run_batch(c: &Components, verbose: bool) -> Result<Vec<DetectionRecord>> {
    let done = AtomicUsize::new(0);
    (0..c.n_realizations)
        .into_par_iter()
        .map(|i| {
            let (record, _) = run_detection(c, mix_seed(c.seed, i as u64))
                .map_err(|e| Error::Config(format!("run {i}: {e}")))?;
            if verbose {
                let k = done.fetch_add(1, Ordering::Relaxed) + 1;
                if k % 100 == 0 {
                    eprintln!("  {k}/{} realizations", c.n_realizations);
                }
            }
            Ok(record)
        })
        .collect()
}

fn manifest_for(
    cfg: &ExperimentConfig,
    command: &str,
    rule: Option<StoppingRule>,
    files: Vec<String>,
) -> Manifest {
    Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.run.seed,
        config_sha256: cfg.sha256(),
        n_realizations: cfg.run.n_realizations,
        rule: rule.map(|r| r.to_string()),
        files,
    }
}

fn ensure_out_dir(c: &Components) -> Result<()> {
    std::fs::create_dir_all(&c.out_dir)?;
    Ok(())
}

/// Simulate one realization and write trajectory + observations.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<RunArtifact> {
    let c = cfg.build()?;
    ensure_out_dir(&c)?;
    let sim = simulate_realization(&c, mix_seed(c.seed, 0))?;
    let dt = c.model.dt();
    write_trajectory_csv(&c.out_dir.join("trajectory.csv"), dt, &sim.states)?;
    write_observations_csv(
        &c.out_dir.join("observations.csv"),
        dt,
        &sim.observations,
        &sim.true_indicators,
    )?;
    let manifest = manifest_for(
        cfg,
        "simulate",
        None,
        vec!["trajectory.csv".into(), "observations.csv".into()],
    );
    write_manifest(&c.out_dir.join("manifest.json"), &manifest)?;
    Ok(RunArtifact { out_dir: c.out_dir.clone(), manifest })
}

/// Run the Monte Carlo detection experiment and write statistics, quantile
/// bands, stopping times and metrics.
pub fn cmd_detect(
    cfg: &ExperimentConfig,
    rule: StoppingRule,
    verbose: bool,
) -> Result<(RunArtifact, MetricsReport)> {
    let c = cfg.build()?;
    ensure_out_dir(&c)?;
    let records = run_batch(&c, verbose)?;
    let metrics =
        estimate_metrics(&records, &c.prior, rule, &c.stopping, &CaddConfig::default())?;
    let dt = c.model.dt();
    write_statistics_csv(&c.out_dir.join("statistics.csv"), dt, &records)?;
    write_bands_csv(&c.out_dir.join("bands.csv"), &compute_bands(&records, dt))?;
    write_stopping_csv(&c.out_dir.join("stopping_times.csv"), dt, &records)?;
    write_metrics_json(&c.out_dir.join("metrics.json"), &metrics)?;
    let manifest = manifest_for(
        cfg,
        "detect",
        Some(rule),
        vec![
            "statistics.csv".into(),
            "bands.csv".into(),
            "stopping_times.csv".into(),
            "metrics.json".into(),
        ],
    );
    write_manifest(&c.out_dir.join("manifest.json"), &manifest)?;
    Ok((RunArtifact { out_dir: c.out_dir.clone(), manifest }, metrics))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// False-alarm budget a of the Shiryaev rule.
    PfaBudget,
    /// CUSUM threshold c.
    CusumThreshold,
    /// Fixed change step ν.
    ChangePoint,
    /// Outlier-free probability θ (paired filter RMSE comparison).
    OutlierFreeProb,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Self::PfaBudget),
            "c" => Ok(Self::CusumThreshold),
            "nu" => Ok(Self::ChangePoint),
            "theta" => Ok(Self::OutlierFreeProb),
            other => Err(Error::Config(format!(
                "unknown sweep parameter {other:?} (expected a, c, nu or theta)"
            ))),
        }
    }
}

impl SweepParam {
    pub fn name(&self) -> &'static str {
        match self {
            Self::PfaBudget => "a",
            Self::CusumThreshold => "c",
            Self::ChangePoint => "nu",
            Self::OutlierFreeProb => "theta",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub metrics: Option<MetricsReport>,
    pub rmse_robust: Option<f64>,
    pub rmse_nominal: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "param", "value", "n_runs", "pfa", "add", "cadd", "phi_hat", "predicted_add",
            "censored", "rmse_robust", "rmse_nominal",
        ])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        for r in &self.rows {
            let m = r.metrics.as_ref();
            w.write_record(&[
                r.param.clone(),
                format!("{}", r.value),
                m.map_or(String::new(), |m| m.n_runs.to_string()),
                m.map_or(String::new(), |m| format!("{}", m.empirical_pfa)),
                opt(m.and_then(|m| m.add)),
                opt(m.and_then(|m| m.cadd)),
                opt(m.and_then(|m| m.phi_hat)),
                opt(m.and_then(|m| m.predicted_add)),
                m.map_or(String::new(), |m| m.n_censored.to_string()),
                opt(r.rmse_robust),
                opt(r.rmse_nominal),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Re-derive stopping times for existing records under a new threshold
/// configuration (statistic streams do not depend on the thresholds).
fn restop(records: &[DetectionRecord], stopping: &crate::detector::StoppingConfig) -> Vec<DetectionRecord> {
    records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            r.tau_shiryaev = shiryaev_stop(&r.steps, stopping);
            r.tau_cusum = cusum_stop(&r.steps, stopping);
            r
        })
        .collect()
}

/// Rerun detection per grid point and collect one metrics row each.
/// Threshold sweeps (a, c) reuse a single batch of statistic streams.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    param: SweepParam,
    grid: &[f64],
    verbose: bool,
) -> Result<(SweepTable, RunArtifact)> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    let c = cfg.build()?;
    ensure_out_dir(&c)?;
    let mut table = SweepTable::default();

    match param {
        SweepParam::PfaBudget | SweepParam::CusumThreshold => {
            let records = run_batch(&c, verbose)?;
            for &value in grid {
                let stopping = match param {
                    SweepParam::PfaBudget => c.stopping.with_pfa_budget(value)?,
                    _ => c.stopping.with_cusum_threshold(value)?,
                };
                let rule = match param {
                    SweepParam::PfaBudget => StoppingRule::Shiryaev,
                    _ => StoppingRule::Cusum,
                };
                let restopped = restop(&records, &stopping);
                let metrics = estimate_metrics(
                    &restopped,
                    &c.prior,
                    rule,
                    &stopping,
                    &CaddConfig::default(),
                )?;
                table.rows.push(SweepRow {
                    param: param.name().into(),
                    value,
                    metrics: Some(metrics),
                    rmse_robust: None,
                    rmse_nominal: None,
                });
            }
        }
        SweepParam::ChangePoint => {
            for &value in grid {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!(
                        "nu grid values must be positive integers, got {value}"
                    )));
                }
                let mut sub = cfg.clone();
                sub.run.change = super::config::ChangeSetting::Fixed(value as usize);
                let c_sub = sub.build()?;
                let records = run_batch(&c_sub, verbose)?;
                let metrics = estimate_metrics(
                    &records,
                    &c_sub.prior,
                    StoppingRule::Shiryaev,
                    &c_sub.stopping,
                    &CaddConfig::default(),
                )?;
                table.rows.push(SweepRow {
                    param: param.name().into(),
                    value,
                    metrics: Some(metrics),
                    rmse_robust: None,
                    rmse_nominal: None,
                });
            }
        }
        SweepParam::OutlierFreeProb => {
            for &value in grid {
                if !(0.0..=1.0).contains(&value) {
                    return Err(Error::Config(format!(
                        "theta grid values must lie in [0,1], got {value}"
                    )));
                }
                let mut sub = cfg.clone();
                sub.sensing.outlier_free_prob =
                    vec![value; sub.sensing.outlier_free_prob.len()];
                let c_sub = sub.build()?;
                let (robust, nominal) = paired_filter_rmse(&c_sub)?;
                table.rows.push(SweepRow {
                    param: param.name().into(),
                    value,
                    metrics: None,
                    rmse_robust: Some(robust),
                    rmse_nominal: Some(nominal),
                });
            }
        }
    }

    table.write_csv(&c.out_dir.join("sweep.csv"))?;
    let manifest = manifest_for(cfg, "sweep", None, vec!["sweep.csv".into()]);
    write_manifest(&c.out_dir.join("manifest.json"), &manifest)?;
    Ok((table, RunArtifact { out_dir: c.out_dir.clone(), manifest }))
}

/// Run a single-mode robust filter along a fixed observation sequence and
/// return the state-estimate RMSE against the truth.
pub fn single_mode_filter_rmse(
    map: &DiscreteMap,
    obs_filter: &ObservationModel,
    params: &FilterParams,
    rule: &SigmaPointRule,
    initial: &GaussianBelief,
    states: &[DVector<f64>],
    observations: &[DVector<f64>],
) -> Result<f64> {
    let mut belief = initial.clone();
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    for (x_true, y) in states.iter().zip(observations).skip(1) {
        let predicted = predict(&belief, map, params, rule)?;
        let update = vb_update(&predicted, y, obs_filter, params, rule)?;
        belief = update.belief;
        sq_sum += (&belief.mean - x_true).norm_squared();
        count += 1;
    }
    Ok((sq_sum / count as f64).sqrt())
}

/// Paired comparison on no-change runs: the robust filter (θ as configured)
/// versus the same filter with θ forced to 1, on identical observations.
/// Returns the mean RMSE of each across the batch.
pub fn paired_filter_rmse(c: &Components) -> Result<(f64, f64)> {
    let map = c.model.discretize(Mode::Alpha);
    let nominal_obs = c.obs.force_nominal();
    let rule = c.bank.rule;
    let params = c.bank.params;
    let mut no_change = c.clone();
    no_change.change = ChangeSpec::None;
    let pairs: Vec<(f64, f64)> = (0..c.n_realizations)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64)> {
            let sim = simulate_realization(&no_change, mix_seed(c.seed, i as u64))?;
            let robust = single_mode_filter_rmse(
                &map,
                &c.obs,
                &params,
                &rule,
                &c.initial_belief,
                &sim.states,
                &sim.observations,
            )?;
            let nominal = single_mode_filter_rmse(
                &map,
                &nominal_obs,
                &params,
                &rule,
                &c.initial_belief,
                &sim.states,
                &sim.observations,
            )?;
            Ok((robust, nominal))
        })
        .collect::<Result<_>>()?;
    let n = pairs.len() as f64;
    Ok((
        pairs.iter().map(|p| p.0).sum::<f64>() / n,
        pairs.iter().map(|p| p.1).sum::<f64>() / n,
    ))
}

/// Quick self-check of the fast path against the brute-force references on
/// built-in linear toys; returned values are maximum absolute deviations.
#[derive(Debug, Clone)]
pub struct OracleCheckReport {
    /// max |pₙ(bank) − pₙ(exact)| on a linear-Gaussian dual-mode toy.
    pub linear_posterior_gap: f64,
    /// |log-marginal(PF) − log-marginal(Kalman)| on a linear toy.
    pub particle_filter_gap: f64,
    pub passed: bool,
}

pub fn cmd_oracle_check() -> Result<OracleCheckReport> {
    use crate::change_stats::BankConfig;
    use crate::dynamics::{ChangePrior, DualModeModel};
    use std::sync::Arc;

    // Linear dual-mode toy: x' = 0.9x vs x' = 0.9x + 0.4.
    let dt = 1.0;
    let drift_alpha: crate::dynamics::StateFn =
        Arc::new(move |x: &DVector<f64>| x * (-0.1 / dt));
    let drift_beta: crate::dynamics::StateFn =
        Arc::new(move |x: &DVector<f64>| (x * (-0.1) + DVector::from_vec(vec![0.4])) / dt);
    let b = DMatrix::from_vec(1, 1, vec![0.2f64.sqrt()]);
    let model = DualModeModel::new(
        1,
        drift_alpha,
        drift_beta,
        b.clone(),
        b,
        0.9,
        dt,
        vec![],
    )?;
    let obs = ObservationModel::identity(
        1,
        DVector::from_vec(vec![0.1]),
        DVector::from_vec(vec![1.0]),
        0.08,
    )?;
    let prior = ChangePrior::new(0.05)?;
    let params = FilterParams { q_jitter: 1e-8, ..FilterParams::default() };
    let bank_cfg = BankConfig { window: None, params, rule: SigmaPointRule::default() };
    let initial = GaussianBelief::around(DVector::zeros(1), 0.05);

    let c = Components {
        model: model.clone(),
        obs: obs.clone(),
        prior,
        target_alpha: crate::dynamics::Target::new(DVector::zeros(1), 1.0)?,
        target_beta: crate::dynamics::Target::new(DVector::from_vec(vec![4.0]), 1.0)?,
        initial_state: DVector::zeros(1),
        initial_belief: initial.clone(),
        bank: bank_cfg,
        stopping: crate::detector::StoppingConfig::new(0.001, 10.0, 60)?,
        change: ChangeSpec::Fixed(15),
        horizon: 60,
        n_realizations: 1,
        seed: 7,
        out_dir: std::env::temp_dir(),
    };
    let (record, sim) = run_detection(&c, mix_seed(7, 0))?;

    let alpha_lin = LinearStateModel::probe_from_map(&model.discretize(Mode::Alpha), params.q_jitter)?;
    let beta_lin = LinearStateModel::probe_from_map(&model.discretize(Mode::Beta), params.q_jitter)?;
    let exact = exact_linear_change_posterior(
        &sim.observations[1..],
        &alpha_lin,
        &beta_lin,
        &DMatrix::identity(1, 1),
        &DVector::from_vec(vec![0.1]),
        &initial,
        &prior,
    )?;
    let linear_posterior_gap = record
        .steps
        .iter()
        .zip(&exact)
        .map(|(s, p)| (s.posterior - p).abs())
        .fold(0.0f64, f64::max);

    // Particle filter vs Kalman marginal on the α side of the same toy.
    let map = model.discretize(Mode::Alpha);
    let mut ens = ParticleEnsemble::from_point(&DVector::zeros(1), 20_000);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
    let mut pf_total = 0.0;
    let ys: Vec<DVector<f64>> = sim.observations[1..21].to_vec();
    for y in &ys {
        pf_total += pf_step(&mut ens, &map, params.q_jitter, y, &obs, &mut rng)?;
    }
    let mut kalman_total = 0.0;
    let mut belief = initial.clone();
    for y in &ys {
        let predicted = predict(&belief, &map, &params, &SigmaPointRule::default())?;
        kalman_total += crate::robust_filter::predictive_log_likelihood(
            &predicted,
            y,
            &obs,
            &SigmaPointRule::default(),
        )?;
        belief = vb_update(&predicted, y, &obs, &params, &SigmaPointRule::default())?.belief;
    }
    let particle_filter_gap = (pf_total - kalman_total).abs();

    Ok(OracleCheckReport {
        linear_posterior_gap,
        particle_filter_gap,
        passed: linear_posterior_gap < 1e-6 && particle_filter_gap < 0.5,
    })
}
