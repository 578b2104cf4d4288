//! Stopping rules and Monte Carlo performance metrics.
//!
//! The Shiryaev rule stops at the first step with L̂ₙ ≥ B_a = (1−a)/a
//! (compared in the log domain); CUSUM stops when Tₙ ≥ c. Metrics follow
//! the usual conventions: PFA is the fraction of runs alarming before the
//! change, ADD the mean delay over runs alarming at or after it, CADD the
//! worst per-change-step binned mean delay.

use serde::{Deserialize, Serialize};

use crate::change_stats::{DetectionRecord, StepStats};
use crate::dynamics::ChangePrior;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingRule {
    Shiryaev,
    Cusum,
}

impl std::fmt::Display for StoppingRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StoppingRule::Shiryaev => write!(f, "shiryaev"),
            StoppingRule::Cusum => write!(f, "cusum"),
        }
    }
}

/// Thresholds for both rules plus the run horizon.
#[derive(Debug, Clone, Copy)]
pub struct StoppingConfig {
    pfa_budget: f64,
    log_shiryaev_threshold: f64,
    pub cusum_threshold: f64,
    pub max_steps: usize,
}

impl StoppingConfig {
    pub fn new(pfa_budget: f64, cusum_threshold: f64, max_steps: usize) -> Result<Self> {
        if !(pfa_budget > 0.0 && pfa_budget < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "false-alarm budget must lie in (0,1), got {pfa_budget}"
            )));
        }
        if !(cusum_threshold > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "cusum threshold must be positive, got {cusum_threshold}"
            )));
        }
        if max_steps == 0 {
            return Err(Error::InvalidParameter("max_steps must be positive".into()));
        }
        Ok(Self {
            pfa_budget,
            log_shiryaev_threshold: ((1.0 - pfa_budget) / pfa_budget).ln(),
            cusum_threshold,
            max_steps,
        })
    }

    pub fn pfa_budget(&self) -> f64 {
        self.pfa_budget
    }

    /// B_a = (1−a)/a.
    pub fn shiryaev_threshold(&self) -> f64 {
        self.log_shiryaev_threshold.exp()
    }

    pub fn log_shiryaev_threshold(&self) -> f64 {
        self.log_shiryaev_threshold
    }

    pub fn with_pfa_budget(self, a: f64) -> Result<Self> {
        Self::new(a, self.cusum_threshold, self.max_steps)
    }

    pub fn with_cusum_threshold(self, c: f64) -> Result<Self> {
        Self::new(self.pfa_budget, c, self.max_steps)
    }
}

/// First step n ≤ max_steps with log L̂ₙ ≥ log B_a; `None` when censored.
pub fn shiryaev_stop(steps: &[StepStats], cfg: &StoppingConfig) -> Option<usize> {
    steps
        .iter()
        .take(cfg.max_steps)
        .find(|s| s.log_shiryaev >= cfg.log_shiryaev_threshold)
        .map(|s| s.step)
}

/// First step n ≤ max_steps with Tₙ ≥ c; `None` when censored.
pub fn cusum_stop(steps: &[StepStats], cfg: &StoppingConfig) -> Option<usize> {
    steps
        .iter()
        .take(cfg.max_steps)
        .find(|s| s.cusum >= cfg.cusum_threshold)
        .map(|s| s.step)
}

/// Binning controls for the CADD plug-in estimator.
#[derive(Debug, Clone, Copy)]
pub struct CaddConfig {
    pub bin_width: usize,
    pub min_count: usize,
}

impl Default for CaddConfig {
    fn default() -> Self {
        Self { bin_width: 5, min_count: 20 }
    }
}

/// Monte Carlo estimates across a batch of runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub rule: StoppingRule,
    pub threshold: f64,
    pub n_runs: usize,
    pub n_false_alarms: usize,
    pub n_censored: usize,
    pub empirical_pfa: f64,
    /// Mean delay τ−ν over runs with τ ≥ ν, if any.
    pub add: Option<f64>,
    /// Max over ν-bins (with at least `min_count` runs) of the mean delay.
    pub cadd: Option<f64>,
    /// Per-run delays τ−ν for runs with τ ≥ ν.
    pub delays: Vec<f64>,
    /// Post-change growth rate of the best chain's cumulative log ratio,
    /// estimated by least squares over steps [ν+5, ν+50].
    pub phi_hat: Option<f64>,
    /// |log a| / (φ̂ + |log(1−d)|).
    pub predicted_add: Option<f64>,
}

pub const METRICS_SCHEMA_VERSION: u32 = 1;

fn stop_of(record: &DetectionRecord, rule: StoppingRule) -> Option<usize> {
    match rule {
        StoppingRule::Shiryaev => record.tau_shiryaev,
        StoppingRule::Cusum => record.tau_cusum,
    }
}

/// Least-squares slope of the CUSUM statistic over steps [ν+5, ν+50].
fn post_change_slope(record: &DetectionRecord) -> Option<f64> {
    let nu = record.true_change?;
    let lo = nu + 5;
    let hi = (nu + 50).min(record.steps.len());
    if hi <= lo + 10 {
        return None;
    }
    let window = &record.steps[lo - 1..hi];
    let n = window.len() as f64;
    let mean_x = window.iter().map(|s| s.step as f64).sum::<f64>() / n;
    let mean_y = window.iter().map(|s| s.cusum).sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for s in window {
        let dx = s.step as f64 - mean_x;
        num += dx * (s.cusum - mean_y);
        den += dx * dx;
    }
    (den > 0.0).then(|| num / den)
}

/// Estimate PFA/ADD/CADD and the drift diagnostic over a batch of runs.
/// Censored runs stay in the PFA denominator and are excluded from delays.
pub fn estimate_metrics(
    runs: &[DetectionRecord],
    prior: &ChangePrior,
    rule: StoppingRule,
    cfg: &StoppingConfig,
    cadd_cfg: &CaddConfig,
) -> Result<MetricsReport> {
    if runs.is_empty() {
        return Err(Error::EmptyRuns);
    }
    let n_runs = runs.len();
    let mut n_false_alarms = 0usize;
    let mut n_censored = 0usize;
    let mut delays = Vec::new();
    let mut bins: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    let mut slopes = Vec::new();

    for record in runs {
        let tau = stop_of(record, rule);
        match (tau, record.true_change) {
            (None, _) => n_censored += 1,
            (Some(t), Some(nu)) if t >= nu => {
                let delay = (t - nu) as f64;
                delays.push(delay);
                bins.entry(nu / cadd_cfg.bin_width.max(1)).or_default().push(delay);
            }
            (Some(_), _) => n_false_alarms += 1,
        }
        if let Some(slope) = post_change_slope(record) {
            slopes.push(slope);
        }
    }

    let add = (!delays.is_empty()).then(|| delays.iter().sum::<f64>() / delays.len() as f64);
    let cadd = bins
        .values()
        .filter(|v| v.len() >= cadd_cfg.min_count)
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        .fold(None, |acc: Option<f64>, m| Some(acc.map_or(m, |a| a.max(m))));
    let phi_hat =
        (!slopes.is_empty()).then(|| slopes.iter().sum::<f64>() / slopes.len() as f64);
    let predicted_add = phi_hat.and_then(|phi| {
        let denom = phi + (1.0 - prior.d()).ln().abs();
        (denom > 0.0).then(|| cfg.pfa_budget().ln().abs() / denom)
    });

    Ok(MetricsReport {
        schema_version: METRICS_SCHEMA_VERSION,
        rule,
        threshold: match rule {
            StoppingRule::Shiryaev => cfg.shiryaev_threshold(),
            StoppingRule::Cusum => cfg.cusum_threshold,
        },
        n_runs,
        n_false_alarms,
        n_censored,
        empirical_pfa: n_false_alarms as f64 / n_runs as f64,
        add,
        cadd,
        delays,
        phi_hat,
        predicted_add,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn synthetic_steps(log_l: impl Fn(usize) -> f64, cusum: impl Fn(usize) -> f64, n: usize) -> Vec<StepStats> {
        (1..=n)
            .map(|step| StepStats {
                step,
                log_shiryaev: log_l(step),
                posterior: crate::math::sigmoid(log_l(step)),
                cusum: cusum(step),
                n_chains: step,
                argmax_change: Some(1),
                dropped_chains: 0,
                wall_secs: 0.0,
            })
            .collect()
    }

    #[test]
    fn shiryaev_threshold_arithmetic() {
        let cfg = StoppingConfig::new(0.001, 10.0, 100).unwrap();
        assert_relative_eq!(cfg.shiryaev_threshold(), 999.0, epsilon = 1e-9);
        let even = StoppingConfig::new(0.5, 10.0, 100).unwrap();
        assert_relative_eq!(even.shiryaev_threshold(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn shiryaev_stop_on_linear_ramp() {
        // log L̂ₙ = 0.1·n crosses log(999) at n = ⌈69.07⌉ = 70.
        let steps = synthetic_steps(|n| 0.1 * n as f64, |_| 0.0, 200);
        let cfg = StoppingConfig::new(0.001, 10.0, 200).unwrap();
        assert_eq!(shiryaev_stop(&steps, &cfg), Some(70));
        // a = 0.5 stops at the first step with p ≥ 0.5 (log L ≥ 0).
        let cfg_half = StoppingConfig::new(0.5, 10.0, 200).unwrap();
        assert_eq!(shiryaev_stop(&steps, &cfg_half), Some(1));
    }

    #[test]
    fn cusum_stop_and_censoring() {
        let steps = synthetic_steps(|_| f64::NEG_INFINITY, |n| 0.5 * n as f64, 50);
        let cfg = StoppingConfig::new(0.01, 10.0, 50).unwrap();
        assert_eq!(cusum_stop(&steps, &cfg), Some(20));
        // Tiny threshold with a positive T₁ alarms immediately.
        let tiny = StoppingConfig::new(0.01, 1e-12, 50).unwrap();
        assert_eq!(cusum_stop(&steps, &tiny), Some(1));
        // Never reaching c within the horizon is censored.
        let unreachable = StoppingConfig::new(0.01, 4e4, 50).unwrap();
        assert_eq!(cusum_stop(&steps, &unreachable), None);
        // max_steps truncates the scan.
        let truncated = StoppingConfig::new(0.01, 10.0, 10).unwrap();
        assert_eq!(cusum_stop(&steps, &truncated), None);
    }

    #[test]
    fn stopping_times_are_monotone_in_thresholds() {
        let steps = synthetic_steps(|n| 0.07 * n as f64, |n| 0.3 * n as f64, 400);
        let mut last_s = 0;
        for a in [1e-2, 1e-3, 1e-4] {
            let cfg = StoppingConfig::new(a, 10.0, 400).unwrap();
            let tau = shiryaev_stop(&steps, &cfg).unwrap();
            assert!(tau >= last_s, "loosening a must not delay stopping");
            last_s = tau;
        }
        let mut last_c = 0;
        for c in [5.0, 20.0, 60.0] {
            let cfg = StoppingConfig::new(0.01, c, 400).unwrap();
            let tau = cusum_stop(&steps, &cfg).unwrap();
            assert!(tau >= last_c);
            last_c = tau;
        }
    }

    fn record(nu: Option<usize>, tau: Option<usize>, horizon: usize) -> DetectionRecord {
        DetectionRecord {
            true_change: nu,
            steps: synthetic_steps(|_| 0.0, |_| 0.0, horizon),
            tau_shiryaev: tau,
            tau_cusum: tau,
        }
    }

    #[test]
    fn metrics_arithmetic() {
        let prior = ChangePrior::new(0.05).unwrap();
        let cfg = StoppingConfig::new(0.001, 10.0, 100).unwrap();
        // Both runs alarm exactly at ν.
        let exact = vec![record(Some(10), Some(10), 100), record(Some(7), Some(7), 100)];
        let report =
            estimate_metrics(&exact, &prior, StoppingRule::Shiryaev, &cfg, &CaddConfig::default())
                .unwrap();
        assert_eq!(report.add, Some(0.0));
        assert_eq!(report.empirical_pfa, 0.0);

        // Delays {2, 4} average to 3.
        let delayed = vec![record(Some(10), Some(12), 100), record(Some(10), Some(14), 100)];
        let report =
            estimate_metrics(&delayed, &prior, StoppingRule::Shiryaev, &cfg, &CaddConfig::default())
                .unwrap();
        assert_eq!(report.add, Some(3.0));

        // A stop before ν is a false alarm; a missing stop is censored but
        // stays in the PFA denominator.
        let mixed = vec![
            record(Some(10), Some(5), 100),
            record(Some(10), None, 100),
            record(None, Some(3), 100),
            record(Some(10), Some(11), 100),
        ];
        let report =
            estimate_metrics(&mixed, &prior, StoppingRule::Shiryaev, &cfg, &CaddConfig::default())
                .unwrap();
        assert_eq!(report.n_runs, 4);
        assert_eq!(report.n_false_alarms, 2);
        assert_eq!(report.n_censored, 1);
        assert_relative_eq!(report.empirical_pfa, 0.5);
        assert_eq!(report.add, Some(1.0));

        assert!(matches!(
            estimate_metrics(&[], &prior, StoppingRule::Shiryaev, &cfg, &CaddConfig::default()),
            Err(Error::EmptyRuns)
        ));
    }

    #[test]
    fn cadd_uses_the_worst_bin() {
        let prior = ChangePrior::new(0.05).unwrap();
        let cfg = StoppingConfig::new(0.001, 10.0, 100).unwrap();
        let mut runs = Vec::new();
        // 25 runs with ν = 3, delay 1; 25 runs with ν = 20, delay 5.
        for _ in 0..25 {
            runs.push(record(Some(3), Some(4), 100));
            runs.push(record(Some(20), Some(25), 100));
        }
        let report = estimate_metrics(
            &runs,
            &prior,
            StoppingRule::Shiryaev,
            &cfg,
            &CaddConfig { bin_width: 5, min_count: 20 },
        )
        .unwrap();
        assert_eq!(report.cadd, Some(5.0));
        assert_relative_eq!(report.add.unwrap(), 3.0);
    }

    #[test]
    fn phi_hat_recovers_a_linear_drift() {
        let prior = ChangePrior::new(0.05).unwrap();
        let cfg = StoppingConfig::new(0.001, 10.0, 200).unwrap();
        let nu = 10usize;
        let steps = synthetic_steps(
            |_| 0.0,
            move |n| if n >= nu { 0.8 * (n - nu) as f64 } else { 0.0 },
            200,
        );
        let runs = vec![DetectionRecord {
            true_change: Some(nu),
            steps,
            tau_shiryaev: Some(30),
            tau_cusum: Some(30),
        }];
        let report =
            estimate_metrics(&runs, &prior, StoppingRule::Cusum, &cfg, &CaddConfig::default())
                .unwrap();
        assert_relative_eq!(report.phi_hat.unwrap(), 0.8, epsilon = 1e-9);
        let expected = (0.001f64).ln().abs() / (0.8 + 0.95f64.ln().abs());
        assert_relative_eq!(report.predicted_add.unwrap(), expected, epsilon = 1e-9);
    }
}
