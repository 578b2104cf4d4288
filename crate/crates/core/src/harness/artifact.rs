//! File formats for run artifacts. Every writer has a matching reader and
//! values round-trip exactly (shortest-representation float formatting).

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::change_stats::DetectionRecord;
use crate::detector::MetricsReport;
use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Reproducibility record: config hash + seed + build version determine
/// every output byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub n_realizations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rule: Option<String>,
    pub files: Vec<String>,
}

/// Paths written by one command invocation.
#[derive(Debug, Clone)]
pub struct RunArtifact {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
}

impl RunArtifact {
    pub fn file(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|e| Error::Config(format!("bad float {s:?}: {e}")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.parse::<usize>()
        .map_err(|e| Error::Config(format!("bad integer {s:?}: {e}")))
}

// --- trajectory ------------------------------------------------------------

pub fn write_trajectory_csv(path: &Path, dt: f64, states: &[DVector<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = states.first().map_or(0, |s| s.len());
    let mut header = vec!["step".to_string(), "t".to_string()];
    header.extend((1..=dim).map(|i| format!("x{i}")));
    w.write_record(&header)?;
    for (n, x) in states.iter().enumerate() {
        let mut row = vec![n.to_string(), fmt(n as f64 * dt)];
        row.extend(x.iter().map(|v| fmt(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<(usize, f64, DVector<f64>)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        let step = parse_usize(&record[0])?;
        let t = parse_f64(&record[1])?;
        let xs: Result<Vec<f64>> = record.iter().skip(2).map(parse_f64).collect();
        out.push((step, t, DVector::from_vec(xs?)));
    }
    Ok(out)
}

// --- observations ----------------------------------------------------------

/// Rows: step, t, y_1..y_m, outlier_1..outlier_m (diagnostic flags derived
/// from the true indicators; never fed to the filter).
pub fn write_observations_csv(
    path: &Path,
    dt: f64,
    observations: &[DVector<f64>],
    indicators: &[DVector<f64>],
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let m = observations.first().map_or(0, |y| y.len());
    let mut header = vec!["step".to_string(), "t".to_string()];
    header.extend((1..=m).map(|i| format!("y{i}")));
    header.extend((1..=m).map(|i| format!("outlier{i}")));
    w.write_record(&header)?;
    for (n, (y, ind)) in observations.iter().zip(indicators).enumerate() {
        let mut row = vec![n.to_string(), fmt(n as f64 * dt)];
        row.extend(y.iter().map(|v| fmt(*v)));
        row.extend(ind.iter().map(|&i| if i < 1.0 { "1".into() } else { "0".to_string() }));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub struct ObservationRow {
    pub step: usize,
    pub t: f64,
    pub y: DVector<f64>,
    /// Present only when the file carries the diagnostic columns.
    pub outliers: Option<Vec<bool>>,
}

pub fn read_observations_csv(path: &Path) -> Result<Vec<ObservationRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let m = headers.iter().filter(|h| h.starts_with('y')).count();
    let has_flags = headers.iter().any(|h| h.starts_with("outlier"));
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        let step = parse_usize(&record[0])?;
        let t = parse_f64(&record[1])?;
        let ys: Result<Vec<f64>> =
            (0..m).map(|i| parse_f64(&record[2 + i])).collect();
        let outliers = if has_flags {
            Some((0..m).map(|i| &record[2 + m + i] == "1").collect())
        } else {
            None
        };
        out.push(ObservationRow { step, t, y: DVector::from_vec(ys?), outliers });
    }
    Ok(out)
}

// --- per-step statistics -----------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct StatisticsRow {
    pub run: usize,
    pub step: usize,
    pub t: f64,
    pub log_l: f64,
    pub posterior: f64,
    pub cusum: f64,
    pub n_chains: usize,
    pub argmax_k: Option<usize>,
}

pub fn write_statistics_csv(path: &Path, dt: f64, records: &[DetectionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["run", "step", "t", "logL", "p", "T", "n_chains", "argmax_k"])?;
    for (run, record) in records.iter().enumerate() {
        for s in &record.steps {
            w.write_record(&[
                run.to_string(),
                s.step.to_string(),
                fmt(s.step as f64 * dt),
                fmt(s.log_shiryaev),
                fmt(s.posterior),
                fmt(s.cusum),
                s.n_chains.to_string(),
                s.argmax_change.map_or(String::new(), |k| k.to_string()),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_statistics_csv(path: &Path) -> Result<Vec<StatisticsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        out.push(StatisticsRow {
            run: parse_usize(&record[0])?,
            step: parse_usize(&record[1])?,
            t: parse_f64(&record[2])?,
            log_l: parse_f64(&record[3])?,
            posterior: parse_f64(&record[4])?,
            cusum: parse_f64(&record[5])?,
            n_chains: parse_usize(&record[6])?,
            argmax_k: if record[7].is_empty() { None } else { Some(parse_usize(&record[7])?) },
        });
    }
    Ok(out)
}

// --- quantile bands ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BandRow {
    pub step: usize,
    pub t: f64,
    pub statistic: String,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.len() == 1 {
        return sorted[0];
    }
    let idx = q * (sorted.len() - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = idx.ceil() as usize;
    let frac = idx - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Per-step min/quartile/median/max across runs for logL, p and T.
pub fn compute_bands(records: &[DetectionRecord], dt: f64) -> Vec<BandRow> {
    let horizon = records.iter().map(|r| r.steps.len()).max().unwrap_or(0);
    let mut rows = Vec::new();
    for step_idx in 0..horizon {
        let stats_at: Vec<&crate::change_stats::StepStats> =
            records.iter().filter_map(|r| r.steps.get(step_idx)).collect();
        if stats_at.is_empty() {
            continue;
        }
        let step = stats_at[0].step;
        for (name, extract) in [
            ("logL", &(|s: &crate::change_stats::StepStats| s.log_shiryaev)
                as &dyn Fn(&crate::change_stats::StepStats) -> f64),
            ("p", &|s| s.posterior),
            ("T", &|s| s.cusum),
        ] {
            let mut values: Vec<f64> = stats_at.iter().map(|s| extract(s)).collect();
            values.sort_by(f64::total_cmp);
            rows.push(BandRow {
                step,
                t: step as f64 * dt,
                statistic: name.to_string(),
                min: values[0],
                q25: quantile(&values, 0.25),
                median: quantile(&values, 0.5),
                q75: quantile(&values, 0.75),
                max: *values.last().unwrap(),
            });
        }
    }
    rows
}

pub fn write_bands_csv(path: &Path, rows: &[BandRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "t", "statistic", "min", "q25", "median", "q75", "max"])?;
    for r in rows {
        w.write_record(&[
            r.step.to_string(),
            fmt(r.t),
            r.statistic.clone(),
            fmt(r.min),
            fmt(r.q25),
            fmt(r.median),
            fmt(r.q75),
            fmt(r.max),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bands_csv(path: &Path) -> Result<Vec<BandRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        out.push(BandRow {
            step: parse_usize(&record[0])?,
            t: parse_f64(&record[1])?,
            statistic: record[2].to_string(),
            min: parse_f64(&record[3])?,
            q25: parse_f64(&record[4])?,
            median: parse_f64(&record[5])?,
            q75: parse_f64(&record[6])?,
            max: parse_f64(&record[7])?,
        });
    }
    Ok(out)
}

// --- stopping times ----------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct StoppingRow {
    pub run: usize,
    pub true_change: Option<usize>,
    pub tau_shiryaev: Option<usize>,
    pub tau_cusum: Option<usize>,
}

pub fn write_stopping_csv(path: &Path, dt: f64, records: &[DetectionRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["run", "nu", "tau_s", "t_s", "tau_c", "t_c"])?;
    let opt = |v: Option<usize>| v.map_or(String::new(), |k| k.to_string());
    let opt_t = |v: Option<usize>| v.map_or(String::new(), |k| fmt(k as f64 * dt));
    for (run, r) in records.iter().enumerate() {
        w.write_record(&[
            run.to_string(),
            opt(r.true_change),
            opt(r.tau_shiryaev),
            opt_t(r.tau_shiryaev),
            opt(r.tau_cusum),
            opt_t(r.tau_cusum),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_stopping_csv(path: &Path) -> Result<Vec<StoppingRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let opt = |s: &str| -> Result<Option<usize>> {
        if s.is_empty() { Ok(None) } else { Ok(Some(parse_usize(s)?)) }
    };
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        out.push(StoppingRow {
            run: parse_usize(&record[0])?,
            true_change: opt(&record[1])?,
            tau_shiryaev: opt(&record[2])?,
            tau_cusum: opt(&record[4])?,
        });
    }
    Ok(out)
}

// --- json --------------------------------------------------------------------

pub fn write_metrics_json(path: &Path, metrics: &MetricsReport) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(metrics)?)?;
    Ok(())
}

pub fn read_metrics_json(path: &Path) -> Result<MetricsReport> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
