//! CSV and JSON artifacts written by the subcommands.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::sha256_hex;
use super::metrics::{rmse_vb, rmse_z, timing_stats, TimingStats};
use super::HarnessError;
use crate::mhe::RunRecord;
use crate::plant::{TruthLog, TruthMetadata};

pub const ESTIMATE_HEADER: [&str; 9] =
    ["t", "Z_true", "Z_hat", "V1_hat", "Vb_true", "Vb_hat", "cost", "barrier_active", "wall_time_s"];

fn out_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Output { path: path.display().to_string(), message: e.to_string() }
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| out_err(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| out_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| out_err(path, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// Reads a truth log, reporting a missing file separately from a bad one.
pub fn read_truth(path: &Path) -> Result<(TruthLog, String), HarnessError> {
    let bytes = fs::read(path).map_err(|e| HarnessError::MissingInput(format!("{}: {e}", path.display())))?;
    let log =
        TruthLog::read_csv(bytes.as_slice()).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    if log.is_empty() {
        return Err(HarnessError::Config(format!("{}: truth log has no samples", path.display())));
    }
    Ok((log, sha256_hex(&bytes)))
}

/// Sidecar metadata next to a truth CSV (`truth.csv` -> `truth.json`), if present.
pub fn read_truth_metadata(csv_path: &Path) -> Option<TruthMetadata> {
    let text = fs::read_to_string(csv_path.with_extension("json")).ok()?;
    serde_json::from_str(&text).ok()
}

pub fn truth_csv_bytes(log: &TruthLog) -> Result<Vec<u8>, HarnessError> {
    let mut buf = Vec::new();
    log.write_csv(&mut buf).map_err(|e| HarnessError::Numerical(e.to_string()))?;
    Ok(buf)
}

fn num(x: f64) -> String {
    x.to_string()
}

/// Per-step estimator log. Wall times are left blank unless `emit_timing`.
pub fn estimate_csv_bytes(rec: &RunRecord, emit_timing: bool) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ESTIMATE_HEADER.iter().map(|s| s.to_string()).collect();
    header.extend(rec.theta_names.iter().cloned());
    let csv_err = |e: csv::Error| HarnessError::Numerical(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for r in &rec.rows {
        let o = &r.outcome;
        let mut row = vec![
            num(r.t),
            num(r.z_true),
            num(o.xi_now.z),
            num(o.xi_now.v1),
            num(r.vb_true),
            num(o.vb_hat),
            o.cost.map(num).unwrap_or_default(),
            u8::from(o.barrier_active).to_string(),
            if emit_timing { num(o.wall_time_s) } else { String::new() },
        ];
        row.extend(o.theta.as_slice().iter().map(|v| num(*v)));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| HarnessError::Numerical(e.to_string()))
}

/// Writes any serializable rows as CSV with a header.
pub fn rows_csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::Numerical(e.to_string()))?;
    }
    w.into_inner().map_err(|e| HarnessError::Numerical(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub steps: usize,
    pub mean_s: f64,
    pub median_s: f64,
    pub max_s: f64,
}

impl From<TimingStats> for Timing {
    fn from(s: TimingStats) -> Self {
        Self { steps: s.steps, mean_s: s.mean, median_s: s.median, max_s: s.max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
}

/// Scalar summary of one estimator run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub samples: usize,
    pub fill_time: Option<f64>,
    /// Start of the RMSE interval.
    pub rmse_from_t: Option<f64>,
    pub rmse_z: Option<f64>,
    pub rmse_vb: Option<f64>,
    pub optimized_steps: usize,
    pub barrier_events: usize,
    pub accepted_barrier_steps: usize,
    pub unsafe_acceptances: usize,
    pub final_theta: Vec<NamedValue>,
    /// Present only when timing output is enabled.
    pub wall_time: Option<Timing>,
}

impl RunSummary {
    /// RMSE over `from_t` onward, defaulting to the run's own fill time.
    pub fn new(rec: &RunRecord, from_t: Option<f64>, emit_timing: bool) -> Self {
        let from_t = from_t.or(rec.fill_time);
        let (rz, rv) = match from_t {
            Some(t) => (rmse_z(rec, t).ok(), rmse_vb(rec, t).ok()),
            None => (None, None),
        };
        let final_theta = rec
            .rows
            .last()
            .map(|r| {
                rec.theta_names
                    .iter()
                    .zip(r.outcome.theta.as_slice())
                    .map(|(n, v)| NamedValue { name: n.clone(), value: *v })
                    .collect()
            })
            .unwrap_or_default();
        Self {
            label: rec.label.clone(),
            samples: rec.rows.len(),
            fill_time: rec.fill_time,
            rmse_from_t: from_t,
            rmse_z: rz,
            rmse_vb: rv,
            optimized_steps: rec.optimized_steps(),
            barrier_events: rec.barrier_events(),
            accepted_barrier_steps: rec.accepted_barrier_steps(),
            unsafe_acceptances: rec.unsafe_acceptances(),
            final_theta,
            wall_time: if emit_timing { timing_stats(&rec.step_times()).map(Timing::from) } else { None },
        }
    }
}

/// Where the measurements came from: config hash plus the noise generator
/// and seed of the truth log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_sha256: String,
    pub truth_sha256: String,
    pub truth: Option<TruthMetadata>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub provenance: Provenance,
    pub mode: String,
    pub schedule: String,
    pub theta_arity: usize,
    pub run: RunSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParallelSummary {
    pub provenance: Provenance,
    pub handoff_period_s: f64,
    pub handoffs: usize,
    pub first_handoff_t: Option<f64>,
    pub fast_schedule: String,
    pub slow_schedule: String,
    pub fast: RunSummary,
    pub slow: RunSummary,
}
