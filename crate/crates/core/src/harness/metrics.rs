use thiserror::Error;

use crate::mhe::RunRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no samples at or after t={from_t}")]
    EmptyRange { from_t: f64 },
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Root-mean-square of `estimates - truth` over samples with `t >= from_t`.
pub fn rmse(times: &[f64], estimates: &[f64], truth: &[f64], from_t: f64) -> Result<f64, MetricError> {
    if estimates.len() != truth.len() || times.len() != truth.len() {
        return Err(MetricError::LengthMismatch(estimates.len(), truth.len()));
    }
    let (sum, n) = times
        .iter()
        .zip(estimates.iter().zip(truth))
        .filter(|(t, _)| **t >= from_t)
        .fold((0.0, 0usize), |(s, n), (_, (e, x))| (s + (e - x).powi(2), n + 1));
    if n == 0 {
        return Err(MetricError::EmptyRange { from_t });
    }
    Ok((sum / n as f64).sqrt())
}

pub fn rmse_z(rec: &RunRecord, from_t: f64) -> Result<f64, MetricError> {
    let t: Vec<f64> = rec.rows.iter().map(|r| r.t).collect();
    let e: Vec<f64> = rec.rows.iter().map(|r| r.outcome.xi_now.z).collect();
    let x: Vec<f64> = rec.rows.iter().map(|r| r.z_true).collect();
    rmse(&t, &e, &x, from_t)
}

pub fn rmse_vb(rec: &RunRecord, from_t: f64) -> Result<f64, MetricError> {
    let t: Vec<f64> = rec.rows.iter().map(|r| r.t).collect();
    let e: Vec<f64> = rec.rows.iter().map(|r| r.outcome.vb_hat).collect();
    let x: Vec<f64> = rec.rows.iter().map(|r| r.vb_true).collect();
    rmse(&t, &e, &x, from_t)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingStats {
    pub steps: usize,
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

pub fn timing_stats(samples: &[f64]) -> Option<TimingStats> {
    if samples.is_empty() {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    Some(TimingStats { steps: n, mean: samples.iter().sum::<f64>() / n as f64, median, max: sorted[n - 1] })
}

pub fn median(values: &[f64]) -> Option<f64> {
    timing_stats(values).map(|s| s.median)
}
