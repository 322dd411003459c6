//! Ground-truth simulator producing the replayable measurement log.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ecm::{self, EcmError, EcmParameters, PlantState};
use crate::profiles::{noise_stream, HppcProfile, NoiseSpec};

pub const TRUTH_HEADER: [&str; 6] = ["t", "I", "Z", "V1", "Vb_clean", "Vb_noisy"];

#[derive(Debug, Error)]
pub enum PlantError {
    #[error(transparent)]
    Ecm(#[from] EcmError),
    #[error("invalid simulation request: {0}")]
    InvalidRequest(String),
    #[error("truth log csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("truth log csv: bad header {0:?}")]
    BadHeader(Vec<String>),
    #[error("truth log csv line {line}: {message}")]
    BadRecord { line: u64, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthRecord {
    pub t: f64,
    pub current: f64,
    pub z: f64,
    pub v1: f64,
    pub vb_clean: f64,
    pub vb_noisy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TruthLog {
    pub records: Vec<TruthRecord>,
    /// Number of steps where SOC had to be clamped into [0, 1].
    pub clamp_events: usize,
    /// Set when the run stopped early because SOC reached a bound.
    pub hit_soc_bound: bool,
}

impl TruthLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), PlantError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRUTH_HEADER)?;
        for r in &self.records {
            w.write_record([
                r.t.to_string(),
                r.current.to_string(),
                r.z.to_string(),
                r.v1.to_string(),
                r.vb_clean.to_string(),
                r.vb_noisy.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads a log written by [`TruthLog::write_csv`]. Values round-trip
    /// exactly because floats are written in shortest round-trip form.
    pub fn read_csv<R: Read>(input: R) -> Result<Self, PlantError> {
        let mut rd = csv::Reader::from_reader(input);
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header != TRUTH_HEADER {
            return Err(PlantError::BadHeader(header));
        }
        let mut records = Vec::new();
        for row in rd.records() {
            let row = row?;
            let line = row.position().map(|p| p.line()).unwrap_or(0);
            let mut vals = [0.0; 6];
            for (i, v) in vals.iter_mut().enumerate() {
                *v = row
                    .get(i)
                    .ok_or_else(|| PlantError::BadRecord { line, message: "missing field".into() })?
                    .parse()
                    .map_err(|e| PlantError::BadRecord { line, message: format!("{e}") })?;
            }
            if let Some(prev) = records.last().map(|r: &TruthRecord| r.t) {
                if vals[0] <= prev {
                    return Err(PlantError::BadRecord { line, message: "timestamps must increase".into() });
                }
            }
            records.push(TruthRecord {
                t: vals[0],
                current: vals[1],
                z: vals[2],
                v1: vals[3],
                vb_clean: vals[4],
                vb_noisy: vals[5],
            });
        }
        Ok(Self { records, clamp_events: 0, hit_soc_bound: false })
    }
}

/// Rolls the ECM forward at period `Ts` from `(z0, V1=0)` and logs one record
/// per sample for `t = 0, Ts, ..., horizon_s`.
///
/// The current is held over each interval (ZOH), sampled at the start.
pub fn simulate(
    params: &EcmParameters,
    profile: &HppcProfile,
    noise: &NoiseSpec,
    z0: f64,
    horizon_s: f64,
) -> Result<TruthLog, PlantError> {
    params.validate()?;
    if !(0.0..=1.0).contains(&z0) {
        return Err(PlantError::InvalidRequest(format!("z0={z0} outside [0, 1]")));
    }
    if !(horizon_s >= params.ts) {
        return Err(PlantError::InvalidRequest(format!("horizon_s={horizon_s} < Ts")));
    }
    if !(noise.std_dev >= 0.0) {
        return Err(PlantError::InvalidRequest("noise std_dev must be >= 0".into()));
    }
    let n = (horizon_s / params.ts + 1e-9).floor() as usize + 1;
    let noise = noise_stream(noise, n);
    let mut log = TruthLog { records: Vec::with_capacity(n), ..Default::default() };
    let mut state = PlantState::new(z0, 0.0);
    for (k, &e) in noise.iter().enumerate() {
        let t = k as f64 * params.ts;
        let current = profile.current_at(t);
        let vb_clean = ecm::output(params, state, current);
        log.records.push(TruthRecord { t, current, z: state.z, v1: state.v1, vb_clean, vb_noisy: vb_clean + e });
        if k + 1 == n {
            break;
        }
        let mut next = ecm::step(params, state, current)?;
        if !(0.0..=1.0).contains(&next.z) {
            next.z = next.z.clamp(0.0, 1.0);
            log.clamp_events += 1;
            log.hit_soc_bound = true;
            // Log the clamped sample, then stop.
            let t = (k + 1) as f64 * params.ts;
            let current = profile.current_at(t);
            let vb_clean = ecm::output(params, next, current);
            log.records.push(TruthRecord {
                t,
                current,
                z: next.z,
                v1: next.v1,
                vb_clean,
                vb_noisy: vb_clean + noise[k + 1],
            });
            break;
        }
        state = next;
    }
    Ok(log)
}

/// JSON sidecar written next to a truth log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TruthMetadata {
    pub seed: u64,
    pub noise_std: f64,
    pub noise_generator: String,
    pub params_sha256: String,
    pub config_sha256: String,
    pub z0: f64,
    pub horizon_s: f64,
    pub samples: usize,
    pub clamp_events: usize,
    pub hit_soc_bound: bool,
}
