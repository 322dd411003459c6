//! Two cooperating estimators: a slow one that tracks the parameters and a
//! fast state-only one that receives them at fixed logical-time boundaries.

use std::sync::mpsc;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::ecm::{EcmParameters, ThetaSelection};
use crate::mhe::{Estimator, InitialGuess, MheConfig, MheError, RunRecord};
use crate::plant::TruthLog;
use crate::window::Schedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    #[default]
    Sequential,
    /// One worker per estimator; parameters travel as messages tagged with
    /// the sample index they apply from.
    Threaded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelConfig {
    pub slow: MheConfig,
    pub fast: MheConfig,
    pub handoff_period_s: f64,
    #[serde(default)]
    pub execution: ExecutionMode,
}

impl Default for ParallelConfig {
    fn default() -> Self {
        Self {
            slow: MheConfig::new(Schedule::paper_multi_rate(), ThetaSelection::Order0To3Full),
            fast: MheConfig::new(Schedule::uniform(30, 2), ThetaSelection::Frozen),
            handoff_period_s: 20.0,
            execution: ExecutionMode::Sequential,
        }
    }
}

impl ParallelConfig {
    pub fn validate(&self, ts: f64) -> Result<(), MheError> {
        if self.fast.theta_selection != ThetaSelection::Frozen {
            return Err(MheError::InvalidConfig("fast estimator must use theta=frozen".into()));
        }
        let steps = self.handoff_period_s / ts;
        if !(steps >= 1.0) || (steps - steps.round()).abs() > 1e-9 {
            return Err(MheError::InvalidConfig(format!(
                "handoff_period_s={} must be a positive multiple of Ts={ts}",
                self.handoff_period_s
            )));
        }
        self.slow.validate()?;
        self.fast.validate()
    }

    fn handoff_steps(&self, ts: f64) -> usize {
        (self.handoff_period_s / ts).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelRecord {
    pub fast: RunRecord,
    pub slow: RunRecord,
    /// Times at which the fast estimator received new parameters.
    pub handoff_times: Vec<f64>,
}

/// Runs both estimators over the same stream. The slow estimator finishes a
/// sample before the fast one starts it; at every handoff boundary whose
/// slow window is full, the fast estimator's parameters are replaced before
/// its step for that sample.
pub fn run(truth: &TruthLog, cfg: &ParallelConfig, guess: &InitialGuess) -> Result<ParallelRecord, MheError> {
    let ts = guess.params.ts;
    cfg.validate(ts)?;
    let slow = Estimator::new(cfg.slow.clone(), guess.clone())?;
    let fast = Estimator::new(cfg.fast.clone(), guess.clone())?;
    let every = cfg.handoff_steps(ts);
    match cfg.execution {
        ExecutionMode::Sequential => run_sequential(truth, slow, fast, every),
        ExecutionMode::Threaded => run_threaded(truth, slow, fast, every),
    }
}

fn run_sequential(
    truth: &TruthLog,
    mut slow: Estimator,
    mut fast: Estimator,
    every: usize,
) -> Result<ParallelRecord, MheError> {
    let mut slow_rec = RunRecord::new("parallel-slow", slow.theta_names());
    let mut fast_rec = RunRecord::new("parallel-fast", fast.theta_names());
    let mut handoff_times = Vec::new();
    for (k, r) in truth.records.iter().enumerate() {
        let o = slow.step(r.t, r.vb_noisy, r.current)?;
        slow_rec.push(r.z, r.vb_clean, o);
        if k % every == 0 && slow.is_full() {
            fast.set_parameters(slow.params());
            handoff_times.push(r.t);
        }
        let o = fast.step(r.t, r.vb_noisy, r.current)?;
        fast_rec.push(r.z, r.vb_clean, o);
    }
    Ok(ParallelRecord { fast: fast_rec, slow: slow_rec, handoff_times })
}

fn run_threaded(
    truth: &TruthLog,
    mut slow: Estimator,
    mut fast: Estimator,
    every: usize,
) -> Result<ParallelRecord, MheError> {
    // One message per boundary index, carrying a snapshot or nothing when
    // the slow window is not full yet.
    let (tx, rx) = mpsc::channel::<(usize, Option<EcmParameters>)>();
    thread::scope(|scope| {
        let worker = scope.spawn(move || -> Result<RunRecord, MheError> {
            let mut rec = RunRecord::new("parallel-slow", slow.theta_names());
            for (k, r) in truth.records.iter().enumerate() {
                let o = slow.step(r.t, r.vb_noisy, r.current)?;
                rec.push(r.z, r.vb_clean, o);
                if k % every == 0 {
                    let snapshot = slow.is_full().then(|| slow.params().clone());
                    if tx.send((k, snapshot)).is_err() {
                        break;
                    }
                }
            }
            Ok(rec)
        });

        let mut fast_rec = RunRecord::new("parallel-fast", fast.theta_names());
        let mut handoff_times = Vec::new();
        let mut fast_result = Ok(());
        for (k, r) in truth.records.iter().enumerate() {
            if k % every == 0 {
                match rx.recv() {
                    Ok((idx, snapshot)) => {
                        debug_assert_eq!(idx, k);
                        if let Some(p) = snapshot {
                            fast.set_parameters(&p);
                            handoff_times.push(r.t);
                        }
                    }
                    // The slow worker stopped early; its error is reported below.
                    Err(_) => break,
                }
            }
            match fast.step(r.t, r.vb_noisy, r.current) {
                Ok(o) => fast_rec.push(r.z, r.vb_clean, o),
                Err(e) => {
                    fast_result = Err(e);
                    break;
                }
            }
        }
        drop(rx);
        let slow_rec = worker.join().expect("slow estimator worker panicked")?;
        fast_result?;
        Ok(ParallelRecord { fast: fast_rec, slow: slow_rec, handoff_times })
    })
}
