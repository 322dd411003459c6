//! Configuration matrix comparing estimator variants on one truth log.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};

use super::artifacts::Timing;
use super::metrics::{rmse_vb, rmse_z, timing_stats};
use super::HarnessError;
use crate::ecm::ThetaSelection;
use crate::mhe::{self, Estimator, InitialGuess, MheConfig, RunRecord};
use crate::parallel::{self, ParallelConfig};
use crate::plant::TruthLog;
use crate::window::{FilterSpec, Schedule};

/// Environment variable capping benchmark worker threads.
pub const THREADS_ENV: &str = "MHE_SOC_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    PaperTables,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CaseKind {
    Single(MheConfig),
    /// Produces two rows, fast then slow.
    Parallel(ParallelConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkCase {
    pub label: String,
    pub kind: CaseKind,
}

fn single(label: &str, schedule: Schedule) -> BenchmarkCase {
    BenchmarkCase {
        label: label.into(),
        kind: CaseKind::Single(MheConfig::new(schedule, ThetaSelection::Order0To3Full)),
    }
}

fn derivative_and_integrator() -> Vec<FilterSpec> {
    vec![FilterSpec::dirty_derivative(), FilterSpec::pseudo_integrator()]
}

/// Standard `N=30` at `n_ts` 1 and 20, multi-rate, filtered `N=20` and
/// `N=10`, and the fast/slow pair; all estimating the full coefficient set
/// except the state-only fast estimator.
pub fn paper_cases() -> Vec<BenchmarkCase> {
    vec![
        single("standard n_ts=1", Schedule::uniform(30, 1)),
        single("standard n_ts=20", Schedule::uniform(30, 20)),
        single("multi-rate", Schedule::paper_multi_rate()),
        single("filtered N=20", Schedule::filtered(20, 20, derivative_and_integrator())),
        single("filtered N=10", Schedule::filtered(10, 20, derivative_and_integrator())),
        BenchmarkCase { label: "parallel".into(), kind: CaseKind::Parallel(ParallelConfig::default()) },
    ]
}

pub fn cases(suite: Suite) -> Vec<BenchmarkCase> {
    match suite {
        Suite::PaperTables => paper_cases(),
    }
}

/// Estimator logs for one case, with row labels.
pub fn run_case(truth: &TruthLog, case: &BenchmarkCase, guess: &InitialGuess) -> Result<Vec<CaseRun>, HarnessError> {
    match &case.kind {
        CaseKind::Single(cfg) => {
            let est = Estimator::new(cfg.clone(), guess.clone())?;
            let rec = mhe::run(truth, est, &case.label)?;
            Ok(vec![CaseRun { schedule: cfg.schedule.clone(), theta: cfg.theta_selection, record: rec }])
        }
        CaseKind::Parallel(cfg) => {
            let mut r = parallel::run(truth, cfg, guess)?;
            r.fast.label = format!("{} fast", case.label);
            r.slow.label = format!("{} slow", case.label);
            Ok(vec![
                CaseRun { schedule: cfg.fast.schedule.clone(), theta: cfg.fast.theta_selection, record: r.fast },
                CaseRun { schedule: cfg.slow.schedule.clone(), theta: cfg.slow.theta_selection, record: r.slow },
            ])
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseRun {
    pub schedule: Schedule,
    pub theta: ThetaSelection,
    pub record: RunRecord,
}

/// Runs every case. With `timing` the cases run one after another in
/// order; otherwise up to `threads` at once. Output order is the case order
/// either way.
pub fn run_cases(
    truth: &TruthLog,
    cases: &[BenchmarkCase],
    guess: &InitialGuess,
    timing: bool,
    threads: usize,
) -> Result<Vec<CaseRun>, HarnessError> {
    let workers = if timing { 1 } else { threads.clamp(1, cases.len().max(1)) };
    let results: Mutex<Vec<Option<Result<Vec<CaseRun>, HarnessError>>>> =
        Mutex::new((0..cases.len()).map(|_| None).collect());
    if workers == 1 {
        for (i, c) in cases.iter().enumerate() {
            let r = run_case(truth, c, guess);
            results.lock().expect("results lock")[i] = Some(r);
        }
    } else {
        let next = AtomicUsize::new(0);
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(c) = cases.get(i) else { break };
                    let r = run_case(truth, c, guess);
                    results.lock().expect("results lock")[i] = Some(r);
                });
            }
        });
    }
    let mut out = Vec::new();
    for r in results.into_inner().expect("results lock") {
        out.extend(r.expect("every case ran")?);
    }
    Ok(out)
}

/// Worker count from `MHE_SOC_THREADS`, else the machine's parallelism.
pub fn thread_cap() -> usize {
    let avail = thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()).filter(|n| *n > 0).unwrap_or(avail)
}

/// One row of the comparison table. Timing columns are empty unless timing
/// was requested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub label: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub schedule: String,
    pub theta_arity: usize,
    pub fill_time: Option<f64>,
    pub optimized_steps: usize,
    pub mean_wall_time_s: Option<f64>,
    pub median_wall_time_s: Option<f64>,
    pub max_wall_time_s: Option<f64>,
    pub rmse_z: Option<f64>,
    pub rmse_vb: Option<f64>,
    pub barrier_events: usize,
}

impl BenchmarkRow {
    pub fn new(run: &CaseRun, from_t: f64, timing: bool) -> Self {
        let rec = &run.record;
        let t: Option<Timing> = if timing { timing_stats(&rec.step_times()).map(Timing::from) } else { None };
        Self {
            label: rec.label.clone(),
            n: run.schedule.len(),
            schedule: run.schedule.summary(),
            theta_arity: run.theta.arity(),
            fill_time: rec.fill_time,
            optimized_steps: rec.optimized_steps(),
            mean_wall_time_s: t.as_ref().map(|t| t.mean_s),
            median_wall_time_s: t.as_ref().map(|t| t.median_s),
            max_wall_time_s: t.as_ref().map(|t| t.max_s),
            rmse_z: rmse_z(rec, from_t).ok(),
            rmse_vb: rmse_vb(rec, from_t).ok(),
            barrier_events: rec.barrier_events(),
        }
    }
}

/// Common RMSE start: the latest fill time of all rows, so every row is
/// scored over the same interval.
pub fn common_from_t(runs: &[CaseRun]) -> Option<f64> {
    runs.iter().map(|r| r.record.fill_time).try_fold(f64::NEG_INFINITY, |acc, f| f.map(|f| acc.max(f)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineProfile {
    pub os: String,
    pub arch: String,
    pub available_parallelism: usize,
    pub cpu_model: Option<String>,
    pub build_profile: String,
}

impl MachineProfile {
    pub fn detect() -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        });
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            available_parallelism: thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            cpu_model,
            build_profile: if cfg!(debug_assertions) { "debug" } else { "release" }.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub suite: Suite,
    pub config_sha256: String,
    pub truth_sha256: String,
    pub seed: u64,
    pub noise_std: f64,
    pub noise_generator: String,
    pub timing: bool,
    /// Recorded only with timing, so untimed reports stay machine independent.
    pub machine: Option<MachineProfile>,
    pub rmse_from_t: Option<f64>,
    pub rows: Vec<BenchmarkRow>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecm::{EcmParameters, PlantState};
    use crate::mhe::perturb_parameters;
    use crate::plant::simulate;
    use crate::profiles::{HppcProfile, NoiseSpec};

    #[test]
    fn paper_suite_rows() {
        let cases = paper_cases();
        assert_eq!(cases.len(), 6);
        let p = EcmParameters::reference();
        let log = simulate(&p, &HppcProfile::modified(p.one_c_current()), &NoiseSpec::default(), 0.9, 60.0).unwrap();
        let g = InitialGuess { xi: PlantState::new(0.85, 0.0), params: perturb_parameters(&p, 0.2, -0.2) };
        let runs = run_cases(&log, &cases, &g, false, 4).unwrap();
        let labels: Vec<&str> = runs.iter().map(|r| r.record.label.as_str()).collect();
        assert_eq!(
            labels,
            [
                "standard n_ts=1",
                "standard n_ts=20",
                "multi-rate",
                "filtered N=20",
                "filtered N=10",
                "parallel fast",
                "parallel slow"
            ]
        );
        let arity: Vec<usize> = runs.iter().map(|r| r.theta.arity()).collect();
        assert_eq!(arity, [12, 12, 12, 12, 12, 0, 12]);
    }

    #[test]
    fn threaded_and_serial_agree() {
        let p = EcmParameters::reference();
        let log = simulate(&p, &HppcProfile::modified(p.one_c_current()), &NoiseSpec::default(), 0.9, 120.0).unwrap();
        let g = InitialGuess { xi: PlantState::new(0.85, 0.0), params: perturb_parameters(&p, 0.2, -0.2) };
        let cases = vec![single("a", Schedule::uniform(10, 1)), single("b", Schedule::uniform(5, 3))];
        let strip = |v: Vec<CaseRun>| -> Vec<Vec<(f64, Option<f64>)>> {
            v.iter().map(|r| r.record.rows.iter().map(|x| (x.outcome.xi_now.z, x.outcome.cost)).collect()).collect()
        };
        let a = strip(run_cases(&log, &cases, &g, true, 8).unwrap());
        let b = strip(run_cases(&log, &cases, &g, false, 8).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn common_start_is_latest_fill() {
        let mk = |f: Option<f64>| CaseRun {
            schedule: Schedule::uniform(2, 1),
            theta: ThetaSelection::Frozen,
            record: RunRecord { label: String::new(), theta_names: vec![], fill_time: f, rows: vec![] },
        };
        assert_eq!(common_from_t(&[mk(Some(3.0)), mk(Some(9.0))]), Some(9.0));
        assert_eq!(common_from_t(&[mk(Some(3.0)), mk(None)]), None);
    }
}
