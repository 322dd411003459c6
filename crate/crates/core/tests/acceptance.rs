//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//! Exits non-zero on a failure only when `ACCEPTANCE_STRICT=1`, so the
//! report can run inside the regular test suite.

// `!(x >= y)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use mhe_soc::ecm::{pack_theta, unpack_theta, EcmParameters, PlantState, ThetaSelection};
use mhe_soc::harness::benchmark::{paper_cases, run_cases, CaseRun};
use mhe_soc::harness::cli;
use mhe_soc::harness::metrics::{median, rmse_z, timing_stats};
use mhe_soc::mhe::{self, perturb_parameters, Estimator, InitialGuess, MheConfig, ProbeGrid, RunRecord, MIN_BARRIER};
use mhe_soc::optim::{minimize, SimplexOptions};
use mhe_soc::plant::{simulate, TruthLog};
use mhe_soc::profiles::{HppcProfile, NoiseSpec};
use mhe_soc::window::{phase_averaged_mean, variability_series, variability_start, Schedule};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const HORIZON_S: f64 = 8000.0;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TIMING_REPEATS: usize = 3;

type Outcome = (bool, String);

fn truth(std_dev: f64, seed: u64) -> (EcmParameters, TruthLog) {
    let p = EcmParameters::reference();
    let prof = HppcProfile::modified(p.one_c_current());
    let log = simulate(&p, &prof, &NoiseSpec { mean: 0.0, std_dev, seed }, 0.9, HORIZON_S).expect("simulate");
    (p, log)
}

fn default_guess(p: &EcmParameters) -> InitialGuess {
    InitialGuess { xi: PlantState::new(0.85, 0.0), params: perturb_parameters(p, 0.2, -0.2) }
}

fn full(schedule: Schedule) -> MheConfig {
    MheConfig::new(schedule, ThetaSelection::Order0To3Full)
}

fn run(log: &TruthLog, cfg: MheConfig, guess: &InitialGuess, label: &str) -> RunRecord {
    mhe::run(log, Estimator::new(cfg, guess.clone()).expect("estimator"), label).expect("run")
}

fn fill(r: &RunRecord) -> f64 {
    r.fill_time.expect("window filled")
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let (p, log) = truth(0.0, 0);
    let guess = InitialGuess { xi: PlantState::new(0.85, 0.0), params: p.clone() };
    let rec = run(&log, MheConfig::new(Schedule::uniform(30, 20), ThetaSelection::Frozen), &guess, "c1");
    let steps: Vec<_> = rec.rows.iter().filter(|r| r.outcome.optimized).collect();
    let hit = steps.iter().position(|r| (r.outcome.xi_now.z - r.z_true).abs() < 1e-3);
    let elapsed = start.elapsed().as_secs_f64();
    match hit {
        Some(i) => {
            let t = steps[i].t;
            let after = rmse_z(&rec, t).expect("rmse");
            let ok = i < 5 && after < 1e-3 && elapsed < 60.0;
            (
                ok,
                format!(
                    "|dZ|<1e-3 at estimation step {} (t={t} s), RMSE_Z after = {after:.2e}, runtime {elapsed:.1} s",
                    i + 1
                ),
            )
        }
        None => (false, "never within 1e-3".into()),
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let (_, log) = truth(0.0, 0);
    let y: Vec<f64> = log.records.iter().map(|r| r.vb_clean).collect();
    let factors = [1usize, 5, 10, 20];
    let s = variability_start(30, &factors);
    let phase: Vec<f64> = factors.iter().map(|&f| phase_averaged_mean(&y, 30, f, s).expect("variability")).collect();
    let origin0: Vec<f64> = factors
        .iter()
        .map(|&f| {
            let v = variability_series(&y, 30, f, 0, s).expect("variability");
            v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64
        })
        .collect();
    let gaps_ok = phase.windows(2).all(|w| w[1] >= 1.05 * w[0]);
    let elapsed = start.elapsed().as_secs_f64();
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" < ");
    (
        gaps_ok && elapsed < 10.0,
        format!(
            "phase-averaged mean delta_y n_ts=1,5,10,20: {} (single grid at index 0: {}), runtime {elapsed:.2} s",
            fmt(&phase),
            origin0.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn filled_estimator(cfg: MheConfig, p: &EcmParameters, log: &TruthLog) -> Estimator {
    let mut est = Estimator::new(cfg, default_guess(p)).expect("estimator");
    for r in &log.records {
        if est.is_full() {
            break;
        }
        est.step(r.t, r.vb_noisy, r.current).expect("step");
    }
    est
}

/// Random full-theta candidates around the truth with some sign flips.
fn candidate(rng: &mut ChaCha8Rng, base: &[f64]) -> Vec<f64> {
    let mut x = vec![rng.random_range(0.5..1.0), rng.random_range(-0.05..0.05)];
    x.extend(base.iter().map(|c| {
        let s = if rng.random_bool(0.3) { -1.0 } else { 1.0 };
        s * c * rng.random_range(0.0..3.0)
    }));
    x
}

fn criterion_3(c4_runs: &[RunRecord]) -> Outcome {
    let (p, log) = truth(0.05, 0);
    let base = pack_theta(&p, ThetaSelection::Order0To3Full).0;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let dense: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let min_r1 = |x: &[f64], grid: &[f64]| -> f64 {
        let q = unpack_theta(&p, &x[2..], ThetaSelection::Order0To3Full).expect("unpack");
        grid.iter().map(|&z| q.r1(z)).fold(f64::INFINITY, f64::min)
    };

    // Fixed grid: the premise is checkable directly.
    let mut cfg = full(Schedule::uniform(30, 20));
    cfg.probe_grid = ProbeGrid::Fixed(dense.clone());
    let est = filled_estimator(cfg, &p, &log);
    let (mut tested, mut violations, mut drawn) = (0, 0, 0);
    while tested < 1000 && drawn < 100_000 {
        drawn += 1;
        let x = candidate(&mut rng, &base);
        if min_r1(&x, &dense) >= 0.0 {
            continue;
        }
        tested += 1;
        if !(est.cost(&x).expect("cost").value >= MIN_BARRIER) {
            violations += 1;
        }
    }
    // Trajectory grid: candidates negative on all of [0, 1] are negative
    // wherever the trajectory goes.
    let est = filled_estimator(full(Schedule::uniform(30, 20)), &p, &log);
    let (mut tested_t, mut violations_t) = (0, 0);
    while tested_t < 1000 {
        let mut x = candidate(&mut rng, &base);
        if x[6] > 0.0 {
            x[6] = -x[6];
        }
        let q = unpack_theta(&p, &x[2..], ThetaSelection::Order0To3Full).expect("unpack");
        if dense.iter().any(|&z| q.r1(z) >= 0.0) {
            continue;
        }
        tested_t += 1;
        if !(est.cost(&x).expect("cost").value >= MIN_BARRIER) {
            violations_t += 1;
        }
    }
    // Without the parameter anchor the simplex probes the barrier often,
    // which exercises best-seen acceptance.
    let mut stress = full(Schedule::uniform(30, 1));
    stress.weights.theta = 0.0;
    let stressed = run(&log, stress, &default_guess(&p), "stress");
    let runs: Vec<&RunRecord> = c4_runs.iter().chain([&stressed]).collect();
    let unsafe_total: usize = runs.iter().map(|r| r.unsafe_acceptances()).sum();
    let accepted_barrier: usize = runs.iter().map(|r| r.accepted_barrier_steps()).sum();
    let events: usize = runs.iter().map(|r| r.barrier_events()).sum();
    (
        tested == 1000 && tested_t == 1000 && violations == 0 && violations_t == 0 && unsafe_total == 0,
        format!(
            "{tested} fixed-grid and {tested_t} trajectory-grid negative-R1 candidates, {} below 1e5; \
             {} noisy runs with {events} barrier/non-finite steps: {unsafe_total} unsafe acceptances, \
             {accepted_barrier} accepted barrier steps",
            violations + violations_t,
            runs.len()
        ),
    )
}

struct SeedRuns {
    n1: RunRecord,
    n20: RunRecord,
    mr: RunRecord,
}

fn seed_runs() -> Vec<SeedRuns> {
    SEEDS
        .iter()
        .map(|&seed| {
            let (p, log) = truth(0.05, seed);
            let g = default_guess(&p);
            SeedRuns {
                n1: run(&log, full(Schedule::uniform(30, 1)), &g, "n1"),
                n20: run(&log, full(Schedule::uniform(30, 20)), &g, "n20"),
                mr: run(&log, full(Schedule::paper_multi_rate()), &g, "mr"),
            }
        })
        .collect()
}

fn criterion_4(runs: &[SeedRuns]) -> Outcome {
    let mut r1 = Vec::new();
    let mut r20 = Vec::new();
    let mut events = Vec::new();
    for s in runs {
        let from = fill(&s.n1).max(fill(&s.n20));
        r1.push(rmse_z(&s.n1, from).expect("rmse"));
        r20.push(rmse_z(&s.n20, from).expect("rmse"));
        events.push(s.n1.barrier_events() as f64);
    }
    let (m1, m20, me) = (median(&r1).unwrap(), median(&r20).unwrap(), median(&events).unwrap());
    (
        m20 < m1 && me >= 1.0,
        format!(
            "median RMSE_Z n_ts=20 {m20:.5} vs n_ts=1 {m1:.5} (per seed {:?} vs {:?}); median n_ts=1 barrier/non-finite events {me}",
            r20.iter().map(|x| (x * 1e5).round() / 1e5).collect::<Vec<_>>(),
            r1.iter().map(|x| (x * 1e5).round() / 1e5).collect::<Vec<_>>()
        ),
    )
}

fn criterion_5(runs: &[SeedRuns]) -> Outcome {
    let mut ok = true;
    let mut detail = Vec::new();
    for (seed, s) in SEEDS.iter().zip(runs) {
        let from = fill(&s.mr).max(fill(&s.n20));
        let (a, b) = (rmse_z(&s.mr, from).expect("rmse"), rmse_z(&s.n20, from).expect("rmse"));
        ok &= a <= b;
        detail.push(format!("seed {seed}: {a:.5} vs {b:.5}"));
    }
    (ok, format!("RMSE_Z multi-rate vs standard n_ts=20: {}", detail.join("; ")))
}

/// Median over repeats of each row's mean optimize time, keyed by label.
struct Timed {
    mean: BTreeMap<String, f64>,
    runs: Vec<CaseRun>,
}

fn timed_benchmark() -> Timed {
    let (p, log) = truth(0.05, 0);
    let g = default_guess(&p);
    let cases = paper_cases();
    let mut per_label: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut last = Vec::new();
    for _ in 0..TIMING_REPEATS {
        let runs = run_cases(&log, &cases, &g, true, 1).expect("benchmark");
        for r in &runs {
            let m = timing_stats(&r.record.step_times()).expect("timed steps").mean;
            per_label.entry(r.record.label.clone()).or_default().push(m);
        }
        last = runs;
    }
    Timed { mean: per_label.into_iter().map(|(k, v)| (k, median(&v).unwrap())).collect(), runs: last }
}

impl Timed {
    fn t(&self, label: &str) -> f64 {
        self.mean[label]
    }

    fn rec(&self, label: &str) -> &RunRecord {
        &self.runs.iter().find(|r| r.record.label == label).expect("row").record
    }
}

fn criterion_6(t: &Timed) -> Outcome {
    let (n1, n20, mr) = (t.t("standard n_ts=1"), t.t("standard n_ts=20"), t.t("multi-rate"));
    let (a, b) = (n20 / n1, mr / n20);
    (
        a >= 5.0 && (0.7..=1.3).contains(&b),
        format!(
            "mean step: n_ts=1 {:.1} us, n_ts=20 {:.1} us, multi-rate {:.1} us; n_ts=20/n_ts=1 = {a:.1}, multi-rate/n_ts=20 = {b:.2}",
            n1 * 1e6,
            n20 * 1e6,
            mr * 1e6
        ),
    )
}

fn criterion_7(t: &Timed) -> Outcome {
    let (fast, slow) = (t.t("parallel fast"), t.t("parallel slow"));
    let (f, m) = (t.rec("parallel fast"), t.rec("multi-rate"));
    let from = fill(f).max(fill(t.rec("parallel slow"))).max(fill(m));
    let (rf, rm) = (rmse_z(f, from).expect("rmse"), rmse_z(m, from).expect("rmse"));
    (
        fast <= 0.2 * slow && rf <= 1.5 * rm,
        format!(
            "mean step fast {:.1} us vs slow {:.1} us (ratio {:.3}); RMSE_Z from t={from}: fast {rf:.5} vs multi-rate {rm:.5} (ratio {:.2})",
            fast * 1e6,
            slow * 1e6,
            fast / slow,
            rf / rm
        ),
    )
}

fn criterion_8(t: &Timed) -> Outcome {
    let (f10, n20) = (t.t("filtered N=10"), t.t("standard n_ts=20"));
    let (a, b) = (t.rec("filtered N=10"), t.rec("standard n_ts=20"));
    let from = fill(a).max(fill(b));
    let (ra, rb) = (rmse_z(a, from).expect("rmse"), rmse_z(b, from).expect("rmse"));
    (
        f10 <= 0.5 * n20 && ra <= 2.0 * rb,
        format!(
            "mean step filtered N=10 {:.1} us vs standard N=30 {:.1} us (ratio {:.2}); RMSE_Z from t={from}: {ra:.5} vs {rb:.5} (ratio {:.2})",
            f10 * 1e6,
            n20 * 1e6,
            f10 / n20,
            ra / rb
        ),
    )
}

fn criterion_9() -> Outcome {
    let one = minimize(|x: &[f64]| (x[0] - 1.7).powi(2), &[0.0], &SimplexOptions::with_iterations(200)).expect("1-D");
    let e1 = (one.x_best[0] - 1.7).abs();

    let c: Vec<f64> = (0..14).map(|i| 2.0 * (0.37 * i as f64).sin()).collect();
    let d: Vec<f64> = (0..14).map(|i| 1.0 + 0.5 * i as f64).collect();
    let q = |x: &[f64]| x.iter().zip(&c).zip(&d).map(|((x, c), d)| d * (x - c).powi(2)).sum::<f64>();
    // Non-zero starts: from the origin every initial edge is the tiny
    // absolute step and the simplex stalls.
    let e14 = [0.5, 1.0, -1.0, 3.0]
        .iter()
        .map(|&s| {
            let r = minimize(q, &[s; 14], &SimplexOptions::with_iterations(20_000)).expect("14-D");
            r.x_best.iter().zip(&c).map(|(x, c)| (x - c).abs()).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);

    // Best-seen value never increases with the budget and never exceeds f(x0).
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mono_ok = true;
    for _ in 0..50 {
        let dim = rng.random_range(1..6);
        let a: Vec<f64> = (0..dim).map(|_| rng.random_range(0.1..5.0)).collect();
        let w: Vec<f64> = (0..dim).map(|_| rng.random_range(0.5..4.0)).collect();
        let f = |x: &[f64]| x.iter().zip(&a).zip(&w).map(|((x, a), w)| a * x * x + (w * x).sin()).sum::<f64>();
        let x0: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut prev = f(&x0);
        for k in 1..40 {
            let r = minimize(f, &x0, &SimplexOptions::with_iterations(k)).expect("minimize");
            mono_ok &= r.f_best <= prev;
            prev = r.f_best;
        }
    }
    (
        e1 < 1e-6 && e14 < 1e-4 && mono_ok,
        format!("1-D error {e1:.1e}, 14-D max error {e14:.1e} over 4 starts (K=20000), best-seen monotone over 50 objectives: {mono_ok}"),
    )
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for entry in fs::read_dir(dir).expect("read_dir") {
        let path = entry.expect("entry").path();
        if path.is_dir() {
            collect_files(root, &path, out);
        } else {
            let rel = path.strip_prefix(root).unwrap().display().to_string();
            out.insert(rel, fs::read(&path).expect("read"));
        }
    }
}

fn cli_round(root: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let cfg = root.join("config.json");
    fs::write(&cfg, r#"{"plant": {"horizon_s": 1500, "noise": {"seed": 7}}}"#).unwrap();
    let c = cfg.to_str().unwrap().to_string();
    let at = |d: &str| root.join(d).to_str().unwrap().to_string();
    let truth = root.join("sim/truth.csv").to_str().unwrap().to_string();
    let commands: Vec<Vec<String>> = vec![
        vec!["simulate".into(), "--out-dir".into(), at("sim")],
        vec!["estimate".into(), "--truth".into(), truth.clone(), "--out-dir".into(), at("standard")],
        vec![
            "estimate".into(),
            "--truth".into(),
            truth.clone(),
            "--mode".into(),
            "multi_rate".into(),
            "--out-dir".into(),
            at("multi_rate"),
        ],
        vec![
            "estimate".into(),
            "--truth".into(),
            truth.clone(),
            "--mode".into(),
            "filtered".into(),
            "--out-dir".into(),
            at("filtered"),
        ],
        vec![
            "estimate".into(),
            "--truth".into(),
            truth.clone(),
            "--mode".into(),
            "parallel".into(),
            "--out-dir".into(),
            at("parallel"),
        ],
        vec![
            "variability".into(),
            "--truth".into(),
            truth,
            "--nts".into(),
            "1,5,10,20".into(),
            "--out-dir".into(),
            at("variability"),
        ],
        vec!["benchmark".into(), "--suite".into(), "paper-tables".into(), "--out-dir".into(), at("benchmark")],
    ];
    for mut args in commands {
        let name = args[0].clone();
        args.splice(1..1, ["--config".to_string(), c.clone()]);
        args.insert(0, "mhe-soc".into());
        let code = cli::run(&args);
        if code != 0 {
            return Err(format!("{name} exited with {code}"));
        }
    }
    let mut files = BTreeMap::new();
    collect_files(root, root, &mut files);
    Ok(files)
}

fn criterion_10() -> Outcome {
    let a = tempfile::tempdir().expect("tempdir");
    let b = tempfile::tempdir().expect("tempdir");
    let (fa, fb) = match (cli_round(a.path()), cli_round(b.path())) {
        (Ok(x), Ok(y)) => (x, y),
        (Err(e), _) | (_, Err(e)) => return (false, e),
    };
    let differing: Vec<&String> = fa.iter().filter(|(k, v)| fb.get(*k) != Some(v)).map(|(k, _)| k).collect();
    let same_set = fa.keys().eq(fb.keys());
    (
        same_set && differing.is_empty() && fa.len() > 10,
        format!("{} artifacts from 7 invocations compared across two runs, {} differ", fa.len(), differing.len()),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    }
}

fn main() {
    let started = Instant::now();
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut report = |id: u32, o: Outcome| {
        println!("criterion {id:>2}: {} {}", if o.0 { "PASS" } else { "FAIL" }, o.1);
        results.push((id, o));
    };
    report(1, guarded(criterion_1));
    report(2, guarded(criterion_2));

    let runs = panic::catch_unwind(seed_runs).ok();
    let c4: Vec<RunRecord> = runs.iter().flatten().flat_map(|s| [s.n1.clone(), s.n20.clone()]).collect();
    report(3, guarded(|| criterion_3(&c4)));
    match &runs {
        Some(r) => {
            report(4, guarded(|| criterion_4(r)));
            report(5, guarded(|| criterion_5(r)));
        }
        None => {
            report(4, (false, "seed runs failed".into()));
            report(5, (false, "seed runs failed".into()));
        }
    }

    match panic::catch_unwind(timed_benchmark) {
        Ok(t) => {
            report(6, guarded(|| criterion_6(&t)));
            report(7, guarded(|| criterion_7(&t)));
            report(8, guarded(|| criterion_8(&t)));
        }
        Err(_) => {
            for id in 6..=8 {
                report(id, (false, "timed benchmark failed".into()));
            }
        }
    }
    report(9, guarded(criterion_9));
    report(10, guarded(criterion_10));

    let failed: Vec<u32> = results.iter().filter(|(_, o)| !o.0).map(|(id, _)| *id).collect();
    println!(
        "acceptance: {} of {} criteria passed in {:.1} s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        if std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
            std::process::exit(1);
        }
    }
}
