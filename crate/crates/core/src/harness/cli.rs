//! `mhe-soc` subcommands.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use super::artifacts::{
    estimate_csv_bytes, read_truth, read_truth_metadata, rows_csv_bytes, truth_csv_bytes, write_bytes, write_json,
    EstimateSummary, ParallelSummary, Provenance, RunSummary,
};
use super::benchmark::{self, BenchmarkReport, BenchmarkRow, Suite};
use super::config::{sha256_hex, EstimatorMode, RunConfig};
use super::HarnessError;
use crate::mhe::{self, Estimator};
use crate::parallel;
use crate::plant::{simulate, TruthLog, TruthMetadata};
use crate::profiles::NOISE_GENERATOR;
use crate::window::{phase_averaged_mean, variability_series, variability_start};

pub const TRUTH_CSV: &str = "truth.csv";
pub const TRUTH_JSON: &str = "truth.json";
pub const ESTIMATE_CSV: &str = "estimate.csv";
pub const ESTIMATE_FAST_CSV: &str = "estimate_fast.csv";
pub const ESTIMATE_SLOW_CSV: &str = "estimate_slow.csv";
pub const ESTIMATE_JSON: &str = "estimate_summary.json";
pub const VARIABILITY_JSON: &str = "variability_summary.json";
pub const BENCHMARK_CSV: &str = "benchmark.csv";
pub const BENCHMARK_JSON: &str = "benchmark.json";

pub fn variability_csv(n_ts: usize) -> String {
    format!("variability_nts{n_ts}.csv")
}

#[derive(Debug, Parser)]
#[command(name = "mhe-soc", version, about = "Battery SOC and parameter estimation with moving horizon estimators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output.directory`. Relative paths inside
    /// the config resolve against it.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Record wall times (makes outputs differ between runs).
    #[arg(long)]
    emit_timing: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the plant and write the truth log.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Replay a truth log through an estimator.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Truth log CSV; defaults to `estimator.truth`, then `<out-dir>/truth.csv`.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<EstimatorMode>,
    },
    /// Signal variability of the output for several downsampling factors.
    Variability {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
        nts: Vec<usize>,
        /// Number of buffered samples.
        #[arg(long = "n", default_value_t = 30)]
        n: usize,
        /// Truth log CSV; the plant section is simulated when omitted.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "clean")]
        signal: Signal,
    },
    /// Run a configuration matrix and write the comparison table.
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "paper-tables")]
        suite: Suite,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    /// Noise-free terminal voltage.
    Clean,
    Noisy,
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Context {
    cfg: RunConfig,
    out_dir: PathBuf,
}

impl Context {
    fn new(common: &Common) -> Result<Self, HarnessError> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if common.emit_timing {
            cfg.output.emit_timing = true;
        }
        let out_dir = common.out_dir.clone().unwrap_or_else(|| cfg.output.directory.clone());
        Ok(Self { cfg, out_dir })
    }

    fn check_inputs(&self) -> Result<(), HarnessError> {
        for p in self.cfg.required_inputs(&self.out_dir) {
            if !p.exists() {
                return Err(HarnessError::MissingInput(p.display().to_string()));
            }
        }
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn emit_timing(&self) -> bool {
        self.cfg.output.emit_timing
    }

    /// Simulates the plant section.
    fn simulate(&self) -> Result<(TruthLog, TruthMetadata), HarnessError> {
        let params = self.cfg.plant_params(&self.out_dir)?;
        let profile = self.cfg.profile(&params);
        let p = &self.cfg.plant;
        let log = simulate(&params, &profile, &p.noise, p.z0, p.horizon_s)?;
        let meta = TruthMetadata {
            seed: p.noise.seed,
            noise_std: p.noise.std_dev,
            noise_generator: NOISE_GENERATOR.into(),
            params_sha256: sha256_hex(serde_json::to_string(&params).expect("params serialize").as_bytes()),
            config_sha256: self.cfg.sha256(),
            z0: p.z0,
            horizon_s: p.horizon_s,
            samples: log.len(),
            clamp_events: log.clamp_events,
            hit_soc_bound: log.hit_soc_bound,
        };
        Ok((log, meta))
    }

    fn write_truth(&self, log: &TruthLog, meta: &TruthMetadata) -> Result<String, HarnessError> {
        let bytes = truth_csv_bytes(log)?;
        write_bytes(&self.path(TRUTH_CSV), &bytes)?;
        write_json(&self.path(TRUTH_JSON), meta)?;
        Ok(sha256_hex(&bytes))
    }

    /// Truth log path from the flag, the config, or the output directory.
    fn truth_path(&self, flag: Option<PathBuf>) -> PathBuf {
        flag.or_else(|| self.cfg.estimator.truth.as_ref().map(|p| self.cfg.resolve(&self.out_dir, p)))
            .unwrap_or_else(|| self.path(TRUTH_CSV))
    }

    fn load_truth(&self, path: &Path) -> Result<(TruthLog, Provenance), HarnessError> {
        let (log, truth_sha256) = read_truth(path)?;
        let prov = Provenance { config_sha256: self.cfg.sha256(), truth_sha256, truth: read_truth_metadata(path) };
        Ok((log, prov))
    }
}

fn dispatch(cmd: Command) -> Result<(), HarnessError> {
    match cmd {
        Command::Simulate { common } => cmd_simulate(&common),
        Command::Estimate { common, truth, mode } => cmd_estimate(&common, truth, mode),
        Command::Variability { common, nts, n, truth, signal } => cmd_variability(&common, &nts, n, truth, signal),
        Command::Benchmark { common, suite } => cmd_benchmark(&common, suite),
    }
}

fn cmd_simulate(common: &Common) -> Result<(), HarnessError> {
    let ctx = Context::new(common)?;
    ctx.check_inputs()?;
    let (log, meta) = ctx.simulate()?;
    ctx.write_truth(&log, &meta)?;
    Ok(())
}

fn cmd_estimate(common: &Common, truth: Option<PathBuf>, mode: Option<EstimatorMode>) -> Result<(), HarnessError> {
    let mut ctx = Context::new(common)?;
    if let Some(m) = mode {
        if m != ctx.cfg.estimator.mode {
            ctx.cfg.estimator.mode = m;
            ctx.cfg.validate()?;
        }
    }
    ctx.check_inputs()?;
    let truth_path = ctx.truth_path(truth);
    let (log, provenance) = ctx.load_truth(&truth_path)?;
    let guess = ctx.cfg.initial_guess(&ctx.out_dir)?;
    let timing = ctx.emit_timing();
    let est = &ctx.cfg.estimator;
    if est.mode == EstimatorMode::Parallel {
        let pcfg = est.parallel_config();
        pcfg.validate(guess.params.ts)?;
        let rec = parallel::run(&log, &pcfg, &guess)?;
        write_bytes(&ctx.path(ESTIMATE_FAST_CSV), &estimate_csv_bytes(&rec.fast, timing)?)?;
        write_bytes(&ctx.path(ESTIMATE_SLOW_CSV), &estimate_csv_bytes(&rec.slow, timing)?)?;
        let summary = ParallelSummary {
            provenance,
            handoff_period_s: pcfg.handoff_period_s,
            handoffs: rec.handoff_times.len(),
            first_handoff_t: rec.handoff_times.first().copied(),
            fast_schedule: pcfg.fast.schedule.summary(),
            slow_schedule: pcfg.slow.schedule.summary(),
            fast: RunSummary::new(&rec.fast, None, timing),
            slow: RunSummary::new(&rec.slow, None, timing),
        };
        write_json(&ctx.path(ESTIMATE_JSON), &summary)
    } else {
        let mcfg = est.mhe_config();
        let label = format!("{:?}", est.mode).to_lowercase();
        let estimator = Estimator::new(mcfg.clone(), guess)?;
        let rec = mhe::run(&log, estimator, &label)?;
        write_bytes(&ctx.path(ESTIMATE_CSV), &estimate_csv_bytes(&rec, timing)?)?;
        let summary = EstimateSummary {
            provenance,
            mode: serde_json::to_value(est.mode).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or(label),
            schedule: mcfg.schedule.summary(),
            theta_arity: mcfg.theta_selection.arity(),
            run: RunSummary::new(&rec, None, timing),
        };
        write_json(&ctx.path(ESTIMATE_JSON), &summary)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariabilitySeries {
    pub n_ts: usize,
    pub file: String,
    pub samples: usize,
    /// Mean of the written series (grid anchored at index 0).
    pub mean: f64,
    /// Mean over every grid origin; independent of how the grid lines up
    /// with the current profile.
    pub phase_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariabilitySummary {
    pub config_sha256: String,
    pub truth_sha256: String,
    pub seed: u64,
    pub noise_generator: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub signal: Signal,
    /// First base-rate index scored; common to all series.
    pub start_index: usize,
    pub series: Vec<VariabilitySeries>,
}

#[derive(Serialize)]
struct VariabilityRow {
    t: f64,
    delta_y: f64,
}

fn cmd_variability(
    common: &Common,
    nts: &[usize],
    n: usize,
    truth: Option<PathBuf>,
    signal: Signal,
) -> Result<(), HarnessError> {
    let ctx = Context::new(common)?;
    if n < 2 || nts.is_empty() || nts.contains(&0) {
        return Err(HarnessError::Config("variability needs --n >= 2 and positive --nts factors".into()));
    }
    ctx.check_inputs()?;
    let (log, truth_sha256, seed) =
        match truth.or_else(|| ctx.cfg.estimator.truth.as_ref().map(|p| ctx.cfg.resolve(&ctx.out_dir, p))) {
            Some(p) => {
                let (log, prov) = ctx.load_truth(&p)?;
                let seed = prov.truth.map(|m| m.seed).unwrap_or(ctx.cfg.plant.noise.seed);
                (log, prov.truth_sha256, seed)
            }
            None => {
                let (log, meta) = ctx.simulate()?;
                let sha = sha256_hex(&truth_csv_bytes(&log)?);
                (log, sha, meta.seed)
            }
        };
    let y: Vec<f64> = log
        .records
        .iter()
        .map(|r| match signal {
            Signal::Clean => r.vb_clean,
            Signal::Noisy => r.vb_noisy,
        })
        .collect();
    let start = variability_start(n, nts);
    if start >= y.len() {
        return Err(HarnessError::Config(format!(
            "truth log has {} samples; N={n} with n_ts up to {} needs more than {start}",
            y.len(),
            nts.iter().max().copied().unwrap_or(0)
        )));
    }
    let mut series = Vec::new();
    for &f in nts {
        let num = |e: crate::window::WindowError| HarnessError::Numerical(e.to_string());
        let s = variability_series(&y, n, f, 0, start).map_err(num)?;
        let rows: Vec<VariabilityRow> =
            s.iter().map(|&(k, d)| VariabilityRow { t: log.records[k].t, delta_y: d }).collect();
        let file = variability_csv(f);
        write_bytes(&ctx.path(&file), &rows_csv_bytes(&rows)?)?;
        let mean = rows.iter().map(|r| r.delta_y).sum::<f64>() / rows.len() as f64;
        let phase_mean = phase_averaged_mean(&y, n, f, start).map_err(num)?;
        series.push(VariabilitySeries { n_ts: f, file, samples: rows.len(), mean, phase_mean });
    }
    let summary = VariabilitySummary {
        config_sha256: ctx.cfg.sha256(),
        truth_sha256,
        seed,
        noise_generator: NOISE_GENERATOR.into(),
        n,
        signal,
        start_index: start,
        series,
    };
    write_json(&ctx.path(VARIABILITY_JSON), &summary)
}

fn cmd_benchmark(common: &Common, suite: Suite) -> Result<(), HarnessError> {
    let ctx = Context::new(common)?;
    ctx.check_inputs()?;
    let (log, meta) = ctx.simulate()?;
    let truth_sha256 = ctx.write_truth(&log, &meta)?;
    // Estimators replay the log as written.
    let (log, _) = read_truth(&ctx.path(TRUTH_CSV))?;
    let guess = ctx.cfg.initial_guess(&ctx.out_dir)?;
    let timing = ctx.emit_timing();
    let runs = benchmark::run_cases(&log, &benchmark::cases(suite), &guess, timing, benchmark::thread_cap())?;
    let from_t = benchmark::common_from_t(&runs);
    let rows: Vec<BenchmarkRow> =
        runs.iter().map(|r| BenchmarkRow::new(r, from_t.unwrap_or(f64::INFINITY), timing)).collect();
    write_bytes(&ctx.path(BENCHMARK_CSV), &rows_csv_bytes(&rows)?)?;
    let report = BenchmarkReport {
        suite,
        config_sha256: ctx.cfg.sha256(),
        truth_sha256,
        seed: meta.seed,
        noise_std: meta.noise_std,
        noise_generator: meta.noise_generator,
        timing,
        machine: timing.then(benchmark::MachineProfile::detect),
        rmse_from_t: from_t,
        rows,
    };
    write_json(&ctx.path(BENCHMARK_JSON), &report)
}
