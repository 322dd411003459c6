//! Run configuration: one JSON document drives every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::ecm::{EcmParameters, PlantState, ThetaSelection};
use crate::mhe::{perturb_parameters, InitialGuess, MheConfig};
use crate::parallel::ParallelConfig;
use crate::profiles::{HppcProfile, NoiseSpec};
use crate::window::{FilterSpec, Schedule};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub plant: PlantSection,
    pub estimator: EstimatorSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantSection {
    /// Parameter JSON file; the built-in reference cell when absent.
    pub params: Option<PathBuf>,
    pub z0: f64,
    pub horizon_s: f64,
    /// Modified HPPC at the cell's 1C current when absent.
    pub profile: Option<HppcProfile>,
    pub noise: NoiseSpec,
}

impl Default for PlantSection {
    fn default() -> Self {
        Self { params: None, z0: 0.9, horizon_s: 8000.0, profile: None, noise: NoiseSpec::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[clap(rename_all = "snake_case")]
pub enum EstimatorMode {
    #[default]
    Standard,
    MultiRate,
    Parallel,
    Filtered,
}

impl EstimatorMode {
    /// Estimator used for `mode` when the config gives none.
    pub fn default_mhe(self) -> MheConfig {
        match self {
            Self::Standard | Self::Parallel => MheConfig::new(Schedule::uniform(30, 20), ThetaSelection::Order0To3Full),
            Self::MultiRate => MheConfig::new(Schedule::paper_multi_rate(), ThetaSelection::Order0To3Full),
            Self::Filtered => MheConfig::new(
                Schedule::filtered(10, 20, vec![FilterSpec::dirty_derivative(), FilterSpec::pseudo_integrator()]),
                ThetaSelection::Order0To3Full,
            ),
        }
    }

    fn accepts(self, schedule: &Schedule) -> bool {
        matches!(
            (self, schedule),
            (Self::Standard, Schedule::Uniform { .. })
                | (Self::MultiRate, Schedule::MultiRate { .. })
                | (Self::Filtered, Schedule::Filtered { .. })
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorSection {
    pub mode: EstimatorMode,
    /// Truth log to replay; `estimate` also accepts it on the command line.
    pub truth: Option<PathBuf>,
    pub mhe: Option<MheConfig>,
    pub parallel: Option<ParallelConfig>,
    pub initial_guess: GuessSection,
}

impl EstimatorSection {
    pub fn mhe_config(&self) -> MheConfig {
        self.mhe.clone().unwrap_or_else(|| self.mode.default_mhe())
    }

    pub fn parallel_config(&self) -> ParallelConfig {
        self.parallel.clone().unwrap_or_default()
    }
}

/// Estimator starting point. Coefficients come from `params` (or the plant's
/// parameters) scaled by `1 + order0_perturbation` for order 0 and
/// `1 + higher_perturbation` above.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuessSection {
    pub z0: f64,
    pub v1: f64,
    pub params: Option<PathBuf>,
    pub order0_perturbation: f64,
    pub higher_perturbation: f64,
}

impl Default for GuessSection {
    fn default() -> Self {
        Self { z0: 0.85, v1: 0.0, params: None, order0_perturbation: 0.2, higher_perturbation: -0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub directory: PathBuf,
    /// Write measured wall times. Off by default so that artifacts are
    /// byte-identical across runs.
    pub emit_timing: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { directory: PathBuf::from("."), emit_timing: false }
    }
}

impl RunConfig {
    /// Parses and validates; errors carry the offending key path.
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            HarnessError::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text =
            fs::read_to_string(path).map_err(|e| HarnessError::MissingInput(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            HarnessError::Config(m) => HarnessError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let p = &self.plant;
        if !(0.0..=1.0).contains(&p.z0) {
            return Err(HarnessError::Config(format!("at `plant.z0`: {} outside [0, 1]", p.z0)));
        }
        if !(p.horizon_s > 0.0) || !p.horizon_s.is_finite() {
            return Err(HarnessError::Config("at `plant.horizon_s`: must be positive".into()));
        }
        if !(p.noise.std_dev >= 0.0) {
            return Err(HarnessError::Config("at `plant.noise.std_dev`: must be >= 0".into()));
        }
        let g = &self.estimator.initial_guess;
        if !(0.0..=1.0).contains(&g.z0) {
            return Err(HarnessError::Config(format!("at `estimator.initial_guess.z0`: {} outside [0, 1]", g.z0)));
        }
        if !(g.order0_perturbation > -1.0) || !(g.higher_perturbation > -1.0) {
            return Err(HarnessError::Config("at `estimator.initial_guess`: perturbations must be > -1".into()));
        }
        let e = &self.estimator;
        if let Some(m) = &e.mhe {
            if e.mode == EstimatorMode::Parallel {
                return Err(HarnessError::Config(
                    "at `estimator.mhe`: mode parallel takes `estimator.parallel`".into(),
                ));
            }
            if !e.mode.accepts(&m.schedule) {
                return Err(HarnessError::Config(format!(
                    "at `estimator.mhe.schedule`: kind does not match mode {:?}",
                    e.mode
                )));
            }
            m.validate().map_err(|err| HarnessError::Config(format!("at `estimator.mhe`: {err}")))?;
        }
        if e.parallel.is_some() && e.mode != EstimatorMode::Parallel {
            return Err(HarnessError::Config("at `estimator.parallel`: only valid with mode parallel".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical (compact, defaults filled) serialization.
    pub fn sha256(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Resolves a configured path against the output directory.
    pub fn resolve(&self, out_dir: &Path, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            out_dir.join(path)
        }
    }

    /// Input files named by the config that must exist before computing.
    pub fn required_inputs(&self, out_dir: &Path) -> Vec<PathBuf> {
        [&self.plant.params, &self.estimator.initial_guess.params]
            .into_iter()
            .flatten()
            .map(|p| self.resolve(out_dir, p))
            .collect()
    }

    pub fn plant_params(&self, out_dir: &Path) -> Result<EcmParameters, HarnessError> {
        match &self.plant.params {
            Some(p) => load_params(&self.resolve(out_dir, p)),
            None => Ok(EcmParameters::reference()),
        }
    }

    pub fn profile(&self, params: &EcmParameters) -> HppcProfile {
        self.plant.profile.unwrap_or_else(|| HppcProfile::modified(params.one_c_current()))
    }

    pub fn initial_guess(&self, out_dir: &Path) -> Result<InitialGuess, HarnessError> {
        let g = &self.estimator.initial_guess;
        let base = match &g.params {
            Some(p) => load_params(&self.resolve(out_dir, p))?,
            None => self.plant_params(out_dir)?,
        };
        Ok(InitialGuess {
            xi: PlantState::new(g.z0, g.v1),
            params: perturb_parameters(&base, g.order0_perturbation, g.higher_perturbation),
        })
    }
}

fn load_params(path: &Path) -> Result<EcmParameters, HarnessError> {
    if !path.exists() {
        return Err(HarnessError::MissingInput(path.display().to_string()));
    }
    EcmParameters::load_json(path).map_err(|e| HarnessError::Config(e.to_string()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.plant.z0, 0.9);
        assert_eq!(cfg.plant.horizon_s, 8000.0);
        assert!(!cfg.output.emit_timing);
    }

    #[test]
    fn unknown_key_reports_its_path() {
        let err = RunConfig::from_json(r#"{"plant": {"noise": {"sigma": 0.1}}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("plant.noise"), "{msg}");
        assert!(msg.contains("sigma"), "{msg}");
    }

    #[test]
    fn nested_mhe_fields_parse() {
        let cfg = RunConfig::from_json(
            r#"{"estimator": {"mode": "multi_rate", "mhe": {
                "schedule": {"kind": "multi_rate", "segments": [{"count": 5, "n_ts": 1}, {"count": 25, "n_ts": 20}]},
                "theta": "order0-only", "cadence": "every_sample"}}}"#,
        )
        .unwrap();
        let m = cfg.estimator.mhe_config();
        assert_eq!(m.schedule, Schedule::paper_multi_rate());
        assert_eq!(m.theta_selection, ThetaSelection::Order0Only);
    }

    #[test]
    fn mode_and_schedule_must_agree() {
        let bad = r#"{"estimator": {"mode": "filtered", "mhe": {"schedule": {"kind": "uniform", "N": 30, "n_ts": 20}, "theta": "frozen"}}}"#;
        assert!(matches!(RunConfig::from_json(bad), Err(HarnessError::Config(_))));
        let bad = r#"{"estimator": {"parallel": {"slow": {"schedule": {"kind": "uniform", "N": 3, "n_ts": 1}, "theta": "frozen"},
            "fast": {"schedule": {"kind": "uniform", "N": 3, "n_ts": 1}, "theta": "frozen"}, "handoff_period_s": 20}}}"#;
        assert!(matches!(RunConfig::from_json(bad), Err(HarnessError::Config(_))));
    }

    #[test]
    fn semantic_errors_are_config_errors() {
        for text in [
            r#"{"plant": {"z0": 1.5}}"#,
            r#"{"plant": {"horizon_s": -1}}"#,
            r#"{"estimator": {"mhe": {"schedule": {"kind": "uniform", "N": 0, "n_ts": 20}, "theta": "frozen"}}}"#,
            r#"{"estimator": {"mhe": {"schedule": {"kind": "uniform", "N": 3, "n_ts": 2}, "theta": "frozen", "barrier_m": 10}}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(text), Err(HarnessError::Config(_))), "{text}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.sha256(), b.sha256());
        b.plant.noise.seed = 1;
        assert_ne!(a.sha256(), b.sha256());
        assert_eq!(a.sha256().len(), 64);
    }

    #[test]
    fn round_trips_through_json() {
        let mut cfg = RunConfig::default();
        cfg.estimator.mode = EstimatorMode::Parallel;
        cfg.estimator.parallel = Some(ParallelConfig::default());
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn relative_paths_resolve_against_out_dir() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.resolve(Path::new("/o"), Path::new("p.json")), PathBuf::from("/o/p.json"));
        assert_eq!(cfg.resolve(Path::new("/o"), Path::new("/abs.json")), PathBuf::from("/abs.json"));
    }
}
