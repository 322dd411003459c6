//! Modified HPPC current profile and the Gaussian measurement-noise stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Name recorded in run metadata for the noise generator.
pub const NOISE_GENERATOR: &str = "rand_chacha::ChaCha8Rng 0.9 + rand_distr::Normal 0.5";

/// Periodic discharge / rest / charge pulse train. Positive current
/// discharges the cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HppcProfile {
    pub discharge_s: f64,
    pub rest_s: f64,
    pub charge_s: f64,
    /// 1C current magnitude in amperes.
    pub i_1c: f64,
    pub c_rate_discharge: f64,
    pub c_rate_charge: f64,
}

impl HppcProfile {
    /// 20 s at 1C discharge, 30 s rest, 10 s at 0.5C charge.
    pub fn modified(i_1c: f64) -> Self {
        Self { discharge_s: 20.0, rest_s: 30.0, charge_s: 10.0, i_1c, c_rate_discharge: 1.0, c_rate_charge: 0.5 }
    }

    /// A profile that never draws current; handy for rest-equilibrium checks.
    pub fn zero(i_1c: f64) -> Self {
        Self { c_rate_discharge: 0.0, c_rate_charge: 0.0, ..Self::modified(i_1c) }
    }

    pub fn period(&self) -> f64 {
        self.discharge_s + self.rest_s + self.charge_s
    }

    pub fn current_at(&self, t: f64) -> f64 {
        let phase = t.rem_euclid(self.period());
        if phase < self.discharge_s {
            self.c_rate_discharge * self.i_1c
        } else if phase < self.discharge_s + self.rest_s {
            0.0
        } else {
            -self.c_rate_charge * self.i_1c
        }
    }

    pub fn mean_current(&self) -> f64 {
        (self.discharge_s * self.c_rate_discharge - self.charge_s * self.c_rate_charge) * self.i_1c / self.period()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub mean: f64,
    pub std_dev: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { mean: 0.0, std_dev: 0.05, seed: 0 }
    }
}

/// `n` i.i.d. normal draws, fully determined by `spec.seed`.
pub fn noise_stream(spec: &NoiseSpec, n: usize) -> Vec<f64> {
    if spec.std_dev == 0.0 {
        return vec![spec.mean; n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(spec.mean, spec.std_dev).expect("std_dev >= 0 and finite");
    (0..n).map(|_| normal.sample(&mut rng)).collect()
}
