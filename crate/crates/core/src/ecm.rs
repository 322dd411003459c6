//! First-order equivalent-circuit battery model.
//!
//! The open-circuit voltage, series resistance and the RC polarization pair
//! are all polynomials in the state of charge `Z`. Coefficient vectors are
//! stored low-order-first.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Polynomial order of the R0, R1 and C1 maps.
pub const PARAM_ORDER: usize = 3;
/// Polynomial order of the reference OCV map.
pub const OCV_ORDER: usize = 6;

#[derive(Debug, Error)]
pub enum EcmError {
    #[error("non-finite state after step (Z={z}, V1={v1}, tau={tau})")]
    NonFiniteState { z: f64, v1: f64, tau: f64 },
    #[error("theta length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("parameter file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parameter file {path}: {message}")]
    Parse { path: String, message: String },
}

/// Horner evaluation of `sum_i coeffs[i] * z^i`.
#[inline]
pub fn eval_poly(coeffs: &[f64], z: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * z + c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EcmParameters {
    pub alpha_ocv: Vec<f64>,
    pub alpha_r0: Vec<f64>,
    pub alpha_r1: Vec<f64>,
    pub alpha_c1: Vec<f64>,
    /// Nominal capacity in ampere-seconds.
    #[serde(rename = "capacity_Cn")]
    pub capacity_cn: f64,
    pub eta: f64,
    #[serde(rename = "Ts")]
    pub ts: f64,
}

impl Default for EcmParameters {
    fn default() -> Self {
        Self::reference()
    }
}

impl EcmParameters {
    /// Synthetic 2 Ah Li-ion cell used as ground truth throughout the crate.
    ///
    /// * OCV rises monotonically from 3.0 V at Z=0 to 4.15 V at Z=1.
    /// * R0 falls from 30 to 20 mOhm, R1 from 25 to 15 mOhm.
    /// * C1 rises from 1200 to 1800 F.
    pub fn reference() -> Self {
        Self {
            alpha_ocv: vec![3.0, 5.329, -18.649, 39.073, -46.355, 29.49, -7.738],
            alpha_r0: vec![0.030, -0.030, 0.040, -0.020],
            alpha_r1: vec![0.025, -0.035, 0.045, -0.020],
            alpha_c1: vec![1200.0, 1500.0, -1800.0, 900.0],
            capacity_cn: 7200.0,
            eta: 1.0,
            ts: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), EcmError> {
        let bad = |m: &str| Err(EcmError::InvalidParameters(m.to_string()));
        if self.alpha_ocv.is_empty() || self.alpha_r0.is_empty() || self.alpha_r1.is_empty() || self.alpha_c1.is_empty()
        {
            return bad("coefficient vectors must be nonempty");
        }
        let all = [&self.alpha_ocv, &self.alpha_r0, &self.alpha_r1, &self.alpha_c1];
        if all.iter().flat_map(|v| v.iter()).any(|c| !c.is_finite()) {
            return bad("coefficients must be finite");
        }
        if !(self.capacity_cn > 0.0 && self.capacity_cn.is_finite()) {
            return bad("capacity_Cn must be > 0");
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad("eta must lie in (0, 1]");
        }
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            return bad("Ts must be > 0");
        }
        Ok(())
    }

    /// Checks that R0, R1 and C1 stay strictly positive on `[z_min, z_max]`,
    /// sampled on a 1e-3 grid.
    pub fn validate_truth_range(&self, z_min: f64, z_max: f64) -> Result<(), EcmError> {
        let n = (((z_max - z_min) / 1e-3).ceil() as usize).max(1);
        for i in 0..=n {
            let z = z_min + (z_max - z_min) * i as f64 / n as f64;
            if self.r0(z) <= 0.0 || self.r1(z) <= 0.0 || self.c1(z) <= 0.0 {
                return Err(EcmError::InvalidParameters(format!("non-positive R0/R1/C1 at Z={z:.4}")));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn ocv(&self, z: f64) -> f64 {
        eval_poly(&self.alpha_ocv, z)
    }
    #[inline]
    pub fn r0(&self, z: f64) -> f64 {
        eval_poly(&self.alpha_r0, z)
    }
    #[inline]
    pub fn r1(&self, z: f64) -> f64 {
        eval_poly(&self.alpha_r1, z)
    }
    #[inline]
    pub fn c1(&self, z: f64) -> f64 {
        eval_poly(&self.alpha_c1, z)
    }

    /// Current magnitude that empties the cell in one hour.
    pub fn one_c_current(&self) -> f64 {
        self.capacity_cn / 3600.0
    }

    pub fn load_json(path: &Path) -> Result<Self, EcmError> {
        let text =
            fs::read_to_string(path).map_err(|e| EcmError::Io { path: path.display().to_string(), source: e })?;
        let params: Self = serde_json::from_str(&text)
            .map_err(|e| EcmError::Parse { path: path.display().to_string(), message: e.to_string() })?;
        params.validate()?;
        Ok(params)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("parameters serialize")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantState {
    pub z: f64,
    pub v1: f64,
}

impl PlantState {
    pub fn new(z: f64, v1: f64) -> Self {
        Self { z, v1 }
    }
}

/// One sampling period of coulomb counting plus the exact ZOH update of the
/// RC pair. R1 and C1 are evaluated at the pre-step SOC.
#[inline]
pub fn step(params: &EcmParameters, state: PlantState, current: f64) -> Result<PlantState, EcmError> {
    let r1 = params.r1(state.z);
    let tau = r1 * params.c1(state.z);
    let arg = -params.ts / tau;
    let decay = arg.exp();
    let z = state.z - params.eta * params.ts * current / params.capacity_cn;
    let v1 = decay * state.v1 + (1.0 - decay) * r1 * current;
    if !arg.is_finite() || !decay.is_finite() || !v1.is_finite() || !z.is_finite() {
        return Err(EcmError::NonFiniteState { z, v1, tau });
    }
    Ok(PlantState { z, v1 })
}

/// Terminal voltage `V_OCV(Z) - I*R0(Z) - V1`.
#[inline]
pub fn output(params: &EcmParameters, state: PlantState, current: f64) -> f64 {
    params.ocv(state.z) - current * params.r0(state.z) - state.v1
}

/// Which coefficients of [`EcmParameters`] the estimator optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThetaSelection {
    /// `alpha_{R0,0}, alpha_{R1,0}, alpha_{C1,0}`.
    #[serde(rename = "order0-only")]
    Order0Only,
    /// Orders 0..=3 of R0, R1 and C1 (12 entries).
    #[serde(rename = "order0-3-full")]
    Order0To3Full,
    /// Nothing is optimized; the estimator is a pure state observer.
    Frozen,
}

impl ThetaSelection {
    pub fn arity(self) -> usize {
        match self {
            Self::Order0Only => 3,
            Self::Order0To3Full => 3 * (PARAM_ORDER + 1),
            Self::Frozen => 0,
        }
    }

    fn orders(self) -> usize {
        match self {
            Self::Order0Only => 1,
            Self::Order0To3Full => PARAM_ORDER + 1,
            Self::Frozen => 0,
        }
    }

    /// Column labels, e.g. `alpha_r0_0`, in packing order.
    pub fn names(self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.arity());
        for field in ["alpha_r0", "alpha_r1", "alpha_c1"] {
            for i in 0..self.orders() {
                out.push(format!("{field}_{i}"));
            }
        }
        out
    }
}

/// Flat vector of the optimized coefficients.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ThetaVector(pub Vec<f64>);

impl ThetaVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn pack_theta(params: &EcmParameters, selection: ThetaSelection) -> ThetaVector {
    let k = selection.orders();
    let mut out = Vec::with_capacity(selection.arity());
    for field in [&params.alpha_r0, &params.alpha_r1, &params.alpha_c1] {
        out.extend((0..k).map(|i| field.get(i).copied().unwrap_or(0.0)));
    }
    ThetaVector(out)
}

pub fn unpack_theta(base: &EcmParameters, theta: &[f64], selection: ThetaSelection) -> Result<EcmParameters, EcmError> {
    let mut params = base.clone();
    write_theta(&mut params, theta, selection)?;
    Ok(params)
}

/// In-place variant of [`unpack_theta`]; used on the hot path of the cost.
pub fn write_theta(params: &mut EcmParameters, theta: &[f64], selection: ThetaSelection) -> Result<(), EcmError> {
    if theta.len() != selection.arity() {
        return Err(EcmError::LengthMismatch { expected: selection.arity(), got: theta.len() });
    }
    let k = selection.orders();
    for (j, field) in [&mut params.alpha_r0, &mut params.alpha_r1, &mut params.alpha_c1].into_iter().enumerate() {
        if field.len() < k {
            field.resize(k, 0.0);
        }
        field[..k].copy_from_slice(&theta[j * k..(j + 1) * k]);
    }
    Ok(())
}
