//! Continuous transfer functions discretized with the bilinear (Tustin) map,
//! run as transposed direct-form II recurrences.

use serde::{Deserialize, Serialize};

use super::WindowError;

/// Continuous-time `B(s)/A(s)`, coefficients in descending powers of `s`
/// (`s/(0.1s+1)` is `b = [1, 0]`, `a = [0.1, 1]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSpec {
    pub b_continuous: Vec<f64>,
    pub a_continuous: Vec<f64>,
    pub label: String,
}

impl FilterSpec {
    pub fn new(label: &str, b: &[f64], a: &[f64]) -> Self {
        Self { b_continuous: b.to_vec(), a_continuous: a.to_vec(), label: label.to_string() }
    }

    /// `s / (0.1 s + 1)`.
    pub fn dirty_derivative() -> Self {
        Self::new("dirty_derivative", &[1.0, 0.0], &[0.1, 1.0])
    }

    /// `1 / (100 s + 1)`.
    pub fn pseudo_integrator() -> Self {
        Self::new("pseudo_integrator", &[1.0], &[100.0, 1.0])
    }

    pub fn unity() -> Self {
        Self::new("unity", &[1.0], &[1.0])
    }
}

/// `H(z) = (b0 + b1 z^-1 + ...) / (1 + a1 z^-1 + ...)`; `a[0] == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteTf {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
}

impl DiscreteTf {
    pub fn order(&self) -> usize {
        self.a.len() - 1
    }

    pub fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>()
    }
}

fn strip_leading_zeros(c: &[f64]) -> &[f64] {
    let first = c.iter().position(|&v| v != 0.0).unwrap_or(c.len());
    &c[first..]
}

fn poly_mul(p: &[f64], q: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; p.len() + q.len() - 1];
    for (i, &a) in p.iter().enumerate() {
        for (j, &b) in q.iter().enumerate() {
            out[i + j] += a * b;
        }
    }
    out
}

fn poly_pow(p: &[f64], n: usize) -> Vec<f64> {
    (0..n).fold(vec![1.0], |acc, _| poly_mul(&acc, p))
}

/// Substitutes `s = c (z-1)/(z+1)` into a descending-power polynomial and
/// clears denominators with `(z+1)^n`. Result is descending in `z`, length
/// `n + 1`.
fn tustin_poly(coeffs: &[f64], n: usize, c: f64) -> Vec<f64> {
    let deg = coeffs.len() - 1;
    let mut out = vec![0.0; n + 1];
    for (k, &coef) in coeffs.iter().enumerate() {
        let power = deg - k;
        let term = poly_mul(&poly_pow(&[1.0, -1.0], power), &poly_pow(&[1.0, 1.0], n - power));
        let scale = coef * c.powi(power as i32);
        for (o, t) in out.iter_mut().zip(term) {
            *o += scale * t;
        }
    }
    out
}

/// Schur-Cohn step-down test: true iff every root of the monic polynomial
/// `1 + a1 z^-1 + ... + an z^-n` lies strictly inside the unit circle.
pub fn is_schur_stable(a: &[f64]) -> bool {
    let mut cur: Vec<f64> = a.to_vec();
    while cur.len() > 1 {
        let m = cur.len() - 1;
        let k = cur[m];
        if k.abs() >= 1.0 || !k.is_finite() {
            return false;
        }
        let denom = 1.0 - k * k;
        let next: Vec<f64> = (0..m).map(|i| (cur[i] - k * cur[m - i]) / denom).collect();
        cur = next;
    }
    true
}

pub fn discretize_filter(spec: &FilterSpec, ts: f64) -> Result<DiscreteTf, WindowError> {
    let b = strip_leading_zeros(&spec.b_continuous);
    let a = strip_leading_zeros(&spec.a_continuous);
    if a.is_empty() || !(ts > 0.0) {
        return Err(WindowError::ImproperFilter(spec.label.clone()));
    }
    if b.len() > a.len() {
        return Err(WindowError::ImproperFilter(spec.label.clone()));
    }
    let n = a.len() - 1;
    let c = 2.0 / ts;
    let bz = if b.is_empty() { vec![0.0; n + 1] } else { tustin_poly(b, n, c) };
    let az = tustin_poly(a, n, c);
    let lead = az[0];
    if lead == 0.0 || !lead.is_finite() {
        return Err(WindowError::ImproperFilter(spec.label.clone()));
    }
    let tf = DiscreteTf { b: bz.iter().map(|v| v / lead).collect(), a: az.iter().map(|v| v / lead).collect() };
    if !is_schur_stable(&tf.a) {
        return Err(WindowError::UnstablePole(spec.label.clone()));
    }
    Ok(tf)
}

/// Running recurrence for one discrete filter.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteFilter {
    tf: DiscreteTf,
    state: Vec<f64>,
}

impl DiscreteFilter {
    pub fn new(tf: DiscreteTf) -> Self {
        let n = tf.order();
        Self { tf, state: vec![0.0; n] }
    }

    pub fn tf(&self) -> &DiscreteTf {
        &self.tf
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn set_state(&mut self, state: &[f64]) {
        self.state.copy_from_slice(state);
    }

    #[inline]
    pub fn step(&mut self, x: f64) -> f64 {
        let b = &self.tf.b;
        let a = &self.tf.a;
        let n = self.state.len();
        let y = b[0] * x + self.state.first().copied().unwrap_or(0.0);
        for i in 0..n {
            let next = if i + 1 < n { self.state[i + 1] } else { 0.0 };
            self.state[i] = b[i + 1] * x - a[i + 1] * y + next;
        }
        y
    }
}
