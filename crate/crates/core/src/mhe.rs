//! Single-shooting moving horizon estimator.
//!
//! The decision vector is `[Z, V1, theta...]` at the oldest window sample.
//! The cost is
//!
//! ```text
//! J = W1 |Y - H(xi0, theta)| + W2 |xi0 - xi_prior| + W3 |theta - theta_prior| + b_R0 + b_R1
//! ```
//!
//! with Euclidean norms on scaled residuals and `b_R = M` whenever the
//! candidate resistance goes negative on the probe grid. One estimator
//! covers uniform, multi-rate and filtered schedules; the schedule decides
//! which samples are compared. Once the window is full the optimizer runs
//! whenever the newest buffered slot moves (or on every sample, if asked).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ecm::{self, pack_theta, write_theta, EcmError, EcmParameters, PlantState, ThetaSelection, ThetaVector};
use crate::optim::{minimize_simplex, OptimError, Simplex, SimplexOptions};
use crate::plant::TruthLog;
use crate::window::{DiscreteFilter, MeasurementWindow, Schedule, WindowError};

/// Smallest admissible barrier magnitude.
pub const MIN_BARRIER: f64 = 1e5;
/// Output-mismatch stand-in when the candidate trajectory blows up.
pub const NONFINITE_SENTINEL: f64 = 1e6;

#[derive(Debug, Error)]
pub enum MheError {
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Ecm(#[from] EcmError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("invalid estimator config: {0}")]
    InvalidConfig(String),
    #[error("window is not full yet")]
    WindowNotFull,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Weights {
    /// Output weight per sample; `None` means `1/sqrt(N)`.
    pub output: Option<f64>,
    /// Extra multiplier per channel (raw first); empty means all ones.
    pub channel: Vec<f64>,
    pub state: f64,
    /// Characteristic scales of `Z` and `V1`.
    pub state_scales: [f64; 2],
    pub theta: f64,
    /// Per-coefficient scales; `None` means `|initial guess|`, floored.
    pub theta_scales: Option<Vec<f64>>,
    pub theta_scale_floor: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            output: None,
            channel: Vec::new(),
            state: 0.1,
            state_scales: [1.0, 0.1],
            theta: 0.1,
            theta_scales: None,
            theta_scale_floor: 1e-6,
        }
    }
}

/// Where candidate resistances are sign-checked.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeGrid {
    /// SOC values visited by the candidate's own predicted trajectory.
    #[default]
    Trajectory,
    Fixed(Vec<f64>),
}

/// When the optimizer runs once the window is full.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cadence {
    /// Every newest-segment gap, i.e. each time a new sample enters the buffer.
    #[default]
    Buffer,
    EverySample,
}

/// What the optimizer starts from at each estimation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimplexMemory {
    /// Keep the previous step's simplex, shifted with the window.
    Persist,
    /// Build a fresh simplex around the warm start every step.
    Restart,
    /// Fresh axis-aligned simplex whose edges are the previous simplex's
    /// extent per coordinate, pointing the other way on alternate steps.
    #[default]
    Rescaled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MheConfig {
    pub schedule: Schedule,
    #[serde(rename = "theta")]
    pub theta_selection: ThetaSelection,
    #[serde(default)]
    pub weights: Weights,
    #[serde(default = "default_barrier")]
    pub barrier_m: f64,
    #[serde(default)]
    pub optimizer: SimplexOptions,
    #[serde(default)]
    pub probe_grid: ProbeGrid,
    #[serde(default)]
    pub simplex_memory: SimplexMemory,
    #[serde(default)]
    pub cadence: Cadence,
    /// Smallest rebuilt edge, relative to the first simplex's edge.
    #[serde(default = "default_min_edge")]
    pub min_edge_ratio: f64,
}

fn default_min_edge() -> f64 {
    0.01
}

fn default_barrier() -> f64 {
    MIN_BARRIER
}

impl MheConfig {
    pub fn new(schedule: Schedule, theta_selection: ThetaSelection) -> Self {
        Self {
            schedule,
            theta_selection,
            weights: Weights::default(),
            barrier_m: MIN_BARRIER,
            optimizer: SimplexOptions::default(),
            probe_grid: ProbeGrid::default(),
            simplex_memory: SimplexMemory::default(),
            min_edge_ratio: default_min_edge(),
            cadence: Cadence::default(),
        }
    }

    pub fn validate(&self) -> Result<(), MheError> {
        self.schedule.validate()?;
        self.optimizer.validate()?;
        if !(self.barrier_m >= MIN_BARRIER) {
            return Err(MheError::InvalidConfig(format!("barrier_m must be >= {MIN_BARRIER}")));
        }
        let w = &self.weights;
        if w.output.is_some_and(|v| !(v >= 0.0)) || !(w.state >= 0.0) || !(w.theta >= 0.0) {
            return Err(MheError::InvalidConfig("weights must be >= 0".into()));
        }
        if !w.channel.is_empty() && w.channel.len() != self.schedule.channels() {
            return Err(MheError::InvalidConfig(format!(
                "weights.channel has {} entries for {} channels",
                w.channel.len(),
                self.schedule.channels()
            )));
        }
        if w.state_scales.iter().any(|s| !(*s > 0.0)) || !(w.theta_scale_floor > 0.0) {
            return Err(MheError::InvalidConfig("scales must be > 0".into()));
        }
        if let Some(s) = &w.theta_scales {
            if s.len() != self.theta_selection.arity() || s.iter().any(|v| !(*v > 0.0)) {
                return Err(MheError::InvalidConfig("theta_scales length or sign".into()));
            }
        }
        Ok(())
    }
}

/// Starting point of an estimator: state at the first sample plus the full
/// parameter set (unoptimized coefficients are kept from here).
#[derive(Debug, Clone, PartialEq)]
pub struct InitialGuess {
    pub xi: PlantState,
    pub params: EcmParameters,
}

/// Scales order-0 coefficients of R0, R1 and C1 by `1 + order0` and all
/// higher orders by `1 + higher`.
pub fn perturb_parameters(truth: &EcmParameters, order0: f64, higher: f64) -> EcmParameters {
    let mut p = truth.clone();
    for field in [&mut p.alpha_r0, &mut p.alpha_r1, &mut p.alpha_c1] {
        for (i, c) in field.iter_mut().enumerate() {
            *c *= if i == 0 { 1.0 + order0 } else { 1.0 + higher };
        }
    }
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub t: f64,
    /// Estimate at the current sample time.
    pub xi_now: PlantState,
    pub theta: ThetaVector,
    /// Model output at `xi_now` with the current parameters.
    pub vb_hat: f64,
    /// Cost of the accepted point; `None` when no optimization ran.
    pub cost: Option<f64>,
    pub barrier_active: bool,
    pub optimized: bool,
    /// Objective calls this step, and how many of them hit the barrier or
    /// produced a non-finite trajectory.
    pub evaluations: usize,
    pub barrier_hits: usize,
    pub nonfinite: usize,
    pub wall_time_s: f64,
}

impl StepOutcome {
    /// A barrier-free vertex was probed but the accepted point still carries
    /// the barrier. Never expected with best-seen acceptance.
    pub fn unsafe_acceptance(&self) -> bool {
        self.barrier_active && self.barrier_hits < self.evaluations
    }
}

/// Terms of one cost evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    pub value: f64,
    pub output: f64,
    pub arrival_state: f64,
    pub arrival_theta: f64,
    pub barrier: f64,
    pub nonfinite: bool,
}

/// Integrates candidate trajectories over one window.
struct Lifter<'a> {
    inputs: &'a [f64],
    positions: &'a [usize],
    filters: Vec<DiscreteFilter>,
    start_states: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
struct Probe {
    min_r0: f64,
    min_r1: f64,
}

impl<'a> Lifter<'a> {
    fn new(window: &MeasurementWindow, inputs: &'a [f64], positions: &'a [usize]) -> Result<Self, MheError> {
        let start_states = (0..window.filters().len())
            .map(|i| window.filter_state_at_start(i).map(<[f64]>::to_vec).ok_or(MheError::WindowNotFull))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { inputs, positions, filters: window.filters().to_vec(), start_states })
    }

    /// Fills `out` channel-major and returns the state at the newest sample.
    fn predict(
        &mut self,
        params: &EcmParameters,
        xi0: PlantState,
        out: &mut Vec<f64>,
        mut probe: Option<&mut Probe>,
    ) -> Result<PlantState, EcmError> {
        let n = self.positions.len();
        let nch = 1 + self.filters.len();
        out.clear();
        out.resize(n * nch, 0.0);
        for (f, s) in self.filters.iter_mut().zip(&self.start_states) {
            f.set_state(s);
        }
        let span = *self.positions.last().expect("non-empty window");
        let mut state = xi0;
        let mut next_pos = 0;
        for j in 0..=span {
            let current = self.inputs[j];
            if let Some(p) = probe.as_deref_mut() {
                p.min_r0 = p.min_r0.min(params.r0(state.z));
                p.min_r1 = p.min_r1.min(params.r1(state.z));
            }
            let y = ecm::output(params, state, current);
            if !y.is_finite() {
                return Err(EcmError::NonFiniteState { z: state.z, v1: state.v1, tau: f64::NAN });
            }
            let hit = self.positions[next_pos] == j;
            if hit {
                out[next_pos] = y;
            }
            for (c, f) in self.filters.iter_mut().enumerate() {
                let v = f.step(y);
                if hit {
                    out[(c + 1) * n + next_pos] = v;
                }
            }
            if hit {
                next_pos += 1;
            }
            if j < span {
                state = ecm::step(params, state, current)?;
            }
        }
        Ok(state)
    }
}

/// Stacked predicted outputs over the window's exposed samples, one block
/// per channel, starting from `xi0` at the window's oldest sample.
/// `inputs[j]` is the current at base-rate position `j` of the window.
pub fn lift(
    params: &EcmParameters,
    xi0: PlantState,
    window: &MeasurementWindow,
    inputs: &[f64],
) -> Result<Vec<f64>, MheError> {
    if !window.is_full() {
        return Err(MheError::WindowNotFull);
    }
    if inputs.len() != window.span_steps() + 1 {
        return Err(MheError::InvalidConfig(format!("need {} inputs, got {}", window.span_steps() + 1, inputs.len())));
    }
    let positions = window.positions().to_vec();
    let mut lifter = Lifter::new(window, inputs, &positions)?;
    let mut out = Vec::new();
    lifter.predict(params, xi0, &mut out, None)?;
    Ok(out)
}

/// Everything one estimation step needs to score candidates.
struct CostContext<'a> {
    lifter: Lifter<'a>,
    selection: ThetaSelection,
    params: EcmParameters,
    measured: Vec<f64>,
    sample_weights: Vec<f64>,
    state_weight: f64,
    state_scales: [f64; 2],
    theta_weight: f64,
    theta_scales: &'a [f64],
    prior_xi: PlantState,
    prior_theta: &'a [f64],
    barrier_m: f64,
    probe_grid: &'a ProbeGrid,
    predicted: Vec<f64>,
}

/// Euclidean norm that does not overflow for large finite entries.
fn scaled_norm(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(0.0_f64, |m, v| m.max(v.abs()));
    if m == 0.0 || !m.is_finite() {
        return m;
    }
    m * values.map(|v| (v / m).powi(2)).sum::<f64>().sqrt()
}

impl CostContext<'_> {
    fn eval(&mut self, x: &[f64]) -> CostBreakdown {
        let xi0 = PlantState::new(x[0], x[1]);
        let theta = &x[2..];
        write_theta(&mut self.params, theta, self.selection).expect("decision vector arity");

        let ds0 = (xi0.z - self.prior_xi.z) / self.state_scales[0];
        let ds1 = (xi0.v1 - self.prior_xi.v1) / self.state_scales[1];
        let arrival_state = self.state_weight * ds0.hypot(ds1);
        let arrival_theta = if theta.is_empty() {
            0.0
        } else {
            let d = theta.iter().zip(self.prior_theta).zip(self.theta_scales).map(|((t, p), s)| (t - p) / s);
            self.theta_weight * scaled_norm(d)
        };

        let mut probe = Probe { min_r0: f64::INFINITY, min_r1: f64::INFINITY };
        let track = matches!(self.probe_grid, ProbeGrid::Trajectory);
        let result = self.lifter.predict(&self.params, xi0, &mut self.predicted, track.then_some(&mut probe));
        if let ProbeGrid::Fixed(grid) = self.probe_grid {
            for &z in grid {
                probe.min_r0 = probe.min_r0.min(self.params.r0(z));
                probe.min_r1 = probe.min_r1.min(self.params.r1(z));
            }
        }
        let (output, nonfinite) = match result {
            Ok(_) => {
                let sq: f64 = self
                    .measured
                    .iter()
                    .zip(&self.predicted)
                    .zip(&self.sample_weights)
                    .map(|((m, p), w)| (w * (m - p)).powi(2))
                    .sum();
                let o = sq.sqrt();
                if o.is_finite() {
                    (o, false)
                } else {
                    (NONFINITE_SENTINEL * self.sample_weights[0], true)
                }
            }
            Err(_) => (NONFINITE_SENTINEL * self.sample_weights[0], true),
        };
        let mut barrier = 0.0;
        // A trajectory that blew up may not have visited the whole window,
        // so it is charged one barrier on top of the sentinel.
        if nonfinite {
            barrier += self.barrier_m;
        } else {
            if !(probe.min_r0 >= 0.0) {
                barrier += self.barrier_m;
            }
            if !(probe.min_r1 >= 0.0) {
                barrier += self.barrier_m;
            }
        }
        let value = output + arrival_state + arrival_theta + barrier;
        if !value.is_finite() {
            // Arrival terms can only overflow for absurd candidates; score
            // them like a trajectory that blew up.
            let output = NONFINITE_SENTINEL * self.sample_weights[0];
            let barrier = self.barrier_m;
            return CostBreakdown {
                value: output + barrier,
                output,
                arrival_state,
                arrival_theta,
                barrier,
                nonfinite: true,
            };
        }
        CostBreakdown { value, output, arrival_state, arrival_theta, barrier, nonfinite }
    }
}

/// Moving horizon estimator over one measurement stream.
#[derive(Debug, Clone)]
pub struct Estimator {
    cfg: MheConfig,
    params: EcmParameters,
    theta: Vec<f64>,
    theta_scales: Vec<f64>,
    window: MeasurementWindow,
    inputs: VecDeque<f64>,
    /// Estimate at the oldest retained sample.
    xi_oldest: PlantState,
    /// Estimate at the newest sample.
    xi_now: PlantState,
    prior_xi: PlantState,
    prior_theta: Vec<f64>,
    last_accepted: Option<Vec<f64>>,
    /// Inputs dropped from the window since the last optimization.
    evicted: Vec<f64>,
    rescale_flip: bool,
    fill_index: Option<usize>,
    edge_floor: Vec<f64>,
    simplex: Option<Simplex>,
    last_input: Option<f64>,
    nonfinite_propagation: usize,
}

impl Estimator {
    pub fn new(cfg: MheConfig, guess: InitialGuess) -> Result<Self, MheError> {
        cfg.validate()?;
        guess.params.validate()?;
        let window = MeasurementWindow::new(cfg.schedule.clone(), guess.params.ts)?;
        let theta = pack_theta(&guess.params, cfg.theta_selection).0;
        let theta_scales = match &cfg.weights.theta_scales {
            Some(s) => s.clone(),
            None => theta.iter().map(|t| t.abs().max(cfg.weights.theta_scale_floor)).collect(),
        };
        let span = window.span_steps();
        Ok(Self {
            params: guess.params,
            prior_theta: theta.clone(),
            theta,
            theta_scales,
            window,
            inputs: VecDeque::with_capacity(span + 1),
            xi_oldest: guess.xi,
            xi_now: guess.xi,
            prior_xi: guess.xi,
            last_accepted: None,
            evicted: Vec::new(),
            rescale_flip: true,
            fill_index: None,
            edge_floor: Vec::new(),
            simplex: None,
            last_input: None,
            nonfinite_propagation: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &MheConfig {
        &self.cfg
    }

    pub fn params(&self) -> &EcmParameters {
        &self.params
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_names(&self) -> Vec<String> {
        self.cfg.theta_selection.names()
    }

    pub fn window(&self) -> &MeasurementWindow {
        &self.window
    }

    pub fn xi_now(&self) -> PlantState {
        self.xi_now
    }

    pub fn is_full(&self) -> bool {
        self.window.is_full()
    }

    pub fn prior(&self) -> (PlantState, &[f64]) {
        (self.prior_xi, &self.prior_theta)
    }

    /// Replaces the model parameters without touching the state estimate.
    /// Used for parameter hand-off from another estimator.
    pub fn set_parameters(&mut self, params: &EcmParameters) {
        self.params = params.clone();
        self.theta = pack_theta(&self.params, self.cfg.theta_selection).0;
    }

    /// Number of open-loop propagation steps that failed and were held.
    pub fn nonfinite_propagations(&self) -> usize {
        self.nonfinite_propagation
    }

    fn propagate(&mut self, s: PlantState, current: f64) -> PlantState {
        match ecm::step(&self.params, s, current) {
            Ok(next) => next,
            Err(_) => {
                self.nonfinite_propagation += 1;
                s
            }
        }
    }

    fn sample_weights(&self) -> Vec<f64> {
        let n = self.cfg.schedule.len();
        let base = self.cfg.weights.output.unwrap_or(1.0 / (n as f64).sqrt());
        let nch = self.cfg.schedule.channels();
        (0..nch)
            .flat_map(|c| {
                let cw = self.cfg.weights.channel.get(c).copied().unwrap_or(1.0);
                std::iter::repeat_n(base * cw, n)
            })
            .collect()
    }

    fn context<'a>(&'a self, inputs: &'a [f64], positions: &'a [usize]) -> Result<CostContext<'a>, MheError> {
        Ok(CostContext {
            lifter: Lifter::new(&self.window, inputs, positions)?,
            selection: self.cfg.theta_selection,
            params: self.params.clone(),
            measured: self.window.stacked(),
            sample_weights: self.sample_weights(),
            state_weight: self.cfg.weights.state,
            state_scales: self.cfg.weights.state_scales,
            theta_weight: self.cfg.weights.theta,
            theta_scales: &self.theta_scales,
            prior_xi: self.prior_xi,
            prior_theta: &self.prior_theta,
            barrier_m: self.cfg.barrier_m,
            probe_grid: &self.cfg.probe_grid,
            predicted: Vec::new(),
        })
    }

    /// Scores the decision vector `[Z, V1, theta...]` against the current
    /// window and anchors.
    pub fn cost(&self, x: &[f64]) -> Result<CostBreakdown, MheError> {
        if !self.window.is_full() {
            return Err(MheError::WindowNotFull);
        }
        if x.len() != 2 + self.cfg.theta_selection.arity() {
            return Err(
                EcmError::LengthMismatch { expected: 2 + self.cfg.theta_selection.arity(), got: x.len() }.into()
            );
        }
        let inputs: Vec<f64> = self.inputs.iter().copied().collect();
        let positions = self.window.positions().to_vec();
        let mut ctx = self.context(&inputs, &positions)?;
        Ok(ctx.eval(x))
    }

    /// Current decision vector at the window start.
    pub fn decision_vector(&self) -> Vec<f64> {
        let mut x = vec![self.xi_oldest.z, self.xi_oldest.v1];
        x.extend_from_slice(&self.theta);
        x
    }

    /// Ingests one base-rate sample and, once the window is full, runs one
    /// optimizer pass.
    pub fn step(&mut self, t: f64, y: f64, current: f64) -> Result<StepOutcome, MheError> {
        self.window.push(t, y)?;
        if let Some(prev) = self.last_input {
            self.xi_now = self.propagate(self.xi_now, prev);
        }
        self.last_input = Some(current);
        if self.inputs.len() == self.window.span_steps() + 1 {
            let evicted = self.inputs.pop_front().expect("non-empty");
            self.xi_oldest = self.propagate(self.xi_oldest, evicted);
            self.evicted.push(evicted);
        }
        self.inputs.push_back(current);

        let mut outcome = StepOutcome {
            t,
            xi_now: self.xi_now,
            theta: ThetaVector(self.theta.clone()),
            vb_hat: ecm::output(&self.params, self.xi_now, current),
            cost: None,
            barrier_active: false,
            optimized: false,
            evaluations: 0,
            barrier_hits: 0,
            nonfinite: 0,
            wall_time_s: 0.0,
        };
        if !self.window.is_full() {
            return Ok(outcome);
        }
        let pushed = self.window.pushed();
        let fill = *self.fill_index.get_or_insert(pushed);
        let every = match self.cfg.cadence {
            Cadence::Buffer => self.cfg.schedule.cadence(),
            Cadence::EverySample => 1,
        };
        if (pushed - fill) % every != 0 {
            return Ok(outcome);
        }
        self.optimize(&mut outcome)?;
        Ok(outcome)
    }

    fn optimize(&mut self, outcome: &mut StepOutcome) -> Result<(), MheError> {
        self.prior_xi = self.xi_oldest;
        self.prior_theta.clone_from(&self.theta);
        let x0 = self.decision_vector();
        let opts = &self.cfg.optimizer;
        let start = match (self.cfg.simplex_memory, self.simplex.take(), &self.last_accepted) {
            (SimplexMemory::Persist, Some(s), Some(prev)) => {
                // Each vertex's state rides the window forward under its own
                // parameters; a vertex that blows up is shifted rigidly.
                let delta: Vec<f64> = x0.iter().zip(prev).map(|(a, b)| a - b).collect();
                let mut cand = self.params.clone();
                let mut verts = s.vertices().to_vec();
                for v in verts.iter_mut().skip(1) {
                    write_theta(&mut cand, &v[2..], self.cfg.theta_selection)?;
                    let mut xi = PlantState::new(v[0], v[1]);
                    let ok = self.evicted.iter().all(|&i| match ecm::step(&cand, xi, i) {
                        Ok(n) => {
                            xi = n;
                            true
                        }
                        Err(_) => false,
                    });
                    if ok {
                        v[0] = xi.z;
                        v[1] = xi.v1;
                    } else {
                        v.iter_mut().zip(&delta).for_each(|(a, d)| *a += d);
                    }
                }
                verts[0].clone_from(&x0);
                Simplex::from_vertices(verts)?
            }
            (SimplexMemory::Rescaled, Some(s), Some(_)) => {
                let mut verts = vec![x0.clone()];
                for i in 0..x0.len() {
                    let ext = s.vertices().iter().map(|v| v[i]).fold(f64::NEG_INFINITY, f64::max)
                        - s.vertices().iter().map(|v| v[i]).fold(f64::INFINITY, f64::min);
                    let mut v = x0.clone();
                    let sign = if self.rescale_flip { -1.0 } else { 1.0 };
                    v[i] += sign * ext.max(self.edge_floor[i]);
                    verts.push(v);
                }
                self.rescale_flip = !self.rescale_flip;
                Simplex::from_vertices(verts)?
            }
            _ => {
                let s = Simplex::around(&x0, opts);
                self.edge_floor = s.vertices()[1..]
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (v[i] - x0[i]).abs() * self.cfg.min_edge_ratio)
                    .collect();
                s
            }
        };

        self.evicted.clear();
        self.inputs.make_contiguous();
        let inputs = self.inputs.as_slices().0;
        let positions = self.window.positions().to_vec();
        let mut ctx = self.context(inputs, &positions)?;
        let barrier_m = self.cfg.barrier_m;
        let (mut hits, mut nonfinite) = (0usize, 0usize);
        let result = minimize_simplex(
            |x| {
                let c = ctx.eval(x);
                if c.barrier > 0.0 {
                    hits += 1;
                }
                if c.nonfinite {
                    nonfinite += 1;
                }
                c.value
            },
            start,
            opts,
        )?;
        drop(ctx);

        let x = &result.x_best;
        self.xi_oldest = PlantState::new(x[0], x[1]);
        self.theta = x[2..].to_vec();
        write_theta(&mut self.params, &self.theta, self.cfg.theta_selection)?;
        let mut s = self.xi_oldest;
        let inputs: Vec<f64> = self.inputs.iter().copied().collect();
        for &current in &inputs[..inputs.len() - 1] {
            s = self.propagate(s, current);
        }
        self.xi_now = s;
        self.last_accepted = Some(result.x_best.clone());
        self.simplex = Some(result.simplex);

        outcome.xi_now = self.xi_now;
        outcome.theta = ThetaVector(self.theta.clone());
        outcome.vb_hat = ecm::output(&self.params, self.xi_now, *inputs.last().expect("non-empty"));
        outcome.cost = Some(result.f_best);
        outcome.barrier_active = result.f_best >= barrier_m;
        outcome.optimized = true;
        outcome.evaluations = result.evaluations;
        outcome.barrier_hits = hits;
        outcome.nonfinite = nonfinite;
        outcome.wall_time_s = result.wall_time_s;
        Ok(())
    }
}

/// One row of an estimator log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub t: f64,
    pub z_true: f64,
    pub vb_true: f64,
    pub outcome: StepOutcome,
}

/// Per-step log of one estimator over a truth log.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub label: String,
    pub theta_names: Vec<String>,
    /// Time of the first optimization.
    pub fill_time: Option<f64>,
    pub rows: Vec<StepRow>,
}

impl RunRecord {
    pub fn new(label: &str, theta_names: Vec<String>) -> Self {
        Self { label: label.to_string(), theta_names, fill_time: None, rows: Vec::new() }
    }

    pub fn push(&mut self, z_true: f64, vb_true: f64, outcome: StepOutcome) {
        if outcome.optimized && self.fill_time.is_none() {
            self.fill_time = Some(outcome.t);
        }
        self.rows.push(StepRow { t: outcome.t, z_true, vb_true, outcome });
    }

    /// Wall times of the steps that actually optimized.
    pub fn step_times(&self) -> Vec<f64> {
        self.rows.iter().filter(|r| r.outcome.optimized).map(|r| r.outcome.wall_time_s).collect()
    }

    pub fn optimized_steps(&self) -> usize {
        self.rows.iter().filter(|r| r.outcome.optimized).count()
    }

    /// Steps where any probed candidate hit the barrier or blew up.
    pub fn barrier_events(&self) -> usize {
        self.rows.iter().filter(|r| r.outcome.barrier_hits > 0 || r.outcome.nonfinite > 0).count()
    }

    pub fn accepted_barrier_steps(&self) -> usize {
        self.rows.iter().filter(|r| r.outcome.optimized && r.outcome.barrier_active).count()
    }

    pub fn unsafe_acceptances(&self) -> usize {
        self.rows.iter().filter(|r| r.outcome.unsafe_acceptance()).count()
    }
}

/// Replays a truth log through one estimator.
pub fn run(truth: &TruthLog, mut estimator: Estimator, label: &str) -> Result<RunRecord, MheError> {
    let mut record = RunRecord::new(label, estimator.theta_names());
    for r in &truth.records {
        let outcome = estimator.step(r.t, r.vb_noisy, r.current)?;
        record.push(r.z, r.vb_clean, outcome);
    }
    Ok(record)
}
