//! Measurement buffering under uniform, multi-rate and filter-augmented
//! schedules, plus the signal-variability index.
//!
//! Raw samples are retained at the base rate; the exposed window is a
//! newest-anchored selection of them. Nothing is ever interpolated.

mod filter;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use filter::{discretize_filter, is_schur_stable, DiscreteFilter, DiscreteTf, FilterSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WindowError {
    #[error("timestamp {t} does not exceed last stored timestamp {last}")]
    NonMonotonicTime { last: f64, t: f64 },
    #[error("insufficient history: need index {needed}, have {available} samples")]
    InsufficientHistory { needed: i64, available: usize },
    #[error("filter {0}: discrete pole on or outside the unit circle")]
    UnstablePole(String),
    #[error("filter {0}: improper or degenerate transfer function")]
    ImproperFilter(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

/// `count` consecutive buffered samples spaced `n_ts` base periods apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub count: usize,
    pub n_ts: usize,
}

/// Which base-rate samples form the exposed window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Uniform {
        #[serde(rename = "N")]
        n: usize,
        n_ts: usize,
    },
    /// Segments ordered newest first. The gap between two segments is the
    /// older segment's `n_ts`.
    MultiRate { segments: Vec<Segment> },
    Filtered {
        #[serde(rename = "N")]
        n: usize,
        n_ts: usize,
        filters: Vec<FilterSpec>,
    },
}

impl Schedule {
    pub fn uniform(n: usize, n_ts: usize) -> Self {
        Self::Uniform { n, n_ts }
    }

    /// Newest 5 samples 1 Ts apart, older 25 samples 20 Ts apart.
    pub fn paper_multi_rate() -> Self {
        Self::MultiRate { segments: vec![Segment { count: 5, n_ts: 1 }, Segment { count: 25, n_ts: 20 }] }
    }

    pub fn filtered(n: usize, n_ts: usize, filters: Vec<FilterSpec>) -> Self {
        Self::Filtered { n, n_ts, filters }
    }

    pub fn validate(&self) -> Result<(), WindowError> {
        let bad = |m: &str| Err(WindowError::InvalidSchedule(m.to_string()));
        match self {
            Self::Uniform { n, n_ts } | Self::Filtered { n, n_ts, .. } => {
                if *n == 0 || *n_ts == 0 {
                    return bad("N and n_ts must be positive");
                }
            }
            Self::MultiRate { segments } => {
                if segments.is_empty() {
                    return bad("multi_rate needs at least one segment");
                }
                if segments.iter().any(|s| s.count == 0 || s.n_ts == 0) {
                    return bad("segment count and n_ts must be positive");
                }
            }
        }
        Ok(())
    }

    /// Buffer length N.
    pub fn len(&self) -> usize {
        match self {
            Self::Uniform { n, .. } | Self::Filtered { n, .. } => *n,
            Self::MultiRate { segments } => segments.iter().map(|s| s.count).sum(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn filters(&self) -> &[FilterSpec] {
        match self {
            Self::Filtered { filters, .. } => filters,
            _ => &[],
        }
    }

    pub fn channels(&self) -> usize {
        1 + self.filters().len()
    }

    /// Gaps between consecutive exposed samples, newest first, in base periods.
    pub fn gaps(&self) -> Vec<usize> {
        match self {
            Self::Uniform { n, n_ts } | Self::Filtered { n, n_ts, .. } => vec![*n_ts; n - 1],
            Self::MultiRate { segments } => {
                let mut out = Vec::with_capacity(self.len());
                for (i, s) in segments.iter().enumerate() {
                    let c = if i == 0 { s.count - 1 } else { s.count };
                    out.extend(std::iter::repeat_n(s.n_ts, c));
                }
                out
            }
        }
    }

    /// Base periods covered by the window, newest minus oldest sample.
    pub fn span_steps(&self) -> usize {
        self.gaps().iter().sum()
    }

    pub fn span_s(&self, ts: f64) -> f64 {
        self.span_steps() as f64 * ts
    }

    /// Base-rate positions of the exposed samples relative to the oldest one,
    /// oldest first: starts at 0 and ends at `span_steps()`.
    pub fn positions(&self) -> Vec<usize> {
        let gaps = self.gaps();
        let span: usize = gaps.iter().sum();
        let mut back = 0;
        let mut out = vec![span];
        for g in gaps {
            back += g;
            out.push(span - back);
        }
        out.reverse();
        out
    }

    /// Base periods between buffer shifts: the spacing of the newest segment.
    pub fn cadence(&self) -> usize {
        match self {
            Self::Uniform { n_ts, .. } | Self::Filtered { n_ts, .. } => *n_ts,
            Self::MultiRate { segments } => segments[0].n_ts,
        }
    }

    /// Short human label such as `uniform N=30 n_ts=20`.
    pub fn summary(&self) -> String {
        match self {
            Self::Uniform { n, n_ts } => format!("uniform N={n} n_ts={n_ts}"),
            Self::MultiRate { segments } => {
                let segs: Vec<String> = segments.iter().map(|s| format!("({},{})", s.count, s.n_ts)).collect();
                format!("multi_rate [{}]", segs.join(","))
            }
            Self::Filtered { n, n_ts, filters } => {
                let labels: Vec<&str> = filters.iter().map(|f| f.label.as_str()).collect();
                format!("filtered N={n} n_ts={n_ts} [{}]", labels.join(","))
            }
        }
    }
}

/// Sample buffer owned by one estimator.
#[derive(Debug, Clone)]
pub struct MeasurementWindow {
    schedule: Schedule,
    positions: Vec<usize>,
    span: usize,
    times: VecDeque<f64>,
    /// `channels[0]` is the raw output, `channels[1..]` the filtered copies.
    channels: Vec<VecDeque<f64>>,
    filters: Vec<DiscreteFilter>,
    /// Filter state before consuming each retained sample, per filter.
    pre_states: Vec<VecDeque<Vec<f64>>>,
    pushed: usize,
}

impl MeasurementWindow {
    pub fn new(schedule: Schedule, ts: f64) -> Result<Self, WindowError> {
        schedule.validate()?;
        let filters = schedule
            .filters()
            .iter()
            .map(|f| discretize_filter(f, ts).map(DiscreteFilter::new))
            .collect::<Result<Vec<_>, _>>()?;
        let positions = schedule.positions();
        let span = schedule.span_steps();
        let nf = filters.len();
        Ok(Self {
            schedule,
            positions,
            span,
            times: VecDeque::with_capacity(span + 1),
            channels: vec![VecDeque::with_capacity(span + 1); 1 + nf],
            filters,
            pre_states: vec![VecDeque::with_capacity(span + 1); nf],
            pushed: 0,
        })
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn push(&mut self, t: f64, y: f64) -> Result<(), WindowError> {
        if let Some(&last) = self.times.back() {
            if !(t > last) {
                return Err(WindowError::NonMonotonicTime { last, t });
            }
        }
        if self.times.len() == self.span + 1 {
            self.times.pop_front();
            for c in &mut self.channels {
                c.pop_front();
            }
            for s in &mut self.pre_states {
                s.pop_front();
            }
        }
        self.times.push_back(t);
        self.channels[0].push_back(y);
        for (i, f) in self.filters.iter_mut().enumerate() {
            self.pre_states[i].push_back(f.state().to_vec());
            self.channels[i + 1].push_back(f.step(y));
        }
        self.pushed += 1;
        Ok(())
    }

    pub fn is_full(&self) -> bool {
        self.times.len() == self.span + 1
    }

    /// Total samples pushed since construction.
    pub fn pushed(&self) -> usize {
        self.pushed
    }

    pub fn span_steps(&self) -> usize {
        self.span
    }

    pub fn latest_time(&self) -> Option<f64> {
        self.times.back().copied()
    }

    /// Timestamp of the oldest exposed sample, once full.
    pub fn start_time(&self) -> Option<f64> {
        self.is_full().then(|| self.times[0])
    }

    /// Positions of the exposed samples relative to the window start.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        if !self.is_full() {
            return Vec::new();
        }
        self.positions.iter().map(|&p| self.times[p]).collect()
    }

    /// Exposed values of one channel, oldest first.
    pub fn values(&self, channel: usize) -> Vec<f64> {
        if !self.is_full() {
            return Vec::new();
        }
        self.positions.iter().map(|&p| self.channels[channel][p]).collect()
    }

    /// All exposed values stacked channel by channel.
    pub fn stacked(&self) -> Vec<f64> {
        (0..self.channels.len()).flat_map(|c| self.values(c)).collect()
    }

    pub fn filters(&self) -> &[DiscreteFilter] {
        &self.filters
    }

    /// Internal state of measurement filter `i` just before it consumed the
    /// window's oldest sample.
    pub fn filter_state_at_start(&self, i: usize) -> Option<&[f64]> {
        if !self.is_full() {
            return None;
        }
        self.pre_states[i].front().map(Vec::as_slice)
    }
}

/// Signal variability at base-rate index `k`:
/// `sum_{i=1}^{N-1} |y[k-i n] - y[k-(i+1) n]| + |y[k+q] - y[k-n]|`.
pub fn variability(y: &[f64], k: usize, n: usize, n_ts: usize, q: usize) -> Result<f64, WindowError> {
    if n == 0 || n_ts == 0 || q >= n_ts {
        return Err(WindowError::InvalidSchedule(format!("N={n}, n_ts={n_ts}, q={q}")));
    }
    if k < n * n_ts {
        return Err(WindowError::InsufficientHistory { needed: k as i64 - (n * n_ts) as i64, available: y.len() });
    }
    if k + q >= y.len() {
        return Err(WindowError::InsufficientHistory { needed: (k + q) as i64, available: y.len() });
    }
    let mut sum = 0.0;
    for i in 1..n {
        sum += (y[k - i * n_ts] - y[k - (i + 1) * n_ts]).abs();
    }
    sum += (y[k + q] - y[k - n_ts]).abs();
    Ok(sum)
}

/// Per-sample variability series from index `start` on, for the
/// downsampling grid `k = origin (mod n_ts)`. At index `j`,
/// `q = (j - origin) mod n_ts` and `k = j - q`.
pub fn variability_series(
    y: &[f64],
    n: usize,
    n_ts: usize,
    origin: usize,
    start: usize,
) -> Result<Vec<(usize, f64)>, WindowError> {
    if n_ts == 0 || origin >= n_ts {
        return Err(WindowError::InvalidSchedule(format!("grid origin {origin} with n_ts={n_ts}")));
    }
    let mut out = Vec::with_capacity(y.len().saturating_sub(start));
    for j in start..y.len() {
        let q = (j + n_ts - origin) % n_ts;
        if j < q {
            return Err(WindowError::InsufficientHistory { needed: j as i64 - q as i64, available: y.len() });
        }
        out.push((j, variability(y, j - q, n, n_ts, q)?));
    }
    Ok(out)
}

/// Mean variability from `start` on, averaged over every grid origin.
///
/// A single grid samples the same phases of any input whose period is a
/// multiple of `n_ts`, so its mean depends on where the grid happens to
/// start; this average does not.
pub fn phase_averaged_mean(y: &[f64], n: usize, n_ts: usize, start: usize) -> Result<f64, WindowError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for origin in 0..n_ts {
        for (_, d) in variability_series(y, n, n_ts, origin, start)? {
            sum += d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(WindowError::InsufficientHistory { needed: start as i64, available: y.len() });
    }
    Ok(sum / count as f64)
}

/// First index at which every requested `n_ts` has a full history on every
/// grid origin.
pub fn variability_start(n: usize, factors: &[usize]) -> usize {
    factors.iter().map(|&f| (n * f + f).saturating_sub(1)).max().unwrap_or(0)
}
