//! Derivative-free Nelder-Mead simplex minimizer with a hard iteration
//! budget.
//!
//! One iteration is one reflect / expand / contract / shrink decision, the
//! same unit fminsearch counts. The vertices touched by a shrink are only
//! evaluated when the next iteration needs them, so a single iteration costs
//! at most `n + 3` objective calls including the initial simplex.
//!
//! A [`Simplex`] can be handed back in with [`minimize_simplex`], which lets a
//! caller spread the optimization over successive calls whose objective
//! drifts (every vertex is re-evaluated at the start of each call).

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("objective returned a non-finite value {value} at {x:?}")]
    NonFiniteObjective { x: Vec<f64>, value: f64 },
    #[error("invalid simplex options: {0}")]
    InvalidOptions(String),
    #[error("degenerate start: {0}")]
    BadStart(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimplexOptions {
    /// Iteration budget K.
    pub max_iterations: usize,
    pub reflection: f64,
    pub expansion: f64,
    pub contraction: f64,
    pub shrink: f64,
    /// Initial edge length relative to each nonzero coordinate.
    pub rel_step: f64,
    /// Initial edge length for coordinates equal to zero.
    pub zero_step: f64,
    pub f_tol: Option<f64>,
    pub x_tol: Option<f64>,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            max_iterations: 1,
            reflection: 1.0,
            expansion: 2.0,
            contraction: 0.5,
            shrink: 0.5,
            rel_step: 0.05,
            zero_step: 0.00025,
            f_tol: None,
            x_tol: None,
        }
    }
}

impl SimplexOptions {
    pub fn with_iterations(k: usize) -> Self {
        Self { max_iterations: k, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), OptimError> {
        let ok = self.reflection > 0.0
            && self.expansion > self.reflection
            && self.contraction > 0.0
            && self.contraction < 1.0
            && self.shrink > 0.0
            && self.shrink < 1.0
            && self.rel_step > 0.0
            && self.zero_step > 0.0;
        if ok {
            Ok(())
        } else {
            Err(OptimError::InvalidOptions(format!("{self:?}")))
        }
    }
}

/// `n + 1` vertices in `n` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Simplex {
    vertices: Vec<Vec<f64>>,
}

impl Simplex {
    pub fn from_vertices(vertices: Vec<Vec<f64>>) -> Result<Self, OptimError> {
        let n = vertices.first().map(Vec::len).unwrap_or(0);
        if vertices.len() != n + 1 || vertices.iter().any(|v| v.len() != n) {
            return Err(OptimError::BadStart(format!(
                "need n+1 vertices of dimension n, got {} of {n}",
                vertices.len()
            )));
        }
        Ok(Self { vertices })
    }

    /// fminsearch-style start: `x0` plus one vertex per coordinate, displaced
    /// by `rel_step * x0[i]` (or `zero_step` when `x0[i] == 0`).
    pub fn around(x0: &[f64], opts: &SimplexOptions) -> Self {
        let mut vertices = Vec::with_capacity(x0.len() + 1);
        vertices.push(x0.to_vec());
        for i in 0..x0.len() {
            let mut v = x0.to_vec();
            v[i] = if x0[i] != 0.0 { (1.0 + opts.rel_step) * x0[i] } else { opts.zero_step };
            vertices.push(v);
        }
        Self { vertices }
    }

    pub fn dim(&self) -> usize {
        self.vertices.len() - 1
    }

    pub fn vertices(&self) -> &[Vec<f64>] {
        &self.vertices
    }

    /// Moves every vertex by `delta`.
    pub fn translate(&mut self, delta: &[f64]) {
        for v in &mut self.vertices {
            for (x, d) in v.iter_mut().zip(delta) {
                *x += d;
            }
        }
    }

    /// Largest infinity-norm distance from the first vertex.
    pub fn diameter(&self) -> f64 {
        let v0 = &self.vertices[0];
        self.vertices[1..].iter().flat_map(|v| v.iter().zip(v0).map(|(a, b)| (a - b).abs())).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimResult {
    pub x_best: Vec<f64>,
    pub f_best: f64,
    pub iterations_used: usize,
    pub evaluations: usize,
    pub wall_time_s: f64,
    /// Final simplex, best vertex first.
    pub simplex: Simplex,
}

pub fn minimize<F>(f: F, x0: &[f64], opts: &SimplexOptions) -> Result<OptimResult, OptimError>
where
    F: FnMut(&[f64]) -> f64,
{
    opts.validate()?;
    if x0.is_empty() {
        return Err(OptimError::BadStart("empty decision vector".into()));
    }
    minimize_simplex(f, Simplex::around(x0, opts), opts)
}

struct Evaluator<F> {
    f: F,
    evaluations: usize,
    best_x: Vec<f64>,
    best_f: f64,
}

impl<F: FnMut(&[f64]) -> f64> Evaluator<F> {
    fn eval(&mut self, x: &[f64]) -> Result<f64, OptimError> {
        let value = (self.f)(x);
        self.evaluations += 1;
        if !value.is_finite() {
            return Err(OptimError::NonFiniteObjective { x: x.to_vec(), value });
        }
        if value < self.best_f {
            self.best_f = value;
            self.best_x.clear();
            self.best_x.extend_from_slice(x);
        }
        Ok(value)
    }
}

/// Runs at most `opts.max_iterations` iterations starting from `simplex`.
/// Vertex 0 is evaluated first, so on a flat objective it is returned.
pub fn minimize_simplex<F>(f: F, simplex: Simplex, opts: &SimplexOptions) -> Result<OptimResult, OptimError>
where
    F: FnMut(&[f64]) -> f64,
{
    opts.validate()?;
    let started = Instant::now();
    let n = simplex.dim();
    if n == 0 {
        return Err(OptimError::BadStart("empty decision vector".into()));
    }
    let mut ev = Evaluator { f, evaluations: 0, best_x: Vec::new(), best_f: f64::INFINITY };
    let mut verts = simplex.vertices;
    let mut vals: Vec<Option<f64>> = vec![None; n + 1];
    let mut iterations = 0;
    let mut centroid = vec![0.0; n];
    let (rho, chi, psi, sigma) = (opts.reflection, opts.expansion, opts.contraction, opts.shrink);

    // Ordering is kept in an index permutation; ties keep insertion order.
    let mut order: Vec<usize> = (0..=n).collect();
    loop {
        for i in 0..=n {
            if vals[i].is_none() {
                vals[i] = Some(ev.eval(&verts[i])?);
            }
        }
        let value = |i: usize| vals[i].expect("evaluated");
        order.sort_by(|&a, &b| value(a).total_cmp(&value(b)));
        if iterations >= opts.max_iterations || converged(&verts, &vals, &order, opts) {
            break;
        }
        let best = order[0];
        let worst = order[n];
        let second_worst = order[n - 1];
        let (f_best, f_worst, f_second) = (value(best), value(worst), value(second_worst));

        centroid.iter_mut().for_each(|c| *c = 0.0);
        for &i in &order[..n] {
            for (c, x) in centroid.iter_mut().zip(&verts[i]) {
                *c += x / n as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> { centroid.iter().zip(&verts[worst]).map(|(c, w)| c + t * (c - w)).collect() };

        let xr = along(rho);
        let fr = ev.eval(&xr)?;
        let mut shrink = false;
        if fr < f_best {
            let xe = along(rho * chi);
            let fe = ev.eval(&xe)?;
            if fe < fr {
                verts[worst] = xe;
                vals[worst] = Some(fe);
            } else {
                verts[worst] = xr;
                vals[worst] = Some(fr);
            }
        } else if fr < f_second {
            verts[worst] = xr;
            vals[worst] = Some(fr);
        } else if fr < f_worst {
            let xc = along(psi * rho);
            let fc = ev.eval(&xc)?;
            if fc <= fr {
                verts[worst] = xc;
                vals[worst] = Some(fc);
            } else {
                shrink = true;
            }
        } else {
            let xcc = along(-psi);
            let fcc = ev.eval(&xcc)?;
            if fcc < f_worst {
                verts[worst] = xcc;
                vals[worst] = Some(fcc);
            } else {
                shrink = true;
            }
        }
        if shrink {
            let anchor = verts[best].clone();
            for &i in &order[1..] {
                for (x, a) in verts[i].iter_mut().zip(&anchor) {
                    *x = a + sigma * (*x - a);
                }
                vals[i] = None;
            }
        }
        iterations += 1;
        if vals.iter().any(Option::is_none) && iterations >= opts.max_iterations {
            break;
        }
    }

    // Best first; vertices pending evaluation after a final shrink go last.
    let mut idx: Vec<usize> = (0..=n).collect();
    idx.sort_by(|&a, &b| match (vals[a], vals[b]) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.cmp(&b),
    });
    let simplex = Simplex { vertices: idx.into_iter().map(|i| verts[i].clone()).collect() };
    Ok(OptimResult {
        x_best: ev.best_x,
        f_best: ev.best_f,
        iterations_used: iterations,
        evaluations: ev.evaluations,
        wall_time_s: started.elapsed().as_secs_f64(),
        simplex,
    })
}

fn converged(verts: &[Vec<f64>], vals: &[Option<f64>], order: &[usize], opts: &SimplexOptions) -> bool {
    if opts.f_tol.is_none() && opts.x_tol.is_none() {
        return false;
    }
    let b = order[0];
    let fb = vals[b].unwrap_or(f64::INFINITY);
    let f_ok =
        opts.f_tol.is_none_or(|tol| order[1..].iter().all(|&i| (vals[i].unwrap_or(f64::INFINITY) - fb).abs() <= tol));
    let x_ok = opts.x_tol.is_none_or(|tol| {
        order[1..].iter().all(|&i| verts[i].iter().zip(&verts[b]).all(|(a, c)| (a - c).abs() <= tol))
    });
    f_ok && x_ok
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_dimensional_parabola() {
        let r = minimize(|x| (x[0] - 1.0).powi(2), &[0.0], &SimplexOptions::with_iterations(200)).unwrap();
        assert!((r.x_best[0] - 1.0).abs() < 1e-6, "{:?}", r.x_best);
        assert_eq!(r.iterations_used, 200);
    }

    #[test]
    fn flat_objective_returns_start() {
        let x0 = [0.3, -2.0, 0.0];
        let r = minimize(|_| 4.2, &x0, &SimplexOptions::with_iterations(1)).unwrap();
        assert_eq!(r.x_best, x0.to_vec());
        assert_eq!(r.f_best, 4.2);
    }

    #[test]
    fn single_iteration_budget() {
        for n in 1..=14 {
            let x0: Vec<f64> = (0..n).map(|i| i as f64 * 0.7 - 2.0).collect();
            // Several landscapes so every branch (incl. shrink) is hit somewhere.
            let objectives: Vec<Box<dyn Fn(&[f64]) -> f64>> = vec![
                Box::new(|x: &[f64]| x.iter().map(|v| v * v).sum()),
                Box::new(|x: &[f64]| -x.iter().map(|v| v * v).sum::<f64>()),
                Box::new(|x: &[f64]| x.iter().map(|v| (v - 1e-3).abs()).sum()),
                Box::new(|x: &[f64]| x.iter().map(|v| (v * 40.0).sin()).sum()),
            ];
            for f in &objectives {
                let r = minimize(f, &x0, &SimplexOptions::with_iterations(1)).unwrap();
                assert_eq!(r.iterations_used, 1);
                assert!(r.evaluations <= n + 3, "n={n} evals={}", r.evaluations);
            }
        }
    }

    #[test]
    fn shrink_is_deferred_but_not_lost() {
        // Every point off the starting vertices is worse than all of them,
        // so reflection and both contractions fail and the simplex shrinks.
        let f = |x: &[f64]| match (x[0], x[1]) {
            (0.0, 0.0) => 0.0,
            (1.0, 0.0) | (0.0, 1.0) => 1.0,
            _ => 2.0,
        };
        let opts = SimplexOptions::with_iterations(1);
        let start = Simplex::from_vertices(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let r = minimize_simplex(f, start, &opts).unwrap();
        assert_eq!(r.x_best, vec![0.0, 0.0]);
        assert!(r.evaluations <= 5);
        // Shrunk vertices were pulled halfway toward the best vertex.
        assert_eq!(r.simplex.vertices()[1..], [vec![0.5, 0.0], vec![0.0, 0.5]]);
    }

    #[test]
    fn convex_quadratic_in_fourteen_dimensions() {
        let c: Vec<f64> = (0..14).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        let d: Vec<f64> = (0..14).map(|i| 1.0 + i as f64 * 0.5).collect();
        let f = |x: &[f64]| x.iter().zip(&c).zip(&d).map(|((x, c), d)| d * (x - c).powi(2)).sum::<f64>();
        let r = minimize(f, &[0.5; 14], &SimplexOptions::with_iterations(20_000)).unwrap();
        for (a, b) in r.x_best.iter().zip(&c) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let r = minimize(|x| if x[0] > 0.0 { f64::NAN } else { 1.0 }, &[1.0], &SimplexOptions::default());
        assert!(matches!(r, Err(OptimError::NonFiniteObjective { .. })));
        let big = minimize(|_| 1e5, &[1.0], &SimplexOptions::default()).unwrap();
        assert_eq!(big.f_best, 1e5);
    }

    #[test]
    fn early_stop_on_tolerances() {
        let opts =
            SimplexOptions { max_iterations: 100_000, f_tol: Some(1e-10), x_tol: Some(1e-8), ..Default::default() };
        let r = minimize(|x| (x[0] - 3.0).powi(2) + (x[1] + 1.0).powi(2), &[1.0, 1.0], &opts).unwrap();
        assert!(r.iterations_used < 100_000);
        assert!((r.x_best[0] - 3.0).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_options() {
        let opts = SimplexOptions { contraction: 1.5, ..Default::default() };
        assert!(minimize(|x| x[0], &[1.0], &opts).is_err());
        let opts = SimplexOptions { expansion: 0.5, ..Default::default() };
        assert!(minimize(|x| x[0], &[1.0], &opts).is_err());
        assert!(minimize(|x| x[0], &[], &SimplexOptions::default()).is_err());
    }

    #[test]
    fn resumed_simplex_continues_progress() {
        let f = |x: &[f64]| (x[0] - 2.0).powi(2) + 3.0 * (x[1] - 0.5).powi(2);
        let opts = SimplexOptions::with_iterations(1);
        let mut simplex = Simplex::around(&[1.0, 1.0], &opts);
        let mut last = f64::INFINITY;
        for _ in 0..400 {
            let r = minimize_simplex(f, simplex, &opts).unwrap();
            assert!(r.f_best <= last + 1e-15);
            last = r.f_best;
            simplex = r.simplex;
        }
        assert!(last < 1e-10, "{last}");
    }

    proptest! {
        #[test]
        fn deterministic(seed in 0u64..1000) {
            let c = (seed as f64 * 0.37).sin();
            let f = |x: &[f64]| (x[0] - c).powi(2) + (x[1] * x[0]).cos();
            let opts = SimplexOptions::with_iterations(25);
            let a = minimize(f, &[0.5, 0.2], &opts).unwrap();
            let b = minimize(f, &[0.5, 0.2], &opts).unwrap();
            prop_assert_eq!(a.x_best, b.x_best);
            prop_assert_eq!(a.f_best, b.f_best);
            prop_assert_eq!(a.evaluations, b.evaluations);
            prop_assert_eq!(a.simplex, b.simplex);
        }

        #[test]
        fn best_seen_monotone_in_budget(
            centre in prop::collection::vec(-3.0f64..3.0, 1..6),
            wiggle in 0.0f64..2.0,
            k in 0usize..40,
        ) {
            let f = |x: &[f64]| -> f64 {
                x.iter().zip(&centre).map(|(a, c)| (a - c).powi(2) + wiggle * (3.0 * a).sin()).sum()
            };
            let x0 = vec![0.5; centre.len()];
            let a = minimize(f, &x0, &SimplexOptions::with_iterations(k)).unwrap();
            let b = minimize(f, &x0, &SimplexOptions::with_iterations(k + 1)).unwrap();
            prop_assert!(b.f_best <= a.f_best);
            prop_assert!(a.f_best <= f(&x0));
        }
    }
}
