//! Fixed-point engines over flat `f64` states: Picard, Anderson and
//! limited-memory Broyden.
//!
//! All three stop on the relative change made by one application of the
//! map, `||f(x_k) - x_k|| / max(||f(x_k)||, 1e-12) <= tol`, and return
//! `f(x_k)`. For Picard this is the change between consecutive iterates.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, norm, vec_sub};

/// Floor on the denominator of the relative-change metric.
pub const NORM_FLOOR: f64 = 1e-12;

/// Step halvings tried by the Broyden safeguard before falling back to a
/// Picard step.
const BROYDEN_HALVINGS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Picard,
    #[default]
    Anderson,
    Broyden,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::Picard => "picard",
            Engine::Anderson => "anderson",
            Engine::Broyden => "broyden",
        }
    }
}

impl std::str::FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "picard" => Ok(Engine::Picard),
            "anderson" => Ok(Engine::Anderson),
            "broyden" => Ok(Engine::Broyden),
            other => Err(Error::invalid(format!("unknown engine {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub engine: Engine,
    /// History length for Anderson and Broyden.
    pub m: usize,
    /// Anderson relaxation.
    pub beta: f64,
    /// Ridge on the Anderson normal equations, relative to their mean
    /// diagonal.
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig::forward()
    }
}

impl SolverConfig {
    pub fn forward() -> Self {
        SolverConfig { engine: Engine::Anderson, m: 5, beta: 1.0, lambda: 1e-10, tol: 1e-3, max_iter: 100 }
    }

    pub fn backward() -> Self {
        SolverConfig { max_iter: 50, ..SolverConfig::forward() }
    }

    pub fn with_engine(self, engine: Engine) -> Self {
        SolverConfig { engine, ..self }
    }

    pub fn with_max_iter(self, max_iter: usize) -> Self {
        SolverConfig { max_iter, ..self }
    }

    pub fn with_tol(self, tol: f64) -> Self {
        SolverConfig { tol, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::invalid("solver memory m must be >= 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid(format!("solver tol must be > 0, got {}", self.tol)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::invalid(format!("relaxation beta must lie in (0, 1], got {}", self.beta)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid(format!("ridge lambda must be >= 0, got {}", self.lambda)));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointResult {
    /// Last iterate.
    pub point: Vec<f64>,
    /// Iterate with the smallest relative change seen.
    pub best_point: Vec<f64>,
    pub best_residual: f64,
    /// Relative change per iteration.
    pub residual_history: Vec<f64>,
    /// Wall-clock seconds elapsed at the end of each iteration.
    pub cumulative_seconds: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub seconds: f64,
}

impl FixedPointResult {
    pub fn last_residual(&self) -> f64 {
        self.residual_history.last().copied().unwrap_or(f64::INFINITY)
    }

    /// `iteration,residual,cumulative_seconds` rows, iterations from 1.
    pub fn write_residual_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "residual", "cumulative_seconds"])?;
        for (i, (r, t)) in self.residual_history.iter().zip(&self.cumulative_seconds).enumerate() {
            w.write_record(&[(i + 1).to_string(), format!("{r:e}"), format!("{t:.6}")])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_residual_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_residual_csv(std::fs::File::create(path)?)
    }
}

/// Called after every iteration with the 1-based iteration number and the
/// new iterate.
pub type Observer<'a> = &'a mut dyn FnMut(usize, &[f64]);

fn relative_change(next: &[f64], prev: &[f64]) -> f64 {
    let diff: f64 = next.iter().zip(prev).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    diff / norm(next).max(NORM_FLOOR)
}

fn check_finite(x: &[f64], engine: &'static str, iteration: usize, last_residual: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Diverged { engine, iteration, last_residual })
    }
}

/// Shared bookkeeping for all engines.
struct Tracker<'a> {
    cfg: SolverConfig,
    start: Instant,
    history: Vec<f64>,
    times: Vec<f64>,
    best_point: Vec<f64>,
    best_residual: f64,
    observer: Option<Observer<'a>>,
}

impl<'a> Tracker<'a> {
    fn new(cfg: SolverConfig, x0: &[f64], observer: Option<Observer<'a>>) -> Self {
        Tracker {
            cfg,
            start: Instant::now(),
            history: Vec::new(),
            times: Vec::new(),
            best_point: x0.to_vec(),
            best_residual: f64::INFINITY,
            observer,
        }
    }

    fn last(&self) -> f64 {
        self.history.last().copied().unwrap_or(f64::NAN)
    }

    /// Records one step; returns true when the stopping rule fires.
    fn record(&mut self, next: &[f64], prev: &[f64], engine: &'static str) -> Result<bool> {
        let k = self.history.len() + 1;
        check_finite(next, engine, k, self.last())?;
        let r = relative_change(next, prev);
        self.history.push(r);
        self.times.push(self.start.elapsed().as_secs_f64());
        if r < self.best_residual {
            self.best_residual = r;
            self.best_point.clear();
            self.best_point.extend_from_slice(next);
        }
        if let Some(obs) = self.observer.as_mut() {
            obs(k, next);
        }
        Ok(r <= self.cfg.tol)
    }

    fn finish(self, point: Vec<f64>, engine: &'static str) -> FixedPointResult {
        let iterations = self.history.len();
        let converged = self.history.last().is_some_and(|&r| r <= self.cfg.tol);
        if !converged {
            debug!("{engine}: stopped after {iterations} iterations, residual {:e}", self.last());
        }
        FixedPointResult {
            point,
            best_point: self.best_point,
            best_residual: self.best_residual,
            residual_history: self.history,
            cumulative_seconds: self.times,
            iterations,
            converged,
            seconds: self.start.elapsed().as_secs_f64(),
        }
    }
}

/// Runs the engine selected in `cfg`.
pub fn solve<F>(map: F, x0: &[f64], cfg: &SolverConfig) -> Result<FixedPointResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    solve_observed(map, x0, cfg, None)
}

pub fn solve_observed<F>(map: F, x0: &[f64], cfg: &SolverConfig, observer: Option<Observer<'_>>) -> Result<FixedPointResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    match cfg.engine {
        Engine::Picard => picard(map, x0, cfg, observer),
        Engine::Anderson => anderson(map, x0, cfg, observer),
        Engine::Broyden => broyden(map, x0, cfg, observer),
    }
}

pub fn solve_picard<F>(map: F, x0: &[f64], cfg: &SolverConfig) -> Result<FixedPointResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    solve(map, x0, &cfg.with_engine(Engine::Picard))
}

pub fn solve_anderson<F>(map: F, x0: &[f64], cfg: &SolverConfig) -> Result<FixedPointResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    solve(map, x0, &cfg.with_engine(Engine::Anderson))
}

pub fn solve_broyden<F>(map: F, x0: &[f64], cfg: &SolverConfig) -> Result<FixedPointResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    solve(map, x0, &cfg.with_engine(Engine::Broyden))
}

fn picard<F>(mut map: F, x0: &[f64], cfg: &SolverConfig, observer: Option<Observer<'_>>) -> Result<FixedPointResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut t = Tracker::new(*cfg, x0, observer);
    let mut x = x0.to_vec();
    for _ in 0..cfg.max_iter {
        let next = map(&x)?;
        if next.len() != x.len() {
            return Err(Error::LengthMismatch { expected: x.len(), got: next.len() });
        }
        let done = t.record(&next, &x, "picard")?;
        x = next;
        if done {
            break;
        }
    }
    Ok(t.finish(x, "picard"))
}

/// Mixing weights minimizing `||G a||^2 + lambda' ||a||^2` subject to
/// `sum(a) = 1`, from the bordered normal equations. `lambda'` is
/// `lambda` times the mean diagonal of `G^T G`. Column 0 is the most
/// recent residual; a singular system yields `e_0`.
pub fn anderson_alpha(columns: &[Vec<f64>], lambda: f64) -> Vec<f64> {
    let n = columns.len();
    if n <= 1 {
        return vec![1.0; n];
    }
    let mut gram = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = dot(&columns[i], &columns[j]);
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    let scale = gram.diagonal().mean();
    let ridge = lambda * if scale > 0.0 { scale } else { 1.0 };
    let mut bordered = DMatrix::<f64>::zeros(n + 1, n + 1);
    bordered.view_mut((0, 0), (n, n)).copy_from(&gram);
    for i in 0..n {
        bordered[(i, i)] += ridge;
        bordered[(i, n)] = 1.0;
        bordered[(n, i)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(n + 1);
    rhs[n] = 1.0;
    let solved = bordered.lu().solve(&rhs).filter(|s| s.iter().all(|v| v.is_finite()));
    match solved {
        Some(s) if s.rows(0, n).iter().all(|a| a.abs() < 1e8) => s.rows(0, n).iter().copied().collect(),
        _ => {
            debug!("anderson: singular mixing system with {n} columns, taking a plain step");
            let mut e0 = vec![0.0; n];
            e0[0] = 1.0;
            e0
        }
    }
}

fn anderson<F>(mut map: F, x0: &[f64], cfg: &SolverConfig, observer: Option<Observer<'_>>) -> Result<FixedPointResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut t = Tracker::new(*cfg, x0, observer);
    let mut x = x0.to_vec();
    // Most recent first.
    let mut xs: Vec<Vec<f64>> = Vec::with_capacity(cfg.m);
    let mut fs: Vec<Vec<f64>> = Vec::with_capacity(cfg.m);
    let mut gs: Vec<Vec<f64>> = Vec::with_capacity(cfg.m);
    for _ in 0..cfg.max_iter {
        let f = map(&x)?;
        if f.len() != x.len() {
            return Err(Error::LengthMismatch { expected: x.len(), got: f.len() });
        }
        if xs.len() == cfg.m {
            xs.pop();
            fs.pop();
            gs.pop();
        }
        // Convergence is judged on the plain step from `x`, whose image is
        // returned; the mixed point only feeds the next evaluation.
        if t.record(&f, &x, "anderson")? {
            return Ok(t.finish(f, "anderson"));
        }
        gs.insert(0, vec_sub(&f, &x));
        xs.insert(0, x.clone());
        fs.insert(0, f);
        let alpha = anderson_alpha(&gs, cfg.lambda);
        let mut next = vec![0.0; x.len()];
        for (a, (xi, fi)) in alpha.iter().zip(xs.iter().zip(&fs)) {
            if cfg.beta == 1.0 {
                crate::tensor::vec_axpy(&mut next, *a, fi);
            } else {
                crate::tensor::vec_axpy(&mut next, a * (1.0 - cfg.beta), xi);
                crate::tensor::vec_axpy(&mut next, a * cfg.beta, fi);
            }
        }
        if t.history.len() == cfg.max_iter {
            let last = fs.swap_remove(0);
            return Ok(t.finish(last, "anderson"));
        }
        x = next;
    }
    unreachable!("anderson loop always returns")
}

/// Inverse Jacobian of `g(x) = f(x) - x` kept as `-I + sum u_i v_i^T`.
struct LowRankInverse {
    us: Vec<Vec<f64>>,
    vs: Vec<Vec<f64>>,
    m: usize,
}

impl LowRankInverse {
    fn apply(&self, z: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = z.iter().map(|v| -v).collect();
        for (u, v) in self.us.iter().zip(&self.vs) {
            crate::tensor::vec_axpy(&mut out, dot(v, z), u);
        }
        out
    }

    fn apply_transpose(&self, z: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = z.iter().map(|v| -v).collect();
        for (u, v) in self.us.iter().zip(&self.vs) {
            crate::tensor::vec_axpy(&mut out, dot(u, z), v);
        }
        out
    }

    /// Good-Broyden update `H += (s - H y) s^T H / (s^T H y)`.
    fn update(&mut self, s: &[f64], y: &[f64]) {
        let hy = self.apply(y);
        let denom = dot(s, &hy);
        if !(denom.abs() > 1e-30) || !denom.is_finite() {
            return;
        }
        let u: Vec<f64> = s.iter().zip(&hy).map(|(a, b)| (a - b) / denom).collect();
        let v = self.apply_transpose(s);
        if self.us.len() == self.m {
            self.us.remove(0);
            self.vs.remove(0);
        }
        self.us.push(u);
        self.vs.push(v);
    }
}

fn broyden<F>(mut map: F, x0: &[f64], cfg: &SolverConfig, observer: Option<Observer<'_>>) -> Result<FixedPointResult>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let mut t = Tracker::new(*cfg, x0, observer);
    let mut h = LowRankInverse { us: Vec::new(), vs: Vec::new(), m: cfg.m };
    let mut x = x0.to_vec();
    let residual_of = |x: &[f64], map: &mut F| -> Result<Vec<f64>> {
        let f = map(x)?;
        if f.len() != x.len() {
            return Err(Error::LengthMismatch { expected: x.len(), got: f.len() });
        }
        Ok(vec_sub(&f, x))
    };
    let mut g = residual_of(&x, &mut map)?;
    check_finite(&g, "broyden", 0, f64::NAN)?;
    for _ in 0..cfg.max_iter {
        let g_norm = norm(&g);
        let dir: Vec<f64> = h.apply(&g).into_iter().map(|v| -v).collect();
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=BROYDEN_HALVINGS {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let g_trial = residual_of(&trial, &mut map)?;
            let finite = g_trial.iter().all(|v| v.is_finite());
            if finite && norm(&g_trial) <= g_norm {
                accepted = Some((trial, g_trial));
                break;
            }
            step *= 0.5;
        }
        let (next, g_next) = match accepted {
            Some(pair) => pair,
            None => {
                warn!("broyden: safeguard exhausted at iteration {}, taking a Picard step", t.history.len() + 1);
                let next: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a + b).collect();
                let g_next = residual_of(&next, &mut map)?;
                (next, g_next)
            }
        };
        check_finite(&g_next, "broyden", t.history.len() + 1, t.last())?;
        let f_next: Vec<f64> = next.iter().zip(&g_next).map(|(a, b)| a + b).collect();
        if t.record(&f_next, &next, "broyden")? || t.history.len() == cfg.max_iter {
            return Ok(t.finish(f_next, "broyden"));
        }
        let s = vec_sub(&next, &x);
        let y = vec_sub(&g_next, &g);
        h.update(&s, &y);
        x = next;
        g = g_next;
    }
    unreachable!("broyden loop always returns")
}
