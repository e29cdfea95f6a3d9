//! Plug-and-play hyperparameter search over pretrained denoisers.

use log::debug;
use serde::{Deserialize, Serialize};

use super::{forward_solve, run_unrolled, Mode, Sample};
use crate::deq::{IterationMap, MapKind};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fixpoint::SolverConfig;
use crate::linops::LinearOperator;
use crate::metrics::image_psnr;
use crate::regnet::RegNet;

/// `n` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.ln(), hi.ln());
            (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    /// Step sizes for DE-Grad / DE-Prox.
    pub eta: Vec<f64>,
    /// Penalty parameters for DE-ADMM.
    pub alpha: Vec<f64>,
    /// Noise levels of the pretrained denoisers to try.
    pub sigma: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec { eta: log_grid(1e-4, 1e1, 20), alpha: log_grid(1e-4, 1e1, 20), sigma: vec![0.05, 0.02, 0.01] }
    }
}

impl GridSpec {
    /// The step axis that applies to `kind`.
    pub fn steps(&self, kind: MapKind) -> &[f64] {
        match kind {
            MapKind::DeAdmm => &self.alpha,
            _ => &self.eta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub sigma: f64,
    pub step: f64,
    /// Mean validation PSNR; `-inf` when inference failed.
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: GridPoint,
    pub evaluated: Vec<GridPoint>,
}

impl GridResult {
    /// One `sigma,step,psnr` row per evaluated point.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for p in &self.evaluated {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Mean PSNR of plug-and-play inference at one grid point. Runs that do
/// not converge are scored on their best iterate; failed runs score
/// `-inf`. Unrolled mode scores the `K`-th iterate.
fn score(map: &IterationMap, val: &[Sample], mode: Mode, solver: &SolverConfig, exec: Exec) -> f64 {
    let scores = exec.map_slice(val, |s| -> Result<f64> {
        let img = match mode {
            Mode::Equilibrium => {
                let r = forward_solve(map, s, solver)?;
                map.image_of(if r.converged { &r.point } else { &r.best_point })?
            }
            Mode::Unrolled { k } => run_unrolled(map, &s.y, &s.x0, k)?,
        };
        image_psnr(&img, &s.x_star)
    });
    let mut total = 0.0;
    for s in scores {
        match s {
            Ok(v) if v.is_finite() || v == f64::INFINITY => total += v,
            _ => return f64::NEG_INFINITY,
        }
    }
    total / val.len() as f64
}

/// Exhaustive search over `(step, sigma)`; returns the best mean PSNR,
/// ties going to the smaller step. `family` pairs each noise level with
/// its pretrained network. `mode` picks how inference runs: to the
/// equilibrium with `solver`, or for a fixed number of plain steps.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    kind: MapKind,
    op: &LinearOperator,
    family: &[(f64, RegNet)],
    grid: &GridSpec,
    val: &[Sample],
    mode: Mode,
    solver: &SolverConfig,
    exec: Exec,
) -> Result<GridResult> {
    if val.is_empty() {
        return Err(Error::invalid("grid search needs validation samples"));
    }
    let mut steps = grid.steps(kind).to_vec();
    steps.sort_by(f64::total_cmp);
    if steps.is_empty() || grid.sigma.is_empty() {
        return Err(Error::invalid("grid axes must be nonempty"));
    }
    let mut evaluated = Vec::with_capacity(steps.len() * grid.sigma.len());
    let mut best: Option<GridPoint> = None;
    for &step in &steps {
        for &sigma in &grid.sigma {
            let net = family
                .iter()
                .find(|(s, _)| (s - sigma).abs() <= 1e-12 * sigma.abs().max(1.0))
                .map(|(_, n)| n.clone())
                .ok_or_else(|| Error::invalid(format!("no pretrained denoiser for sigma {sigma}")))?;
            let psnr = match IterationMap::new(kind, op.clone(), net, step) {
                Ok(map) => score(&map, val, mode, solver, exec),
                Err(_) => f64::NEG_INFINITY,
            };
            debug!("grid {}: step {step:.3e}, sigma {sigma}: {psnr:.3} dB", kind.name());
            let point = GridPoint { sigma, step, psnr };
            if best.is_none_or(|b| psnr > b.psnr) {
                best = Some(point);
            }
            evaluated.push(point);
        }
    }
    Ok(GridResult { best: best.expect("nonempty grid"), evaluated })
}
