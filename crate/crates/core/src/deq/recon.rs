//! Reconstruction driver: starting point, fixed-point solve, metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::IterationMap;
use crate::error::{Error, Result};
use crate::fixpoint::{solve_observed, FixedPointResult, SolverConfig};
use crate::linops::{solve_regularized_normal, LinearOperator, OperatorKind};
use crate::metrics::quality;
use crate::tensor::Tensor;

/// Smallest Tikhonov weight used for the deblurring start, so noiseless
/// data still gets a well-posed solve.
pub const MIN_INIT_LAMBDA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitPolicy {
    /// `x0 = A^T y`
    Adjoint,
    /// `x0 = (A^T A + lambda I)^{-1} A^T y`
    RegularizedInverse { lambda: f64 },
    Zeros,
}

impl InitPolicy {
    /// `A^T y` for compressed sensing and MRI; the Tikhonov solve with
    /// `lambda = max(sigma, MIN_INIT_LAMBDA)` for deblurring.
    pub fn for_operator(op: &LinearOperator, sigma: f64) -> Self {
        match op.kind() {
            OperatorKind::Blur => InitPolicy::RegularizedInverse { lambda: sigma.max(MIN_INIT_LAMBDA) },
            _ => InitPolicy::Adjoint,
        }
    }

    pub fn initial_image(&self, op: &LinearOperator, y: &Tensor) -> Result<Tensor> {
        match *self {
            InitPolicy::Adjoint => op.adjoint(y),
            InitPolicy::Zeros => Ok(Tensor::zeros(op.domain())),
            InitPolicy::RegularizedInverse { lambda } => {
                if !(lambda > 0.0) {
                    return Err(Error::invalid(format!("init lambda must be > 0, got {lambda}")));
                }
                // (A^T A + lambda I) v = A^T y  <=>  (I + A^T A / lambda) v = A^T y / lambda
                let rhs = op.adjoint(y)?.scale(1.0 / lambda);
                Ok(solve_regularized_normal(op, 1.0 / lambda, &rhs, 1e-10, 5000)?.0)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// Image part of the last iterate.
    pub image: Tensor,
    pub x0: Tensor,
    pub solve: FixedPointResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionMetrics {
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub iterations: usize,
    pub seconds: f64,
    pub converged: bool,
    pub final_residual: f64,
}

impl Reconstruction {
    /// Metrics against an optional ground truth.
    pub fn metrics(&self, reference: Option<&Tensor>) -> Result<ReconstructionMetrics> {
        let q = reference.map(|r| quality(&self.image, r)).transpose()?;
        Ok(ReconstructionMetrics {
            psnr: q.map(|q| q.psnr),
            ssim: q.and_then(|q| q.ssim),
            iterations: self.solve.iterations,
            seconds: self.solve.seconds,
            converged: self.solve.converged,
            final_residual: self.solve.last_residual(),
        })
    }
}

impl ReconstructionMetrics {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Solves `x = f(x; y)` from the policy's starting point. A solve that
/// hits `max_iter` returns its last iterate with `converged = false`.
pub fn reconstruct(map: &IterationMap, y: &Tensor, solver: &SolverConfig, init: InitPolicy) -> Result<Reconstruction> {
    reconstruct_observed(map, y, solver, init, None)
}

/// [`reconstruct`] with a callback receiving each iterate's image.
pub fn reconstruct_observed(
    map: &IterationMap,
    y: &Tensor,
    solver: &SolverConfig,
    init: InitPolicy,
    mut observer: Option<&mut dyn FnMut(usize, &Tensor)>,
) -> Result<Reconstruction> {
    let x0 = init.initial_image(map.operator(), y)?;
    let bound = map.bind(y)?;
    let state0 = map.initial_state(&x0)?;
    let shape = map.image_shape();
    let n = shape.len();
    let mut inner = |k: usize, s: &[f64]| {
        if let Some(obs) = observer.as_mut() {
            if let Ok(img) = Tensor::new(shape, s[..n].to_vec()) {
                obs(k, &img);
            }
        }
    };
    let solve = solve_observed(|s| bound.apply(s), &state0, solver, Some(&mut inner))?;
    let image = map.image_of(&solve.point)?;
    Ok(Reconstruction { image, x0, solve })
}
