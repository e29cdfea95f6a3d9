use serde::{Deserialize, Serialize};

use super::LinearOperator;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpectralMethod {
    /// `L` and `mu` both from power iteration (the latter on `L I - A^T A`).
    PowerIteration,
    /// `mu = 0` taken from the operator structure; only `L` iterated.
    KnownNullspace,
}

/// Extreme eigenvalues of `A^T A`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralBounds {
    pub l: f64,
    pub mu: f64,
    pub method: SpectralMethod,
    pub iterations: usize,
    pub tolerance: f64,
    /// Largest eigen-residual `||B v - lambda v||` of the returned pairs.
    pub residual: f64,
}

struct PowerResult {
    value: f64,
    iterations: usize,
    residual: f64,
}

/// Power iteration on a symmetric PSD map; stops when the Rayleigh
/// quotient changes by at most `tol` relative. Images of norm at most
/// `floor` count as zero (round-off of an operator that vanishes).
fn power_iterate(
    apply: impl Fn(&Tensor) -> Result<Tensor>,
    start: Tensor,
    floor: f64,
    tol: f64,
    max_iter: usize,
    what: &'static str,
) -> Result<PowerResult> {
    let mut v = start.scale(1.0 / start.norm());
    let mut prev = f64::NAN;
    for it in 1..=max_iter {
        let bv = apply(&v)?;
        let value = v.dot(&bv)?;
        let norm = bv.norm();
        if norm <= floor {
            return Ok(PowerResult { value: 0.0, iterations: it, residual: 0.0 });
        }
        if (value - prev).abs() <= tol * value.abs() {
            let mut r = bv.clone();
            r.axpy(-value, &v)?;
            return Ok(PowerResult { value, iterations: it, residual: r.norm() });
        }
        prev = value;
        v = bv.scale(1.0 / norm);
    }
    Err(Error::NotConverged { method: what, iterations: max_iter, residual: prev })
}

/// `L = lambda_max(A^T A)` and `mu = lambda_min(A^T A)`. Operators with a
/// structural nullspace report `mu = 0` without iterating.
pub fn spectral_bounds(op: &LinearOperator, tol: f64, max_iter: usize) -> Result<SpectralBounds> {
    let mut rng = SeededRng::new(0x5eed_5bec);
    let start = Tensor::new(op.domain(), rng.gaussian_vec(op.domain().len(), 1.0))?;
    let top = power_iterate(|v| op.normal(v), start.clone(), 0.0, tol, max_iter, "power iteration (L)")?;
    let l = top.value;
    if op.is_undersampled() {
        return Ok(SpectralBounds {
            l,
            mu: 0.0,
            method: SpectralMethod::KnownNullspace,
            iterations: top.iterations,
            tolerance: tol,
            residual: top.residual,
        });
    }
    let shifted = power_iterate(
        |v| {
            let mut out = v.scale(l);
            out.axpy(-1.0, &op.normal(v)?)?;
            Ok(out)
        },
        start,
        1e-12 * l,
        tol,
        max_iter,
        "power iteration (mu)",
    )?;
    let mu = (l - shifted.value).clamp(0.0, l);
    Ok(SpectralBounds {
        l,
        mu,
        method: SpectralMethod::PowerIteration,
        iterations: top.iterations + shifted.iterations,
        tolerance: tol,
        residual: top.residual.max(shifted.residual),
    })
}
