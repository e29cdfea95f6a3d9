//! Estimates of the Lipschitz constant of `R - I`.

use serde::{Deserialize, Serialize};

use super::{RegNet, LEAKY_SLOPE};
use crate::error::Result;
use crate::rng::SeededRng;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    /// Largest local Jacobian norm of `R - I` over the probe points.
    pub epsilon: f64,
    /// Product of layer norms (times the activation slope bound), plus 1
    /// for networks without the identity skip.
    pub layerwise_bound: f64,
    pub per_probe: Vec<f64>,
}

/// Spectral norm of `d(R - I)/dx` at `x` by power iteration on
/// `J^T J`, using the JVP and VJP of the same tape.
fn local_norm(net: &RegNet, x: &Tensor, power_iters: usize, rng: &mut SeededRng) -> Result<f64> {
    let (_, tape) = net.forward_tape(x)?;
    let mut v = Tensor::new(x.shape(), rng.gaussian_vec(x.len(), 1.0))?;
    v = v.scale(1.0 / v.norm());
    let mut est = 0.0;
    for _ in 0..power_iters.max(1) {
        let mut jv = net.jvp(&tape, &v)?;
        jv.axpy(-1.0, &v)?;
        est = jv.norm();
        let mut jtjv = net.vjp_input(&tape, &jv)?;
        jtjv.axpy(-1.0, &jv)?;
        let n = jtjv.norm();
        if n == 0.0 {
            return Ok(est);
        }
        v = jtjv.scale(1.0 / n);
    }
    let mut jv = net.jvp(&tape, &v)?;
    jv.axpy(-1.0, &v)?;
    Ok(est.max(jv.norm()))
}

/// `epsilon` over explicit probe points.
pub fn lipschitz_estimate_at(net: &RegNet, points: &[Tensor], power_iters: usize, seed: u64) -> Result<LipschitzEstimate> {
    let mut rng = SeededRng::new(seed);
    let per_probe = points
        .iter()
        .map(|x| local_norm(net, x, power_iters, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let epsilon = per_probe.iter().copied().fold(0.0, f64::max);
    let slope = LEAKY_SLOPE.max(1.0);
    let hidden = net.layers().len().saturating_sub(1) as i32;
    let product: f64 = net
        .layer_operator_norms(power_iters, seed ^ 0x9e37)
        .iter()
        .product::<f64>()
        * slope.powi(hidden);
    let layerwise_bound = if net.residual() { product } else { product + 1.0 };
    Ok(LipschitzEstimate { epsilon, layerwise_bound, per_probe })
}

/// `epsilon` over `probes` uniform random images in `[0, 1]`.
pub fn lipschitz_estimate(net: &RegNet, shape: Shape, probes: usize, power_iters: usize, seed: u64) -> Result<LipschitzEstimate> {
    let mut rng = SeededRng::new(seed);
    let points = (0..probes)
        .map(|_| Tensor::new(shape, (0..shape.len()).map(|_| rng.uniform()).collect()))
        .collect::<Result<Vec<_>>>()?;
    lipschitz_estimate_at(net, &points, power_iters, seed.wrapping_add(1))
}
