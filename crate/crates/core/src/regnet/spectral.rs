//! Spectral normalization of convolution layers at the working image size.

use super::{ConvLayer, RegNet};
use nalgebra::{DMatrix, SymmetricEigen};

use crate::conv;
use crate::rng::SeededRng;
use crate::tensor::{dot, norm};

/// Slack allowed on post-projection layer norms.
pub const SPECTRAL_TOLERANCE: f64 = 1e-3;

/// Smallest Krylov dimension used by a projection.
const MIN_LANCZOS_STEPS: usize = 20;
/// Weight of the seeded random direction mixed into the Lanczos start.
const START_MIX: f64 = 0.1;

/// One power-iteration round on `W^T W` from the layer's persistent `u`;
/// returns the estimate `||W u||` for unit `u`.
fn power_round(layer: &mut ConvLayer, size: usize, iters: usize) -> f64 {
    let g = layer.geom(size, size);
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        let wu = conv::forward(&layer.weight, None, &layer.u, &g);
        let n = norm(&wu);
        if n == 0.0 {
            return 0.0;
        }
        layer.v = wu.into_iter().map(|x| x / n).collect();
        let wtv = conv::adjoint(&layer.weight, &layer.v, &g);
        sigma = norm(&wtv);
        if sigma == 0.0 {
            return 0.0;
        }
        layer.u = wtv.into_iter().map(|x| x / sigma).collect();
    }
    // Both ||W u|| and ||W^T v|| (unit u, v) are lower bounds on the norm.
    let wu = conv::forward(&layer.weight, None, &layer.u, &g);
    norm(&wu).max(sigma)
}

/// Largest singular value of the layer by Lanczos on `W^T W`, with full
/// reorthogonalization, started from the persistent `u` plus a small
/// random direction seeded by the weight bits. The random part keeps a
/// warm vector that sits on a lower peak of the spectrum from hiding the
/// top one. Stores the Ritz vector as the new `u`.
fn lanczos_refine(layer: &mut ConvLayer, size: usize, steps: usize) -> f64 {
    let g = layer.geom(size, size);
    let seed = layer
        .weight
        .iter()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, w| (h ^ w.to_bits()).wrapping_mul(0x0100_0000_01b3));
    let noise = SeededRng::new(seed).gaussian_vec(layer.u.len(), 1.0);
    let nn = norm(&noise);
    let mut q: Vec<f64> = layer.u.iter().zip(&noise).map(|(u, r)| u + START_MIX * r / nn).collect();
    let qn = norm(&q);
    if qn == 0.0 {
        return 0.0;
    }
    q.iter_mut().for_each(|x| *x /= qn);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let (mut alpha, mut beta) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
    for _ in 0..steps.max(1) {
        let wq = conv::forward(&layer.weight, None, &q, &g);
        let mut z = conv::adjoint(&layer.weight, &wq, &g);
        alpha.push(dot(&q, &z));
        basis.push(q);
        // Full reorthogonalization against the whole basis.
        for b in &basis {
            let c = dot(b, &z);
            z.iter_mut().zip(b).for_each(|(zi, bi)| *zi -= c * bi);
        }
        let bn = norm(&z);
        if bn <= 1e-12 * alpha.iter().fold(0.0f64, |m, a| m.max(a.abs())).max(1e-300) {
            break;
        }
        beta.push(bn);
        q = z.into_iter().map(|x| x / bn).collect();
    }
    let m = basis.len();
    let t = DMatrix::from_fn(m, m, |i, j| match i.abs_diff(j) {
        0 => alpha[i],
        1 => beta[i.min(j)],
        _ => 0.0,
    });
    let eig = SymmetricEigen::new(t);
    let (top, &theta) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("at least one Lanczos step");
    let y = eig.eigenvectors.column(top);
    let mut u = vec![0.0; layer.u.len()];
    for (b, c) in basis.iter().zip(y.iter()) {
        u.iter_mut().zip(b).for_each(|(ui, bi)| *ui += c * bi);
    }
    let un = norm(&u);
    if un > 0.0 {
        layer.u = u.into_iter().map(|x| x / un).collect();
        let wu = conv::forward(&layer.weight, None, &layer.u, &g);
        let wn = norm(&wu);
        if wn > 0.0 {
            layer.v = wu.into_iter().map(|x| x / wn).collect();
        }
    }
    theta.max(0.0).sqrt()
}

impl RegNet {
    /// Rescales each layer by `1 / max(1, sigma)`, where `sigma` is its
    /// convolution operator norm at `spectral_size x spectral_size`,
    /// estimated by a Lanczos run on `W^T W` of at least `power_iters`
    /// steps, started from the persistent vectors.
    /// Returns the pre-projection estimates.
    pub fn spectral_project(&mut self, power_iters: usize) -> Vec<f64> {
        let size = self.spectral_size;
        self.layers
            .iter_mut()
            .map(|layer| {
                let sigma = lanczos_refine(layer, size, power_iters.max(MIN_LANCZOS_STEPS));
                if sigma > 1.0 {
                    layer.weight.iter_mut().for_each(|w| *w /= sigma);
                }
                sigma
            })
            .collect()
    }

    /// Operator-norm estimates from fresh random starts, independent of
    /// the persistent vectors.
    pub fn layer_operator_norms(&self, power_iters: usize, seed: u64) -> Vec<f64> {
        let mut rng = SeededRng::new(seed);
        let plane = self.spectral_size * self.spectral_size;
        self.layers
            .iter()
            .map(|l| {
                let mut fresh = l.clone();
                let u = rng.gaussian_vec(l.c_in * plane, 1.0);
                let n = norm(&u);
                fresh.u = u.into_iter().map(|x| x / n).collect();
                power_round(&mut fresh, self.spectral_size, power_iters)
            })
            .collect()
    }
}

/// Fresh power-iteration check that every layer norm is at most
/// `1 + SPECTRAL_TOLERANCE`. Returns the largest norm seen.
pub fn check_layer_norms(net: &RegNet, power_iters: usize, seed: u64) -> Result<f64, f64> {
    let worst = net
        .layer_operator_norms(power_iters, seed)
        .into_iter()
        .fold(0.0, f64::max);
    if worst <= 1.0 + SPECTRAL_TOLERANCE {
        Ok(worst)
    } else {
        Err(worst)
    }
}
