//! Contraction certificates for the three iteration maps.

use serde::{Deserialize, Serialize};

use super::IterationMap;
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Theorem {
    /// DE-Grad: `gamma = 1 - eta (1 + mu) + eta eps` for `eta < 1 / (L + 1)`.
    Grad,
    /// DE-Prox: `1 / (mu (1 + 1/eps)) < eta < 2/L - 1 / (L (1 + 1/eps))`.
    Prox,
    /// DE-ADMM: `alpha > eps / ((1 + eps - 2 eps^2) mu)`.
    Admm,
}

impl Theorem {
    pub fn id(self) -> u8 {
        match self {
            Theorem::Grad => 1,
            Theorem::Prox => 2,
            Theorem::Admm => 3,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            1 => Some(Theorem::Grad),
            2 => Some(Theorem::Prox),
            3 => Some(Theorem::Admm),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionCertificate {
    pub theorem: u8,
    pub l: f64,
    pub mu: f64,
    pub epsilon: f64,
    /// `eta` for theorems 1-2, `alpha` for theorem 3.
    pub parameter: f64,
    /// Contraction factor (theorem 1 only).
    pub gamma: Option<f64>,
    /// Open interval of admissible `eta` (theorem 2).
    pub window: Option<(f64, f64)>,
    /// Lower bound on `alpha` (theorem 3).
    pub threshold: Option<f64>,
    pub satisfied: bool,
    /// Why the certificate fails, when it does.
    pub reason: Option<String>,
}

pub fn certify_contraction(theorem: Theorem, l: f64, mu: f64, epsilon: f64, parameter: f64) -> ContractionCertificate {
    let mut cert = ContractionCertificate {
        theorem: theorem.id(),
        l,
        mu,
        epsilon,
        parameter,
        gamma: None,
        window: None,
        threshold: None,
        satisfied: false,
        reason: None,
    };
    let fail = |mut c: ContractionCertificate, why: String| {
        c.reason = Some(why);
        c
    };
    if !(l >= mu && mu >= 0.0 && epsilon >= 0.0 && parameter.is_finite()) {
        return fail(cert, format!("need L >= mu >= 0 and eps >= 0, got L={l}, mu={mu}, eps={epsilon}"));
    }
    match theorem {
        Theorem::Grad => {
            let eta = parameter;
            let gamma = 1.0 - eta * (1.0 + mu) + eta * epsilon;
            cert.gamma = Some(gamma);
            let bound = 1.0 / (l + 1.0);
            if !(eta > 0.0 && eta < bound) {
                return fail(cert, format!("eta = {eta} outside (0, 1/(L+1) = {bound})"));
            }
            if !(gamma < 1.0) {
                return fail(cert, format!("gamma = {gamma} >= 1 (eps >= 1 + mu)"));
            }
            cert.satisfied = true;
        }
        Theorem::Prox => {
            if mu == 0.0 {
                return fail(cert, "λ_min = 0".to_string());
            }
            // 1 / (1 + 1/eps) written as eps / (1 + eps) so eps = 0 is finite.
            let t = epsilon / (1.0 + epsilon);
            let lo = t / mu;
            let hi = 2.0 / l - t / l;
            cert.window = Some((lo, hi));
            if !(lo < hi) {
                return fail(cert, format!("empty step window: eps = {epsilon} >= 2mu/(L-mu)"));
            }
            if !(parameter > lo && parameter < hi) {
                return fail(cert, format!("eta = {parameter} outside ({lo}, {hi})"));
            }
            cert.satisfied = true;
        }
        Theorem::Admm => {
            if mu == 0.0 {
                return fail(cert, "λ_min = 0".to_string());
            }
            let denom = (1.0 + epsilon - 2.0 * epsilon * epsilon) * mu;
            if !(denom > 0.0) {
                return fail(cert, format!("no admissible alpha for eps = {epsilon} >= 1"));
            }
            let threshold = epsilon / denom;
            cert.threshold = Some(threshold);
            if !(parameter > threshold) {
                return fail(cert, format!("alpha = {parameter} <= {threshold}"));
            }
            cert.satisfied = true;
        }
    }
    cert
}

/// Measured Picard step-length ratios `r_{k+1} / r_k`, with
/// `r_k = ||x_{k+1} - x_k||`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionRate {
    pub probes: usize,
    pub steps: usize,
    /// Ratios start at this step index.
    pub skip: usize,
    pub max_ratio: f64,
    pub median_ratio: f64,
    /// Largest ratio per probe.
    pub per_probe: Vec<f64>,
}

/// Runs `steps` Picard steps of `map` from `probes` random pairs: `x0`
/// uniform in `[0, 1]` and `y = A u` for an independent uniform `u`.
/// Ratios from step `skip` on are kept; steps that have already reached
/// round-off (`r_k <= 1e-12 ||x_k||`) are dropped.
pub fn empirical_contraction(map: &IterationMap, probes: usize, steps: usize, skip: usize, seed: u64) -> Result<ContractionRate> {
    let shape = map.image_shape();
    let mut rng = SeededRng::new(seed);
    let mut all = Vec::new();
    let mut per_probe = Vec::with_capacity(probes);
    for _ in 0..probes {
        let x0 = Tensor::new(shape, (0..shape.len()).map(|_| rng.uniform()).collect())?;
        let u = Tensor::new(shape, (0..shape.len()).map(|_| rng.uniform()).collect())?;
        let y = map.operator().forward(&u)?;
        let bound = map.bind(&y)?;
        let mut x = map.initial_state(&x0)?;
        let mut prev: Option<f64> = None;
        let mut worst = 0.0f64;
        for k in 0..steps {
            let next = bound.apply(&x)?;
            let r = next.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let scale = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if let Some(p) = prev {
                if k > skip && p > 1e-12 * scale.max(1e-300) {
                    let ratio = r / p;
                    all.push(ratio);
                    worst = worst.max(ratio);
                }
            }
            prev = Some(r);
            x = next;
        }
        per_probe.push(worst);
    }
    if all.is_empty() {
        return Err(Error::invalid("no contraction ratios measured; raise `steps`"));
    }
    all.sort_by(f64::total_cmp);
    Ok(ContractionRate {
        probes,
        steps,
        skip,
        max_ratio: *all.last().expect("nonempty"),
        median_ratio: all[all.len() / 2],
        per_probe,
    })
}
