use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Additive white Gaussian noise. `sigma` is a standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("noise sigma must be >= 0, got {sigma}")));
        }
        Ok(NoiseSpec { sigma, seed })
    }
}

/// `v + sigma * g` with `g` drawn from the seeded stream. `sigma = 0`
/// returns an exact copy.
pub fn add_noise(v: &Tensor, spec: NoiseSpec) -> Tensor {
    if spec.sigma == 0.0 {
        return v.clone();
    }
    let mut rng = SeededRng::new(spec.seed);
    let mut out = v.clone();
    for value in out.data_mut() {
        *value += spec.sigma * rng.gaussian();
    }
    out
}
