//! Denoiser pretraining: one copy of the network per noise level, trained
//! on `0.5 ||R(x + sigma g) - x||^2`.

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::{check_layer_norms, RegNet};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::optim::{Adam, AdamConfig};
use crate::rng::{sub_seed, SeededRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Noise standard deviations, one denoiser each.
    pub sigma_levels: Vec<f64>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Power iterations per spectral projection.
    pub power_iters: usize,
    /// Fresh power iterations for the per-step layer-norm check; 0 disables it.
    pub spectral_check_iters: usize,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            sigma_levels: vec![0.05, 0.02, 0.01],
            epochs: 10,
            lr: 1e-3,
            batch: 8,
            seed: 0,
            power_iters: 5,
            spectral_check_iters: 0,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainedDenoiser {
    pub sigma: f64,
    pub net: RegNet,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Largest layer norm seen by the per-step check, when enabled.
    pub max_layer_norm: Option<f64>,
}

/// Mean per-sample loss and summed gradient over one minibatch.
pub(crate) fn denoise_batch(
    net: &RegNet,
    clean: &[&Tensor],
    noisy: &[Tensor],
    exec: Exec,
) -> Result<(f64, Vec<f64>)> {
    let per = exec.map_range(clean.len(), |i| -> Result<(f64, Vec<f64>)> {
        let (out, tape) = net.forward_tape(&noisy[i])?;
        let r = out.sub(clean[i])?;
        let loss = 0.5 * r.dot(&r)?;
        let g = net.vjp_params(&tape, &r)?;
        Ok((loss, g.data))
    });
    let n = clean.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; net.num_params()];
    for item in per {
        let (l, g) = item?;
        loss += l;
        crate::tensor::vec_axpy(&mut grad, 1.0, &g);
    }
    grad.iter_mut().for_each(|v| *v /= n);
    Ok((loss / n, grad))
}

fn train_one(net: &RegNet, data: &[Tensor], sigma: f64, cfg: &PretrainConfig) -> Result<PretrainedDenoiser> {
    let mut net = net.clone();
    let mut params = net.params();
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), params.len());
    let mut rng = SeededRng::new(sub_seed(cfg.seed, &format!("pretrain-{sigma}")));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut max_layer_norm: Option<f64> = None;
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch.max(1)) {
            let clean: Vec<&Tensor> = chunk.iter().map(|&i| &data[i]).collect();
            let noisy = clean
                .iter()
                .map(|x| {
                    let noise = rng.gaussian_vec(x.len(), sigma);
                    Tensor::new(x.shape(), crate::tensor::vec_add(x.data(), &noise))
                })
                .collect::<Result<Vec<_>>>()?;
            let (loss, grad) = denoise_batch(&net, &clean, &noisy, cfg.exec)?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged { epoch, step, loss });
            }
            total += loss * chunk.len() as f64;
            opt.step(&mut params.data, &grad);
            net.set_params(&params)?;
            net.spectral_project(cfg.power_iters);
            params = net.params();
            if cfg.spectral_check_iters > 0 {
                let worst = check_layer_norms(&net, cfg.spectral_check_iters, sub_seed(cfg.seed, "check") ^ step as u64)
                    .unwrap_or_else(|w| w);
                debug_assert!(
                    worst <= 1.0 + super::SPECTRAL_TOLERANCE,
                    "layer norm {worst} after pretraining step {step}"
                );
                max_layer_norm = Some(max_layer_norm.map_or(worst, |m: f64| m.max(worst)));
            }
            step += 1;
        }
        let mean = total / data.len() as f64;
        debug!("pretrain sigma={sigma} epoch={epoch} loss={mean:.6e}");
        epoch_losses.push(mean);
    }
    info!("pretrained denoiser sigma={sigma} after {} epochs", cfg.epochs);
    Ok(PretrainedDenoiser { sigma, net, epoch_losses, max_layer_norm })
}

/// Trains one denoiser per noise level from the same initial network.
pub fn pretrain_denoiser(net: &RegNet, data: &[Tensor], cfg: &PretrainConfig) -> Result<Vec<PretrainedDenoiser>> {
    if data.is_empty() {
        return Err(Error::invalid("pretraining needs at least one image"));
    }
    if cfg.sigma_levels.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::invalid(format!("bad noise levels {:?}", cfg.sigma_levels)));
    }
    cfg.sigma_levels.iter().map(|&s| train_one(net, data, s, cfg)).collect()
}
