//! End-to-end training of the regularizer inside an iteration map.
//!
//! Deep-equilibrium training differentiates the fixed point implicitly:
//! with `r = x_inf - x_star`, solve `beta = J^T beta + r` from `beta = 0`
//! (Picard on this equation is the truncated Neumann series) and take
//! `(df/dtheta)^T beta`. Deep unrolling instead backpropagates through
//! `K` recorded steps, so its memory grows with `K`.

mod grid;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

pub use grid::{grid_search, log_grid, GridPoint, GridResult, GridSpec};

use crate::deq::{BoundMap, InitPolicy, IterationMap, MapKind};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fixpoint::{solve, FixedPointResult, SolverConfig};
use crate::linops::LinearOperator;
use crate::metrics::image_psnr;
use crate::noise::{add_noise, NoiseSpec};
use crate::optim::{Adam, AdamConfig};
use crate::regnet::{check_layer_norms, lipschitz_estimate, ParamVector, SPECTRAL_TOLERANCE};
use crate::rng::{sub_seed, SeededRng};
use crate::tensor::{vec_axpy, Tensor};

/// One training or evaluation pair with its starting image.
#[derive(Debug, Clone)]
pub struct Sample {
    pub y: Tensor,
    pub x_star: Tensor,
    pub x0: Tensor,
}

/// Measures every image with `op`, adds noise of std `sigma` (one
/// sub-seed per image) and computes the starting point.
pub fn make_samples(op: &LinearOperator, images: &[Tensor], sigma: f64, seed: u64, init: InitPolicy) -> Result<Vec<Sample>> {
    images
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let clean = op.forward(x)?;
            let y = add_noise(&clean, NoiseSpec::new(sigma, sub_seed(seed, &format!("noise-{i}")))?);
            let x0 = init.initial_image(op, &y)?;
            Ok(Sample { y, x_star: x.clone(), x0 })
        })
        .collect()
}

/// `0.5 ||x - x_star||^2` and its cotangent `x - x_star`.
pub fn mse_loss(x: &Tensor, x_star: &Tensor) -> Result<(f64, Tensor)> {
    let r = x.sub(x_star)?;
    Ok((0.5 * r.dot(&r)?, r))
}

/// Loss cotangent on a full state: the image residual, zero on `u`.
fn state_cotangent(map: &IterationMap, state: &[f64], x_star: &Tensor) -> Result<(f64, Vec<f64>)> {
    let (loss, r) = mse_loss(&map.image_of(state)?, x_star)?;
    let mut g = r.into_vec();
    g.resize(map.state_len(), 0.0);
    Ok((loss, g))
}

#[derive(Debug, Clone)]
pub struct ImplicitGradient {
    pub loss: f64,
    pub grad: ParamVector,
    pub backward_iterations: usize,
    /// False when the backward solve hit its cap; `grad` then uses the
    /// best `beta` seen.
    pub backward_converged: bool,
}

/// Gradient of `0.5 ||x_inf - x_star||^2` at the fixed point `x_inf`
/// (a full state) via the backward fixed-point equation.
pub fn implicit_gradient(
    map: &IterationMap,
    y: &Tensor,
    x_star: &Tensor,
    x_inf: &[f64],
    backward: &SolverConfig,
) -> Result<ImplicitGradient> {
    let bound = map.bind(y)?;
    implicit_gradient_bound(&bound, x_star, x_inf, backward)
}

fn implicit_gradient_bound(bound: &BoundMap<'_>, x_star: &Tensor, x_inf: &[f64], backward: &SolverConfig) -> Result<ImplicitGradient> {
    let map = bound.map();
    let (loss, r) = state_cotangent(map, x_inf, x_star)?;
    let lin = bound.linearize(x_inf)?;
    let beta0 = vec![0.0; r.len()];
    let sol = solve(
        |b| {
            let mut next = lin.vjp_state(b)?;
            vec_axpy(&mut next, 1.0, &r);
            Ok(next)
        },
        &beta0,
        backward,
    )?;
    if !sol.converged {
        warn!(
            "backward solve stopped after {} iterations at residual {:e}; using best iterate",
            sol.iterations,
            sol.last_residual()
        );
    }
    let beta = if sol.converged { &sol.point } else { &sol.best_point };
    let grad = lin.vjp_params(beta)?;
    Ok(ImplicitGradient { loss, grad, backward_iterations: sol.iterations, backward_converged: sol.converged })
}

/// Forward equilibrium solve from a sample's starting point.
pub fn forward_solve(map: &IterationMap, sample: &Sample, cfg: &SolverConfig) -> Result<FixedPointResult> {
    let bound = map.bind(&sample.y)?;
    solve(|s| bound.apply(s), &map.initial_state(&sample.x0)?, cfg)
}

#[derive(Debug, Clone)]
pub struct UnrolledGradient {
    pub loss: f64,
    pub grad: ParamVector,
    /// Activation values held across the `K` steps.
    pub stored_values: usize,
}

/// Exact backpropagation through `k` steps from the sample's start.
pub fn unrolled_gradient(map: &IterationMap, sample: &Sample, k: usize) -> Result<UnrolledGradient> {
    if k == 0 {
        return Err(Error::invalid("unrolled depth K must be >= 1"));
    }
    let bound = map.bind(&sample.y)?;
    let mut state = map.initial_state(&sample.x0)?;
    let mut steps = Vec::with_capacity(k);
    for _ in 0..k {
        let (next, lin) = bound.apply_linearized(&state)?;
        steps.push(lin);
        state = next;
    }
    let stored_values = steps.iter().map(|l| l.stored_values()).sum();
    let (loss, mut g) = state_cotangent(map, &state, &sample.x_star)?;
    let mut grad = ParamVector::zeros_like(&map.net().params());
    for lin in steps.iter().rev() {
        let (prev, p) = lin.vjp(&g)?;
        grad.add_scaled(1.0, &p);
        g = prev;
    }
    Ok(UnrolledGradient { loss, grad, stored_values })
}

/// Exactly `k` map applications from `x0` (no early stopping), as a
/// deep-unrolled network is evaluated.
pub fn run_unrolled(map: &IterationMap, y: &Tensor, x0: &Tensor, k: usize) -> Result<Tensor> {
    let bound = map.bind(y)?;
    let mut state = map.initial_state(x0)?;
    for _ in 0..k {
        state = bound.apply(&state)?;
    }
    map.image_of(&state)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub forward: SolverConfig,
    pub backward: SolverConfig,
    pub seed: u64,
    pub loss: LossKind,
    /// Power iterations per spectral projection.
    pub power_iters: usize,
    /// Fresh power iterations for the per-step layer-norm check; 0 disables.
    pub spectral_check_iters: usize,
    /// Probe images for the per-epoch Lipschitz estimate; 0 disables.
    pub epsilon_probes: usize,
    /// Return the parameters with the best validation PSNR (the starting
    /// parameters included) rather than the last ones.
    pub select_best: bool,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 10,
            batch: 8,
            forward: SolverConfig::forward(),
            backward: SolverConfig::backward(),
            seed: 0,
            loss: LossKind::Mse,
            power_iters: 5,
            spectral_check_iters: 0,
            epsilon_probes: 0,
            select_best: true,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        self.forward.validate()?;
        self.backward.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_psnr: f64,
    pub mean_forward_iters: f64,
    pub mean_backward_iters: f64,
    pub epsilon_estimate: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Validation PSNR of the starting parameters.
    pub initial_val_psnr: f64,
    /// Epoch whose parameters were kept (0 = the starting ones).
    pub selected_epoch: usize,
    /// Largest layer norm reported by the per-step check, when enabled.
    pub max_layer_norm: Option<f64>,
    pub steps: usize,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.epochs.is_empty() {
            w.write_record([
                "epoch",
                "train_loss",
                "val_psnr",
                "mean_forward_iters",
                "mean_backward_iters",
                "epsilon_estimate",
                "wall_seconds",
            ])?;
        }
        for r in &self.epochs {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// How per-sample gradients are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Implicit differentiation at the equilibrium.
    Equilibrium,
    /// Backpropagation through `K` steps.
    Unrolled { k: usize },
}

struct SampleGrad {
    loss: f64,
    grad: Vec<f64>,
    forward_iters: usize,
    backward_iters: usize,
}

fn sample_gradient(map: &IterationMap, sample: &Sample, mode: Mode, cfg: &TrainConfig) -> Result<SampleGrad> {
    match mode {
        Mode::Equilibrium => {
            let bound = map.bind(&sample.y)?;
            let fwd = solve(|s| bound.apply(s), &map.initial_state(&sample.x0)?, &cfg.forward)?;
            let g = implicit_gradient_bound(&bound, &sample.x_star, &fwd.point, &cfg.backward)?;
            Ok(SampleGrad { loss: g.loss, grad: g.grad.data, forward_iters: fwd.iterations, backward_iters: g.backward_iterations })
        }
        Mode::Unrolled { k } => {
            let g = unrolled_gradient(map, sample, k)?;
            Ok(SampleGrad { loss: g.loss, grad: g.grad.data, forward_iters: k, backward_iters: k })
        }
    }
}

/// Mean PSNR of the model's reconstructions over `samples`.
pub fn evaluate(map: &IterationMap, samples: &[Sample], mode: Mode, forward: &SolverConfig, exec: Exec) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let scores = exec.map_slice(samples, |s| -> Result<f64> {
        let img = match mode {
            Mode::Equilibrium => map.image_of(&forward_solve(map, s, forward)?.point)?,
            Mode::Unrolled { k } => run_unrolled(map, &s.y, &s.x0, k)?,
        };
        image_psnr(&img, &s.x_star)
    });
    let mut total = 0.0;
    for s in scores {
        total += s?;
    }
    Ok(total / samples.len() as f64)
}

/// Shared minibatch loop. Leaves the selected parameters in `map`; on
/// divergence `map` keeps the last good parameters.
pub fn train(map: &mut IterationMap, train_set: &[Sample], val_set: &[Sample], mode: Mode, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let start = Instant::now();
    let mut rng = SeededRng::new(sub_seed(cfg.seed, "train-order"));
    let mut params = map.net().params();
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), params.len());
    log.initial_val_psnr = evaluate(map, val_set, mode, &cfg.forward, cfg.exec)?;
    let mut best = (log.initial_val_psnr, 0usize, map.net().clone());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let (mut loss_sum, mut fwd_sum, mut bwd_sum) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let frozen = &*map;
            let per = cfg.exec.map_slice(chunk, |&i| sample_gradient(frozen, &train_set[i], mode, cfg));
            let mut grad = vec![0.0; params.len()];
            let mut batch_loss = 0.0;
            for item in per {
                let g = item?;
                batch_loss += g.loss;
                fwd_sum += g.forward_iters;
                bwd_sum += g.backward_iters;
                vec_axpy(&mut grad, 1.0, &g.grad);
            }
            let n = chunk.len() as f64;
            grad.iter_mut().for_each(|v| *v /= n);
            if !batch_loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::TrainingDiverged { epoch, step: log.steps, loss: batch_loss / n });
            }
            loss_sum += batch_loss;
            // With lr = 0 the step is a no-op and the weights, already
            // projected, stay bitwise unchanged.
            if cfg.lr > 0.0 {
                opt.step(&mut params.data, &grad);
                map.net_mut().set_params(&params)?;
                map.net_mut().spectral_project(cfg.power_iters);
                params = map.net().params();
            }
            if cfg.spectral_check_iters > 0 {
                let seed = sub_seed(cfg.seed, "spectral-check") ^ log.steps as u64;
                let worst = check_layer_norms(map.net(), cfg.spectral_check_iters, seed).unwrap_or_else(|w| w);
                debug_assert!(worst <= 1.0 + SPECTRAL_TOLERANCE, "layer norm {worst} after step {}", log.steps);
                log.max_layer_norm = Some(log.max_layer_norm.map_or(worst, |m| m.max(worst)));
            }
            log.steps += 1;
        }
        let count = train_set.len() as f64;
        let val_psnr = evaluate(map, val_set, mode, &cfg.forward, cfg.exec)?;
        let epsilon_estimate = if cfg.epsilon_probes > 0 {
            lipschitz_estimate(map.net(), map.image_shape(), cfg.epsilon_probes, 20, sub_seed(cfg.seed, "epsilon"))?.epsilon
        } else {
            f64::NAN
        };
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / count,
            val_psnr,
            mean_forward_iters: fwd_sum as f64 / count,
            mean_backward_iters: bwd_sum as f64 / count,
            epsilon_estimate,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        debug!("epoch {epoch}: loss {:.4e}, val psnr {:.3} dB", rec.train_loss, rec.val_psnr);
        if val_psnr > best.0 {
            best = (val_psnr, epoch, map.net().clone());
        }
        log.epochs.push(rec);
    }
    if cfg.select_best && !val_set.is_empty() {
        log.selected_epoch = best.1;
        *map.net_mut() = best.2;
    } else {
        log.selected_epoch = cfg.epochs;
    }
    info!(
        "{} training done: {} epochs, selected epoch {}, val psnr {:.3} -> {:.3} dB",
        describe(map.kind(), mode),
        cfg.epochs,
        log.selected_epoch,
        log.initial_val_psnr,
        log.epochs.last().map_or(f64::NAN, |r| r.val_psnr)
    );
    Ok(log)
}

/// Deep-equilibrium training with implicit gradients.
pub fn train_deq(map: &mut IterationMap, train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig) -> Result<TrainLog> {
    train(map, train_set, val_set, Mode::Equilibrium, cfg)
}

/// Deep-unrolled training through `k` tied-weight steps.
pub fn train_unrolled(map: &mut IterationMap, k: usize, train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig) -> Result<TrainLog> {
    if k == 0 {
        return Err(Error::invalid("unrolled depth K must be >= 1"));
    }
    train(map, train_set, val_set, Mode::Unrolled { k }, cfg)
}

/// Display name such as `de-prox` or `du-prox(K=10)`.
pub fn describe(kind: MapKind, mode: Mode) -> String {
    match mode {
        Mode::Equilibrium => kind.name().to_string(),
        Mode::Unrolled { k } => format!("du-{}(K={k})", &kind.name()[3..]),
    }
}

#[cfg(test)]
mod tests;
