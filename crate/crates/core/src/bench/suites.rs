use log::{info, warn};

use super::workflow::fixed_steps;
use super::{sort_records, ExperimentSpec, Family, Method, ResultRecord};
use super::{fit, Budget, Inference, Model, ModelSet, Setup};
use crate::deq::IterationMap;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fixpoint::{Engine, SolverConfig};
use crate::regnet::{NetSpec, RegNet};
use crate::rng::sub_seed;
use crate::tensor::Tensor;
use crate::train::Sample;

/// Every method of `spec` must have a model; all missing ones are
/// reported together.
fn require<'a>(spec: &ExperimentSpec, models: &'a ModelSet) -> Result<Vec<(Method, &'a Model)>> {
    let missing: Vec<String> = spec
        .methods
        .iter()
        .filter(|m| !models.contains_key(m))
        .map(|m| format!("{m} checkpoint"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingPrerequisites(missing));
    }
    Ok(spec.methods.iter().map(|m| (*m, &models[m])).collect())
}

fn solver_of(spec: &ExperimentSpec, engine: Engine) -> SolverConfig {
    SolverConfig { engine, tol: spec.tol, max_iter: spec.max_iter, ..SolverConfig::forward() }
}

struct Row<'a> {
    spec: &'a ExperimentSpec,
    method: Method,
    setting: String,
    sweep: Option<f64>,
    seed: u64,
    image: usize,
}

impl Row<'_> {
    fn record(self, image: &Tensor, reference: &Tensor, iterations: usize, seconds: f64, residual: f64) -> Result<ResultRecord> {
        let q = crate::metrics::quality(image, reference)?;
        Ok(ResultRecord {
            experiment: self.spec.id.clone(),
            problem: self.spec.problem,
            method: self.method,
            setting: self.setting,
            sweep: self.sweep,
            seed: self.seed,
            image: self.image,
            psnr: q.psnr,
            ssim: q.ssim.unwrap_or(f64::NAN),
            iterations,
            seconds,
            seconds_per_iteration: if iterations > 0 { seconds / iterations as f64 } else { 0.0 },
            converged: residual <= self.spec.tol,
        })
    }

    fn from_inference(self, inf: &Inference, reference: &Tensor) -> Result<ResultRecord> {
        let s = &inf.solve;
        self.record(&inf.image, reference, s.iterations, s.seconds, s.last_residual())
    }
}

fn collect(rows: Vec<Result<Vec<ResultRecord>>>) -> Result<Vec<ResultRecord>> {
    let mut out = Vec::new();
    for r in rows {
        out.extend(r?);
    }
    sort_records(&mut out);
    Ok(out)
}

/// Runs every method for exactly each budget in `spec.iterations`.
/// Unrolled methods keep taking plain steps past their training depth;
/// the others use `spec.engine`. A single run to the largest budget is
/// sampled at every smaller one, which matches separate runs because no
/// early stopping takes place.
pub fn run_iteration_sweep(spec: &ExperimentSpec, setup: &Setup, models: &ModelSet, exec: Exec) -> Result<Vec<ResultRecord>> {
    spec.validate()?;
    if spec.iterations.is_empty() {
        return Err(Error::Config(format!("experiment {:?}: iteration sweep is empty", spec.id)));
    }
    let chosen = require(spec, models)?;
    let mut budgets = spec.iterations.clone();
    budgets.sort_unstable();
    budgets.dedup();
    let k_max = *budgets.last().expect("nonempty");
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        for &(method, model) in &chosen {
            let samples = setup.test_samples(setup.sigma, seed, model.init)?;
            let engine = if method.family() == Family::Unrolled { Engine::Picard } else { spec.engine };
            let solver = fixed_steps(engine, k_max);
            rows.extend(exec.map_range(samples.len(), |i| -> Result<Vec<ResultRecord>> {
                let mut snaps: Vec<(usize, Tensor)> = Vec::new();
                let mut obs = |k: usize, img: &Tensor| {
                    if budgets.binary_search(&k).is_ok() {
                        snaps.push((k, img.clone()));
                    }
                };
                let inf = model.run(&samples[i], &solver, Some(&mut obs))?;
                let s = &inf.solve;
                budgets
                    .iter()
                    .map(|&k| {
                        // A run that hit an exact fixed point early stays there.
                        let done = k.min(s.iterations);
                        let image = snaps.iter().find(|(j, _)| *j == done).map_or(&inf.image, |(_, im)| im);
                        let row = Row { spec, method, setting: String::new(), sweep: Some(k as f64), seed, image: i };
                        row.record(image, &samples[i].x_star, done, s.cumulative_seconds[done - 1], s.residual_history[done - 1])
                    })
                    .collect()
            }));
        }
    }
    collect(rows)
}

/// Inference with Picard, Anderson and Broyden on every test image, each
/// stopping at `spec.tol`.
pub fn run_engine_comparison(spec: &ExperimentSpec, setup: &Setup, models: &ModelSet, exec: Exec) -> Result<Vec<ResultRecord>> {
    spec.validate()?;
    let chosen = require(spec, models)?;
    if let Some((m, _)) = chosen.iter().find(|(m, _)| m.family() == Family::Unrolled) {
        return Err(Error::Config(format!("engine comparison needs equilibrium models, {m} is unrolled")));
    }
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        for &(method, model) in &chosen {
            let samples = setup.test_samples(setup.sigma, seed, model.init)?;
            rows.extend(exec.map_range(samples.len(), |i| -> Result<Vec<ResultRecord>> {
                [Engine::Picard, Engine::Anderson, Engine::Broyden]
                    .into_iter()
                    .map(|engine| {
                        let inf = model.run(&samples[i], &solver_of(spec, engine), None)?;
                        let row = Row { spec, method, setting: engine.name().into(), sweep: None, seed, image: i };
                        row.from_inference(&inf, &samples[i].x_star)
                    })
                    .collect()
            }));
        }
    }
    collect(rows)
}

/// Evaluates every model at each test noise level in `spec.noise`
/// without retraining. Models keep the starting-point policy of their
/// training noise level.
pub fn run_noise_sensitivity(spec: &ExperimentSpec, setup: &Setup, models: &ModelSet, exec: Exec) -> Result<Vec<ResultRecord>> {
    spec.validate()?;
    let chosen = require(spec, models)?;
    let solver = solver_of(spec, spec.engine);
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        for &sigma in &spec.noise {
            for &(_, model) in &chosen {
                let samples = setup.test_samples(sigma, seed, model.init)?;
                rows.extend(evaluate_rows(spec, model, &samples, &solver, String::new(), Some(sigma), seed, exec));
            }
        }
    }
    collect(rows)
}

#[allow(clippy::too_many_arguments)]
fn evaluate_rows(
    spec: &ExperimentSpec,
    model: &Model,
    samples: &[Sample],
    solver: &SolverConfig,
    setting: String,
    sweep: Option<f64>,
    seed: u64,
    exec: Exec,
) -> Vec<Result<Vec<ResultRecord>>> {
    exec.map_range(samples.len(), |i| {
        let inf = model.infer(&samples[i], solver)?;
        let row = Row { spec, method: model.method, setting: setting.clone(), sweep, seed, image: i };
        Ok(vec![row.from_inference(&inf, &samples[i].x_star)?])
    })
}

/// Trains every equilibrium method of `spec` twice under the same
/// budget and step size: from its tuned pretrained model in `pretrained`
/// and from a seeded random network of architecture `net`. Records carry
/// the variant (`pretrained` or `random`) as their setting. A failed
/// training run leaves its variant without records.
pub fn run_init_study(
    spec: &ExperimentSpec,
    setup: &Setup,
    pretrained: &ModelSet,
    net: NetSpec,
    budget: &Budget,
    exec: Exec,
) -> Result<Vec<ResultRecord>> {
    spec.validate()?;
    let chosen = require(spec, pretrained)?;
    if let Some((m, _)) = chosen.iter().find(|(m, _)| m.family() != Family::Equilibrium) {
        return Err(Error::Config(format!("initialization study trains equilibrium methods only, got {m}")));
    }
    let solver = solver_of(spec, spec.engine);
    let mut rows = Vec::new();
    for &(method, tuned) in &chosen {
        let random_net = RegNet::new(net, sub_seed(budget.train.seed, "random-init"))?;
        let random_map = IterationMap::new(method.kind(), setup.op.clone(), random_net, tuned.map.step())?;
        let random = Model { map: random_map, denoiser_sigma: None, ..tuned.clone() };
        for (variant, start) in [("pretrained", tuned.clone()), ("random", random)] {
            let mut model = start;
            match fit(&mut model, setup, budget) {
                Ok(log) => info!(
                    "{method} ({variant} init): selected epoch {}, val psnr {:.3} dB",
                    log.selected_epoch,
                    log.epochs.get(log.selected_epoch.wrapping_sub(1)).map_or(log.initial_val_psnr, |r| r.val_psnr)
                ),
                Err(e) => {
                    warn!("{method} ({variant} init): training failed: {e}");
                    continue;
                }
            }
            for &seed in &spec.seeds {
                let samples = setup.test_samples(setup.sigma, seed, model.init)?;
                rows.extend(evaluate_rows(spec, &model, &samples, &solver, variant.into(), None, seed, exec));
            }
        }
    }
    collect(rows)
}
