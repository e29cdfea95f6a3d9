//! Shared pipeline pieces: toy problem instances, denoiser pretraining,
//! PnP tuning, end-to-end training and model files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::{sha256_hex, Family, Method, Problem};
use crate::dataset::{generate_phantoms, to_complex, DatasetSpec, Splits};
use crate::deq::{InitPolicy, IterationMap, MapKind};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fixpoint::{solve_observed, Engine, FixedPointResult, SolverConfig};
use crate::linops::LinearOperator;
use crate::metrics::{quality, Quality};
use crate::regnet::{decode_checkpoint, encode_checkpoint, pretrain_denoiser, NetSpec, PretrainConfig, RegNet};
use crate::rng::{sub_seed, SeededRng};
use crate::tensor::Tensor;
use crate::train::{grid_search, make_samples, train_deq, train_unrolled, GridResult, GridSpec, Mode, Sample, TrainConfig, TrainLog};

/// Dataset sizes of a desk-scale instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scale {
    /// Image side; the problem default when absent.
    pub size: Option<usize>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for Scale {
    fn default() -> Self {
        Scale { size: None, train: 160, val: 16, test: 32, seed: 0 }
    }
}

/// An operator with its noise level, clean image splits and the noisy
/// samples derived from them.
#[derive(Debug, Clone)]
pub struct Setup {
    pub op: LinearOperator,
    pub sigma: f64,
    pub init: InitPolicy,
    pub seed: u64,
    pub images: Splits,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Setup {
    /// Measures `images` with `op` at noise std `sigma`; each split draws
    /// its noise from its own sub-seed of `seed`.
    pub fn from_parts(op: LinearOperator, sigma: f64, images: Splits, seed: u64) -> Result<Self> {
        let init = InitPolicy::for_operator(&op, sigma);
        let train = make_samples(&op, &images.train, sigma, sub_seed(seed, "noise-train"), init)?;
        let val = make_samples(&op, &images.val, sigma, sub_seed(seed, "noise-val"), init)?;
        let test = make_samples(&op, &images.test, sigma, sub_seed(seed, "noise-test"), init)?;
        Ok(Setup { op, sigma, init, seed, images, train, val, test })
    }

    /// Test samples at noise std `sigma` for noise seed `seed`, started
    /// with `init`.
    pub fn test_samples(&self, sigma: f64, seed: u64, init: InitPolicy) -> Result<Vec<Sample>> {
        make_samples(&self.op, &self.images.test, sigma, sub_seed(seed, "noise-test"), init)
    }
}

/// Synthetic phantom instance of `problem`. Complex problems get a smooth
/// random phase per image.
pub fn prepare(problem: Problem, scale: &Scale) -> Result<Setup> {
    let size = scale.size.unwrap_or(problem.default_size());
    let total = scale.train + scale.val + scale.test;
    let mut images = generate_phantoms(&DatasetSpec::phantoms(total, size, sub_seed(scale.seed, "dataset")))?;
    if problem.is_complex() {
        let mut rng = SeededRng::new(sub_seed(scale.seed, "phase"));
        images = images.iter().map(|im| to_complex(im, &mut rng)).collect::<Result<_>>()?;
    }
    let mut it = images.into_iter();
    let splits = Splits {
        train: it.by_ref().take(scale.train).collect(),
        val: it.by_ref().take(scale.val).collect(),
        test: it.collect(),
    };
    let op = problem.operator_spec(size, scale.seed).build()?;
    Setup::from_parts(op, problem.sigma(), splits, scale.seed)
}

/// Training and tuning knobs shared by every method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budget {
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub grid: GridSpec,
    /// Solver used to score plug-and-play inference during tuning.
    pub pnp: SolverConfig,
    /// Unrolled depth of DU methods.
    pub unroll: usize,
}

impl Default for Budget {
    fn default() -> Self {
        Budget {
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            grid: GridSpec::default(),
            pnp: SolverConfig::forward().with_engine(Engine::Picard),
            unroll: 10,
        }
    }
}

/// Pretrains one denoiser per noise level in `cfg`, all from the same
/// zero-output initialization.
pub fn denoiser_family(spec: NetSpec, clean: &[Tensor], cfg: &PretrainConfig) -> Result<Vec<(f64, RegNet)>> {
    let start = RegNet::new_zero_output(spec, sub_seed(cfg.seed, "init"))?;
    Ok(pretrain_denoiser(&start, clean, cfg)?.into_iter().map(|d| (d.sigma, d.net)).collect())
}

/// A ready-to-run reconstruction model.
#[derive(Debug, Clone)]
pub struct Model {
    pub method: Method,
    pub map: IterationMap,
    /// Step count for unrolled methods.
    pub unroll: Option<usize>,
    pub init: InitPolicy,
    pub sigma_train: f64,
    /// Noise level of the pretrained denoiser the model started from.
    pub denoiser_sigma: Option<f64>,
}

pub type ModelSet = BTreeMap<Method, Model>;

/// One inference run.
#[derive(Debug, Clone)]
pub struct Inference {
    pub image: Tensor,
    pub solve: FixedPointResult,
}

impl Inference {
    pub fn quality(&self, reference: &Tensor) -> Result<Quality> {
        quality(&self.image, reference)
    }
}

/// Runs `k` steps exactly.
pub(crate) fn fixed_steps(engine: Engine, k: usize) -> SolverConfig {
    SolverConfig { engine, tol: f64::MIN_POSITIVE, max_iter: k, ..SolverConfig::forward() }
}

impl Model {
    pub fn new(method: Method, map: IterationMap, unroll: usize, init: InitPolicy, sigma_train: f64) -> Result<Self> {
        if map.kind() != method.kind() {
            return Err(Error::invalid(format!("{method} needs a {} map, got {}", method.kind().name(), map.kind().name())));
        }
        let unroll = (method.family() == Family::Unrolled).then_some(unroll);
        if unroll == Some(0) {
            return Err(Error::invalid("unrolled depth K must be >= 1"));
        }
        Ok(Model { method, map, unroll, init, sigma_train, denoiser_sigma: None })
    }

    /// Training mode matching the method family.
    pub fn mode(&self) -> Mode {
        match self.unroll {
            Some(k) => Mode::Unrolled { k },
            None => Mode::Equilibrium,
        }
    }

    /// Default inference: `K` plain steps for unrolled methods, `solver`
    /// to convergence otherwise.
    pub fn infer(&self, sample: &Sample, solver: &SolverConfig) -> Result<Inference> {
        match self.unroll {
            Some(k) => self.run(sample, &fixed_steps(Engine::Picard, k), None),
            None => self.run(sample, solver, None),
        }
    }

    /// Runs `solver` from the sample's starting point, reporting each
    /// iterate's image to `observer`.
    pub fn run(
        &self,
        sample: &Sample,
        solver: &SolverConfig,
        mut observer: Option<&mut dyn FnMut(usize, &Tensor)>,
    ) -> Result<Inference> {
        let bound = self.map.bind(&sample.y)?;
        let shape = self.map.image_shape();
        let n = shape.len();
        let mut inner = |k: usize, s: &[f64]| {
            if let Some(obs) = observer.as_mut() {
                if let Ok(img) = Tensor::new(shape, s[..n].to_vec()) {
                    obs(k, &img);
                }
            }
        };
        let solve = solve_observed(|s| bound.apply(s), &self.map.initial_state(&sample.x0)?, solver, Some(&mut inner))?;
        Ok(Inference { image: self.map.image_of(&solve.point)?, solve })
    }

    pub fn meta(&self, checkpoint: &str, sha256: &str) -> ModelMeta {
        ModelMeta {
            method: self.method,
            step: self.map.step(),
            unroll: self.unroll,
            init: self.init,
            sigma_train: self.sigma_train,
            denoiser_sigma: self.denoiser_sigma,
            checkpoint: checkpoint.to_string(),
            checkpoint_sha256: sha256.to_string(),
        }
    }

    /// Writes `<stem>.dqw` and the `<stem>.json` sidecar into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<ModelMeta> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let bytes = encode_checkpoint(self.map.net());
        let file = format!("{stem}.dqw");
        std::fs::write(dir.join(&file), &bytes)?;
        let meta = self.meta(&file, &sha256_hex(&bytes));
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(meta)
    }

    /// Loads a model from its JSON sidecar; the checkpoint is resolved
    /// relative to the sidecar and must match the recorded hash.
    pub fn load(meta_path: impl AsRef<Path>, op: LinearOperator) -> Result<(Model, ModelMeta)> {
        let meta_path = meta_path.as_ref();
        if !meta_path.exists() {
            return Err(Error::MissingArtifact(meta_path.to_path_buf()));
        }
        let meta: ModelMeta = serde_json::from_slice(&std::fs::read(meta_path)?)
            .map_err(|e| Error::Config(format!("{}: {e}", meta_path.display())))?;
        let ckpt = meta_path.parent().map_or_else(|| PathBuf::from(&meta.checkpoint), |d| d.join(&meta.checkpoint));
        if !ckpt.exists() {
            return Err(Error::MissingArtifact(ckpt));
        }
        let bytes = std::fs::read(&ckpt)?;
        let sha = sha256_hex(&bytes);
        if sha != meta.checkpoint_sha256 {
            return Err(Error::Format(format!("{} hash {sha} does not match its sidecar", ckpt.display())));
        }
        let map = IterationMap::new(meta.method.kind(), op, decode_checkpoint(&bytes)?, meta.step)?;
        let mut model = Model::new(meta.method, map, meta.unroll.unwrap_or(1), meta.init, meta.sigma_train)?;
        model.denoiser_sigma = meta.denoiser_sigma;
        Ok((model, meta))
    }
}

/// Sidecar describing a saved model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub method: Method,
    pub step: f64,
    pub unroll: Option<usize>,
    pub init: InitPolicy,
    pub sigma_train: f64,
    pub denoiser_sigma: Option<f64>,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
}

/// Grid-searches plug-and-play inference over the pretrained `family`
/// and returns the best point as a `method` model. Unrolled methods are
/// scored after `K` steps, the others at equilibrium.
pub fn tune(method: Method, setup: &Setup, family: &[(f64, RegNet)], budget: &Budget, exec: Exec) -> Result<(GridResult, Model)> {
    let kind: MapKind = method.kind();
    let mode = match method.family() {
        Family::Unrolled => Mode::Unrolled { k: budget.unroll },
        _ => Mode::Equilibrium,
    };
    let grid = grid_search(kind, &setup.op, family, &budget.grid, &setup.val, mode, &budget.pnp, exec)?;
    let best = grid.best;
    info!("{method}: PnP grid best step {:.4e}, denoiser sigma {}, {:.3} dB", best.step, best.sigma, best.psnr);
    let net = family
        .iter()
        .find(|(s, _)| *s == best.sigma)
        .map(|(_, n)| n.clone())
        .expect("grid point comes from the family");
    let map = IterationMap::new(kind, setup.op.clone(), net, best.step)?;
    let mut model = Model::new(method, map, budget.unroll, setup.init, setup.sigma)?;
    model.denoiser_sigma = Some(best.sigma);
    Ok((grid, model))
}

/// End-to-end training on the setup's train/val splits. Plug-and-play
/// models are returned untouched with an empty log.
pub fn fit(model: &mut Model, setup: &Setup, budget: &Budget) -> Result<TrainLog> {
    match model.unroll {
        _ if model.method.family() == Family::PlugAndPlay => Ok(TrainLog::default()),
        Some(k) => train_unrolled(&mut model.map, k, &setup.train, &setup.val, &budget.train),
        None => train_deq(&mut model.map, &setup.train, &setup.val, &budget.train),
    }
}
