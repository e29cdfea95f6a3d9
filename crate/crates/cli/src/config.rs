//! JSON run configuration. Flags override file values, which override
//! defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use deq_core::bench::{Budget, ExperimentSpec, Method, Problem, Scale};
use deq_core::dataset::{load_pgm_directory, Splits};
use deq_core::fixpoint::SolverConfig;
use deq_core::linops::{LinearOperator, OperatorSpec};
use deq_core::regnet::{NetSpec, PretrainConfig};
use deq_core::train::{GridSpec, TrainConfig};
use deq_core::rng::sub_seed;

/// Either a named benchmark problem or an explicit operator with its
/// noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default)]
    pub preset: Option<Problem>,
    #[serde(default)]
    pub operator: Option<OperatorSpec>,
    /// Noise std; the preset's level when absent.
    #[serde(default)]
    pub sigma: Option<f64>,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        ProblemConfig { preset: Some(Problem::DeblurHi), operator: None, sigma: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Directory of PGM images; synthetic phantoms when absent.
    pub directory: Option<PathBuf>,
    /// Image side; the preset's size when absent.
    pub size: Option<usize>,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { directory: None, size: None, train: 64, val: 8, test: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub methods: Vec<Method>,
    pub engine: deq_core::fixpoint::Engine,
    pub tol: f64,
    pub max_iter: usize,
    pub iterations: Vec<usize>,
    /// Absolute test noise levels; multiples 0.5/1/2/4 of the training
    /// level when absent.
    pub noise: Option<Vec<f64>>,
    pub seeds: Vec<u64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            methods: vec![Method::DeProx],
            engine: Default::default(),
            tol: 1e-3,
            max_iter: 1000,
            iterations: vec![1, 2, 5, 10, 20, 40, 80],
            noise: None,
            seeds: vec![0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub seed: u64,
    pub threads: Option<usize>,
    pub out: PathBuf,
    pub problem: ProblemConfig,
    pub dataset: DatasetConfig,
    /// Regularizer architecture; a small net sized for the problem when
    /// absent.
    pub net: Option<NetSpec>,
    /// Inference solver for `reconstruct`, `certify` and evaluation.
    pub solver: SolverConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub grid: GridSpec,
    /// Solver scoring plug-and-play inference in the grid search.
    pub pnp: SolverConfig,
    /// Unrolled depth `K` of DU methods.
    pub unroll: usize,
    /// Where `train` looks for pretrained denoisers; `<out>/pretrain`
    /// when absent.
    pub pretrained: Option<PathBuf>,
    pub bench: BenchConfig,
}

impl Default for Config {
    fn default() -> Self {
        let budget = Budget::default();
        Config {
            seed: 0,
            threads: None,
            out: PathBuf::from("out"),
            problem: ProblemConfig::default(),
            dataset: DatasetConfig::default(),
            net: None,
            solver: SolverConfig::forward(),
            pretrain: budget.pretrain,
            train: budget.train,
            grid: budget.grid,
            pnp: budget.pnp,
            unroll: budget.unroll,
            pretrained: None,
            bench: BenchConfig::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Config = serde_json::from_str(&text).with_context(|| format!("config {}", path.display()))?;
        Ok(cfg)
    }

    /// Derives the named sub-seed of every component that draws
    /// randomness from `self.seed`.
    pub fn derive_seeds(&mut self) {
        self.pretrain.seed = sub_seed(self.seed, "pretrain");
        self.train.seed = sub_seed(self.seed, "training");
    }

    pub fn data_seed(&self) -> u64 {
        sub_seed(self.seed, "dataset")
    }

    pub fn scale(&self) -> Scale {
        let d = &self.dataset;
        Scale { size: Some(self.image_size()), train: d.train, val: d.val, test: d.test, seed: self.data_seed() }
    }

    pub fn budget(&self) -> Budget {
        Budget {
            pretrain: self.pretrain.clone(),
            train: self.train.clone(),
            grid: self.grid.clone(),
            pnp: self.pnp,
            unroll: self.unroll,
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let p = &self.problem;
        match (&p.preset, &p.operator) {
            (Some(_), Some(_)) => bail!("problem: give either `preset` or `operator`, not both"),
            (None, None) => bail!("problem: one of `preset` or `operator` is required"),
            (None, Some(_)) if p.sigma.is_none() => bail!("problem: an explicit operator needs `sigma`"),
            _ => {}
        }
        if let Some(s) = p.sigma {
            if !(s >= 0.0 && s.is_finite()) {
                bail!("problem.sigma must be finite and >= 0, got {s}");
            }
        }
        let d = &self.dataset;
        if d.train == 0 && d.val == 0 && d.test == 0 {
            bail!("dataset: all splits are empty");
        }
        self.solver.validate().context("solver")?;
        self.train.validate().context("train")?;
        self.pnp.validate().context("pnp")?;
        if self.unroll == 0 {
            bail!("unroll must be >= 1");
        }
        if self.pretrain.sigma_levels.is_empty() {
            bail!("pretrain.sigma_levels is empty");
        }
        if self.threads == Some(0) {
            bail!("threads must be >= 1");
        }
        if let Some(net) = &self.net {
            if net.channels != self.image_channels() {
                bail!("net.channels is {} but the problem images have {}", net.channels, self.image_channels());
            }
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.problem.sigma.or(self.problem.preset.map(Problem::sigma)).unwrap_or(0.0)
    }

    pub fn image_size(&self) -> usize {
        match (&self.problem.operator, self.problem.preset) {
            (Some(op), _) => op.domain().width,
            (None, Some(p)) => self.dataset.size.unwrap_or(p.default_size()),
            (None, None) => 32,
        }
    }

    pub fn image_channels(&self) -> usize {
        match (&self.problem.operator, self.problem.preset) {
            (Some(op), _) => op.domain().channels,
            (None, Some(p)) => p.channels(),
            (None, None) => 1,
        }
    }

    pub fn operator_spec(&self) -> OperatorSpec {
        match (&self.problem.operator, self.problem.preset) {
            (Some(op), _) => op.clone(),
            (None, Some(p)) => p.operator_spec(self.image_size(), self.data_seed()),
            (None, None) => unreachable!("validated"),
        }
    }

    pub fn operator(&self) -> deq_core::Result<LinearOperator> {
        self.operator_spec().build()
    }

    pub fn net_spec(&self) -> NetSpec {
        self.net.unwrap_or(NetSpec {
            channels: self.image_channels(),
            hidden: 8,
            depth: 4,
            kernel: 3,
            residual: true,
            spectral_size: self.image_size(),
        })
    }

    /// Builds the train/val/test instance, from phantoms or the image
    /// directory.
    pub fn setup(&self) -> anyhow::Result<deq_core::bench::Setup> {
        let scale = self.scale();
        if self.dataset.directory.is_none() && self.problem.operator.is_none() {
            let problem = self.problem.preset.expect("validated");
            let mut setup = deq_core::bench::prepare(problem, &scale)?;
            if let Some(sigma) = self.problem.sigma {
                setup = deq_core::bench::Setup::from_parts(setup.op, sigma, setup.images, scale.seed)?;
            }
            return Ok(setup);
        }
        let total = scale.train + scale.val + scale.test;
        let images = match &self.dataset.directory {
            Some(dir) => load_pgm_directory(dir, scale.size.expect("set above"), total)?,
            None => deq_core::dataset::generate_phantoms(&deq_core::dataset::DatasetSpec::phantoms(
                total,
                self.image_size(),
                sub_seed(scale.seed, "dataset"),
            ))?,
        };
        if images.len() < total {
            bail!("dataset: needed {total} images, found {}", images.len());
        }
        let mut images = images;
        if self.image_channels() == 2 {
            let mut rng = deq_core::rng::SeededRng::new(sub_seed(scale.seed, "phase"));
            images = images.iter().map(|im| deq_core::dataset::to_complex(im, &mut rng)).collect::<Result<_, _>>()?;
        }
        let mut it = images.into_iter();
        let splits = Splits {
            train: it.by_ref().take(scale.train).collect(),
            val: it.by_ref().take(scale.val).collect(),
            test: it.collect(),
        };
        Ok(deq_core::bench::Setup::from_parts(self.operator()?, self.sigma(), splits, scale.seed)?)
    }

    pub fn experiment(&self, suite: &str) -> ExperimentSpec {
        let b = &self.bench;
        let problem = self.problem.preset.unwrap_or(Problem::DeblurHi);
        let mut spec = ExperimentSpec::new(format!("{}-{suite}", problem.name()), problem, b.methods.clone());
        spec.engine = b.engine;
        spec.tol = b.tol;
        spec.max_iter = b.max_iter;
        spec.iterations = b.iterations.clone();
        spec.noise = b.noise.clone().unwrap_or_else(|| ExperimentSpec::default_noise_sweep(self.sigma()));
        spec.seeds = b.seeds.clone();
        spec
    }

    pub fn pretrained_dir(&self) -> PathBuf {
        self.pretrained.clone().unwrap_or_else(|| self.out.join("pretrain"))
    }

    pub fn models_dir(&self) -> PathBuf {
        self.out.join("models")
    }
}
