//! Desk-scale experiment suites: iteration sweeps, engine timing, noise
//! sensitivity and the pretrained-vs-random initialization study.

mod suites;
mod workflow;


use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::deq::MapKind;
use crate::error::{Error, Result};
use crate::fixpoint::Engine;
use crate::linops::OperatorSpec;
use crate::rng::sub_seed;

pub use suites::{run_engine_comparison, run_init_study, run_iteration_sweep, run_noise_sensitivity};
pub use workflow::{
    denoiser_family, fit, prepare, tune, Budget, Inference, Model, ModelMeta, ModelSet, Scale, Setup,
};

/// Benchmark problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Problem {
    /// 9x9 Gaussian blur, variance 5, noise std 1e-2.
    DeblurHi,
    /// Same blur, noise std 1e-4.
    DeblurLo,
    /// Gaussian sensing matrix with 4x fewer rows than pixels.
    Cs4x,
    /// Single-coil Cartesian MRI, 4x acceleration.
    Mri4x,
    Mri8x,
}

impl Problem {
    pub const ALL: [Problem; 5] = [Problem::DeblurHi, Problem::DeblurLo, Problem::Cs4x, Problem::Mri4x, Problem::Mri8x];

    pub fn name(self) -> &'static str {
        match self {
            Problem::DeblurHi => "deblur-hi",
            Problem::DeblurLo => "deblur-lo",
            Problem::Cs4x => "cs4x",
            Problem::Mri4x => "mri4x",
            Problem::Mri8x => "mri8x",
        }
    }

    /// Measurement noise standard deviation.
    pub fn sigma(self) -> f64 {
        match self {
            Problem::DeblurLo => 1e-4,
            _ => 1e-2,
        }
    }

    pub fn default_size(self) -> usize {
        match self {
            Problem::Mri4x | Problem::Mri8x => 64,
            _ => 32,
        }
    }

    /// 2 for complex MRI images.
    pub fn channels(self) -> usize {
        match self {
            Problem::Mri4x | Problem::Mri8x => 2,
            _ => 1,
        }
    }

    pub fn is_complex(self) -> bool {
        self.channels() == 2
    }

    pub fn operator_spec(self, size: usize, seed: u64) -> OperatorSpec {
        let seed = sub_seed(seed, "operator");
        match self {
            Problem::DeblurHi | Problem::DeblurLo => OperatorSpec::Blur { size: 9, variance: 5.0, image_size: size },
            Problem::Cs4x => OperatorSpec::GaussianCs { image_size: size, undersampling: 4, seed },
            Problem::Mri4x => {
                OperatorSpec::SubsampledFourier { image_size: size, acceleration: 4.0, center_fraction: 0.04, seed }
            }
            Problem::Mri8x => {
                OperatorSpec::SubsampledFourier { image_size: size, acceleration: 8.0, center_fraction: 0.04, seed }
            }
        }
    }
}

impl fmt::Display for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Problem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Problem::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown problem {s:?}")))
    }
}

/// How a model's map is obtained and run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Family {
    /// Trained through the fixed point, run to convergence.
    Equilibrium,
    /// Trained and run for a fixed number of steps.
    Unrolled,
    /// Pretrained denoiser, no end-to-end training, run to convergence.
    PlugAndPlay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    DeGrad,
    DeProx,
    DeAdmm,
    DuGrad,
    DuProx,
    DuAdmm,
    PnpProx,
    PnpAdmm,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::DeGrad,
        Method::DeProx,
        Method::DeAdmm,
        Method::DuGrad,
        Method::DuProx,
        Method::DuAdmm,
        Method::PnpProx,
        Method::PnpAdmm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::DeGrad => "de-grad",
            Method::DeProx => "de-prox",
            Method::DeAdmm => "de-admm",
            Method::DuGrad => "du-grad",
            Method::DuProx => "du-prox",
            Method::DuAdmm => "du-admm",
            Method::PnpProx => "pnp-prox",
            Method::PnpAdmm => "pnp-admm",
        }
    }

    pub fn kind(self) -> MapKind {
        match self {
            Method::DeGrad | Method::DuGrad => MapKind::DeGrad,
            Method::DeProx | Method::DuProx | Method::PnpProx => MapKind::DeProx,
            Method::DeAdmm | Method::DuAdmm | Method::PnpAdmm => MapKind::DeAdmm,
        }
    }

    pub fn family(self) -> Family {
        match self {
            Method::DeGrad | Method::DeProx | Method::DeAdmm => Family::Equilibrium,
            Method::DuGrad | Method::DuProx | Method::DuAdmm => Family::Unrolled,
            Method::PnpProx | Method::PnpAdmm => Family::PlugAndPlay,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

fn default_tol() -> f64 {
    1e-3
}

fn default_max_iter() -> usize {
    1000
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// One experiment: a problem, the methods to compare and the sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub id: String,
    pub problem: Problem,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub engine: Engine,
    /// Stopping tolerance for equilibrium inference.
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Iteration cap for equilibrium inference.
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Iteration budgets for the iteration sweep.
    #[serde(default)]
    pub iterations: Vec<usize>,
    /// Absolute test-time noise levels for the noise sweep.
    #[serde(default)]
    pub noise: Vec<f64>,
    /// Test noise realizations; every record carries its seed.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl ExperimentSpec {
    pub fn new(id: impl Into<String>, problem: Problem, methods: Vec<Method>) -> Self {
        ExperimentSpec {
            id: id.into(),
            problem,
            methods,
            engine: Engine::Anderson,
            tol: default_tol(),
            max_iter: default_max_iter(),
            iterations: Vec::new(),
            noise: Vec::new(),
            seeds: default_seeds(),
        }
    }

    /// The multiples `{0.5, 1, 2, 4}` of the training noise level.
    pub fn default_noise_sweep(sigma_train: f64) -> Vec<f64> {
        [0.5, 1.0, 2.0, 4.0].iter().map(|m| m * sigma_train).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::Config(format!("experiment {:?} lists no methods", self.id)));
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            return Err(Error::Config(format!("experiment {:?} repeats a method", self.id)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config(format!("experiment {:?} has no seeds", self.id)));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::Config(format!("experiment {:?} needs tol > 0 and max_iter >= 1", self.id)));
        }
        if self.iterations.contains(&0) {
            return Err(Error::Config("iteration budgets must be >= 1".into()));
        }
        if self.noise.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::Config("noise levels must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("spec serializes").as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// One reconstruction of one test image under one setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment: String,
    pub problem: Problem,
    pub method: Method,
    /// Engine name or initialization variant, empty when not applicable.
    pub setting: String,
    /// Iteration budget or noise level, empty when not applicable.
    pub sweep: Option<f64>,
    pub seed: u64,
    pub image: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub iterations: usize,
    pub seconds: f64,
    pub seconds_per_iteration: f64,
    pub converged: bool,
}

/// Deterministic record order: setting, sweep point, method, seed, image.
pub(crate) fn sort_records(records: &mut [ResultRecord]) {
    records.sort_by(|a, b| {
        a.setting
            .cmp(&b.setting)
            .then(a.sweep.unwrap_or(f64::NAN).total_cmp(&b.sweep.unwrap_or(f64::NAN)))
            .then(a.method.cmp(&b.method))
            .then(a.seed.cmp(&b.seed))
            .then(a.image.cmp(&b.image))
    });
}

pub fn write_records<W: Write>(records: &[ResultRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_records(records: &[ResultRecord], path: impl AsRef<Path>) -> Result<()> {
    write_records(records, std::fs::File::create(path)?)
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<ResultRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Test-set means for one (method, setting, sweep point).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: Method,
    pub setting: String,
    pub sweep: Option<f64>,
    pub count: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_iterations: f64,
    pub median_iterations: f64,
    pub mean_seconds: f64,
    pub mean_seconds_per_iteration: f64,
    pub converged_fraction: f64,
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Groups records by (method, setting, sweep) in sorted order.
pub fn summarize(records: &[ResultRecord]) -> Vec<Summary> {
    type Key = (Method, String, u64);
    let mut groups: BTreeMap<Key, Vec<&ResultRecord>> = BTreeMap::new();
    for r in records {
        let sweep = r.sweep.map_or(u64::MAX, f64::to_bits);
        groups.entry((r.method, r.setting.clone(), sweep)).or_default().push(r);
    }
    groups
        .into_values()
        .map(|rs| {
            let n = rs.len() as f64;
            let mean = |f: fn(&ResultRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            let mut iters: Vec<f64> = rs.iter().map(|r| r.iterations as f64).collect();
            Summary {
                method: rs[0].method,
                setting: rs[0].setting.clone(),
                sweep: rs[0].sweep,
                count: rs.len(),
                mean_psnr: mean(|r| r.psnr),
                mean_ssim: mean(|r| r.ssim),
                mean_iterations: mean(|r| r.iterations as f64),
                median_iterations: median(&mut iters),
                mean_seconds: mean(|r| r.seconds),
                mean_seconds_per_iteration: mean(|r| r.seconds_per_iteration),
                converged_fraction: mean(|r| r.converged as u8 as f64),
            }
        })
        .collect()
}

pub fn write_summary<W: Write>(summary: &[Summary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in summary {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_summary(summary: &[Summary], path: impl AsRef<Path>) -> Result<()> {
    write_summary(summary, std::fs::File::create(path)?)
}

/// Provenance written next to every result CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub suite: String,
    pub spec: ExperimentSpec,
    pub spec_hash: String,
    /// Checkpoint file name to SHA-256.
    pub checkpoints: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub version: String,
    pub results: String,
    pub records: usize,
    pub created_unix: u64,
}

impl Manifest {
    pub fn new(suite: &str, spec: &ExperimentSpec, results: &str, records: usize) -> Self {
        let created_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        Manifest {
            suite: suite.to_string(),
            spec: spec.clone(),
            spec_hash: spec.hash(),
            checkpoints: BTreeMap::new(),
            seeds: BTreeMap::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            results: results.to_string(),
            records,
            created_unix,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
