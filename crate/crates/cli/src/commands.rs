use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use deq_core::bench::{
    denoiser_family, fit, save_records, save_summary, sha256_hex, summarize, tune, Family, Manifest, Method, Model, ModelMeta,
    ModelSet,
};
use deq_core::deq::{certify_contraction, empirical_contraction, ContractionCertificate, ContractionRate, IterationMap, MapKind, Theorem};
use deq_core::fixpoint::{Engine, SolverConfig};
use deq_core::io::{read_tensor, write_tensor, DType};
use deq_core::linops::{spectral_bounds, LinearOperator, SpectralBounds};
use deq_core::metrics::quality;
use deq_core::regnet::{decode_checkpoint, encode_checkpoint, lipschitz_estimate, LipschitzEstimate, NetSpec, RegNet};
use deq_core::rng::sub_seed;
use deq_core::{Error, Exec};

use crate::config::Config;
use crate::{usage, Suite};

const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DenoiserEntry {
    sigma: f64,
    checkpoint: String,
    sha256: String,
}

/// Index of a pretrained denoiser family.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PretrainManifest {
    version: String,
    seed: u64,
    net: NetSpec,
    epochs: usize,
    denoisers: Vec<DenoiserEntry>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn checkpoint_name(sigma: f64) -> String {
    format!("denoiser-sigma{sigma}.dqw")
}

pub fn pretrain(cfg: &Config) -> anyhow::Result<()> {
    let setup = cfg.setup()?;
    if setup.images.train.is_empty() {
        return Err(usage("pretraining needs training images (dataset.train > 0)"));
    }
    let dir = cfg.pretrained_dir();
    std::fs::create_dir_all(&dir)?;
    let spec = cfg.net_spec();
    info!("pretraining {} denoisers on {} images", cfg.pretrain.sigma_levels.len(), setup.images.train.len());
    let family = denoiser_family(spec, &setup.images.train, &cfg.pretrain)?;
    let mut denoisers = Vec::new();
    for (sigma, net) in &family {
        let bytes = encode_checkpoint(net);
        let name = checkpoint_name(*sigma);
        std::fs::write(dir.join(&name), &bytes)?;
        denoisers.push(DenoiserEntry { sigma: *sigma, checkpoint: name, sha256: sha256_hex(&bytes) });
    }
    let manifest = PretrainManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        net: spec,
        epochs: cfg.pretrain.epochs,
        denoisers,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    info!("wrote {} checkpoints to {}", family.len(), dir.display());
    Ok(())
}

/// Reads the pretrained family, listing every missing or corrupt file.
fn load_family(cfg: &Config) -> anyhow::Result<Vec<(f64, RegNet)>> {
    let dir = cfg.pretrained_dir();
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingPrerequisites(vec![format!("{} (run `deq pretrain`)", path.display())]).into());
    }
    let manifest: PretrainManifest =
        serde_json::from_slice(&std::fs::read(&path)?).with_context(|| format!("parsing {}", path.display()))?;
    let mut missing = Vec::new();
    let mut family = Vec::new();
    for d in &manifest.denoisers {
        let file = dir.join(&d.checkpoint);
        match std::fs::read(&file) {
            Ok(bytes) if sha256_hex(&bytes) == d.sha256 => family.push((d.sigma, decode_checkpoint(&bytes)?)),
            Ok(_) => missing.push(format!("{} (hash does not match the manifest)", file.display())),
            Err(_) => missing.push(file.display().to_string()),
        }
    }
    for s in &cfg.grid.sigma {
        if !manifest.denoisers.iter().any(|d| (d.sigma - s).abs() <= 1e-12 * s.abs().max(1.0)) {
            missing.push(format!("pretrained denoiser for sigma {s}"));
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingPrerequisites(missing).into());
    }
    Ok(family)
}

/// A step size with a stable plain iteration when no grid search is run:
/// `0.9 / (L + 1)` for DE-Grad, `1 / L` for DE-Prox, `1` for DE-ADMM.
fn default_step(kind: MapKind, op: &LinearOperator) -> anyhow::Result<f64> {
    Ok(match kind {
        MapKind::DeAdmm => 1.0,
        MapKind::DeGrad => 0.9 / (spectral_bounds(op, 1e-6, 1000)?.l + 1.0),
        MapKind::DeProx => 1.0 / spectral_bounds(op, 1e-6, 1000)?.l,
    })
}

fn log_admm_certificate(map: &IterationMap, seed: u64) -> anyhow::Result<()> {
    let bounds = spectral_bounds(map.operator(), 1e-6, 1000)?;
    let eps = lipschitz_estimate(map.net(), map.image_shape(), 4, 10, seed)?.epsilon;
    let cert = certify_contraction(Theorem::Admm, bounds.l, bounds.mu, eps, map.step());
    if cert.satisfied {
        info!("ADMM contraction certificate holds: alpha {} > {:?}", map.step(), cert.threshold);
    } else {
        warn!(
            "ADMM contraction certificate unsatisfiable ({}); training proceeds without a convergence guarantee",
            cert.reason.as_deref().unwrap_or("unknown")
        );
    }
    Ok(())
}

pub fn train(cfg: &Config, method: Method, random: bool) -> anyhow::Result<()> {
    if random && method.family() == Family::PlugAndPlay {
        return Err(usage(format!("{method} is not trained; --init random does not apply")));
    }
    let setup = cfg.setup()?;
    if method.family() != Family::PlugAndPlay && (setup.train.is_empty() || setup.val.is_empty()) {
        return Err(usage("training needs nonempty train and val splits"));
    }
    let budget = cfg.budget();
    let dir = cfg.models_dir();
    std::fs::create_dir_all(&dir)?;
    let kind = method.kind();
    let mut model = match load_family(cfg) {
        Ok(family) => {
            let (grid, model) = tune(method, &setup, &family, &budget, Exec::Parallel)?;
            grid.save_csv(dir.join(format!("{method}-grid.csv")))?;
            model
        }
        Err(e) if random => {
            warn!("{e:#}; using the default step size");
            let net = RegNet::zeros(cfg.net_spec())?;
            let map = IterationMap::new(kind, setup.op.clone(), net, default_step(kind, &setup.op)?)?;
            Model::new(method, map, budget.unroll, setup.init, setup.sigma)?
        }
        Err(e) => return Err(e),
    };
    if random {
        *model.map.net_mut() = RegNet::new(cfg.net_spec(), sub_seed(cfg.train.seed, "random-init"))?;
        model.denoiser_sigma = None;
    } else if method.family() != Family::PlugAndPlay {
        model.save(&dir, &format!("{method}-start"))?;
    }
    if kind == MapKind::DeAdmm {
        log_admm_certificate(&model.map, sub_seed(cfg.seed, "certify"))?;
    }
    if method.family() != Family::PlugAndPlay {
        let log = fit(&mut model, &setup, &budget)?;
        log.save_csv(dir.join(format!("{method}-train-log.csv")))?;
        info!("{method}: {} epochs, selected epoch {}", log.epochs.len(), log.selected_epoch);
    }
    let meta = model.save(&dir, method.name())?;
    if !setup.test.is_empty() {
        let mut total = 0.0;
        for s in &setup.test {
            total += model.infer(s, &cfg.solver)?.quality(&s.x_star)?.psnr;
        }
        info!("{method}: mean test PSNR {:.3} dB over {} images", total / setup.test.len() as f64, setup.test.len());
    }
    info!("wrote {}", dir.join(&meta.checkpoint).display());
    Ok(())
}

/// Accepts the sidecar JSON or the checkpoint next to it.
fn sidecar(path: &Path) -> PathBuf {
    if path.extension().is_some_and(|e| e == "dqw") {
        path.with_extension("json")
    } else {
        path.to_path_buf()
    }
}

fn load_model(cfg: &Config, path: &Path) -> anyhow::Result<(Model, ModelMeta)> {
    let path = sidecar(path);
    Model::load(&path, cfg.operator()?).with_context(|| format!("loading model {}", path.display()))
}

#[derive(Debug, Serialize)]
struct ReconstructReport {
    psnr: Option<f64>,
    ssim: Option<f64>,
    iterations: usize,
    seconds: f64,
    converged: bool,
    final_residual: f64,
    input_psnr: Option<f64>,
    method: Method,
    engine: Engine,
}

pub fn reconstruct(cfg: &Config, input: &Path, checkpoint: &Path, max_iter: Option<usize>, truth: Option<&Path>) -> anyhow::Result<()> {
    let (model, _) = load_model(cfg, checkpoint)?;
    let y = read_tensor(input).with_context(|| format!("reading {}", input.display()))?;
    if y.shape() != model.map.operator().range() {
        bail!("measurement shape {} does not match the operator range {}", y.shape(), model.map.operator().range());
    }
    let truth = truth.map(read_tensor).transpose()?;
    let solver = match model.unroll {
        // Unrolled models run exactly K steps unless told otherwise.
        Some(k) => SolverConfig { engine: Engine::Picard, tol: f64::MIN_POSITIVE, max_iter: max_iter.unwrap_or(k), ..cfg.solver },
        None => SolverConfig { max_iter: max_iter.unwrap_or(cfg.solver.max_iter), ..cfg.solver },
    };
    let rec = deq_core::deq::reconstruct(&model.map, &y, &solver, model.init)?;
    let m = rec.metrics(truth.as_ref())?;
    let input_psnr = truth.as_ref().map(|t| quality(&rec.x0, t)).transpose()?.map(|q| q.psnr);
    std::fs::create_dir_all(&cfg.out)?;
    write_tensor(cfg.out.join("reconstruction.dqt"), &rec.image, DType::F64)?;
    rec.solve.save_residual_csv(cfg.out.join("residuals.csv"))?;
    let report = ReconstructReport {
        psnr: m.psnr,
        ssim: m.ssim,
        iterations: m.iterations,
        seconds: m.seconds,
        converged: m.converged,
        final_residual: m.final_residual,
        input_psnr,
        method: model.method,
        engine: solver.engine,
    };
    write_json(&cfg.out.join("metrics.json"), &report)?;
    if !m.converged && model.unroll.is_none() {
        warn!("no convergence within {} iterations; final residual {:.3e}", m.iterations, m.final_residual);
    }
    match (m.psnr, input_psnr) {
        (Some(p), Some(p0)) => info!("{} iterations, PSNR {p:.3} dB (input {p0:.3} dB)", m.iterations),
        _ => info!("{} iterations", m.iterations),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct CertifyReport {
    checkpoint: String,
    method: Method,
    step: f64,
    spectral: SpectralBounds,
    lipschitz: LipschitzEstimate,
    certificate: ContractionCertificate,
    empirical: Option<ContractionRate>,
    /// Measured rate within `gamma + 0.05`, when a `gamma` exists.
    empirical_within_bound: Option<bool>,
}

fn theorem_of(kind: MapKind) -> Theorem {
    match kind {
        MapKind::DeGrad => Theorem::Grad,
        MapKind::DeProx => Theorem::Prox,
        MapKind::DeAdmm => Theorem::Admm,
    }
}

pub fn certify(cfg: &Config, checkpoint: &Path, probes: usize) -> anyhow::Result<()> {
    let (model, meta) = load_model(cfg, checkpoint)?;
    let map = &model.map;
    let seed = sub_seed(cfg.seed, "certify");
    let spectral = spectral_bounds(map.operator(), 1e-8, 5000)?;
    let lipschitz = lipschitz_estimate(map.net(), map.image_shape(), probes, 20, seed)?;
    let certificate = certify_contraction(theorem_of(map.kind()), spectral.l, spectral.mu, lipschitz.epsilon, map.step());
    let empirical = match empirical_contraction(map, probes, 30, 3, sub_seed(seed, "probes")) {
        Ok(r) => Some(r),
        Err(e) => {
            warn!("contraction rate not measured: {e}");
            None
        }
    };
    let empirical_within_bound = match (&empirical, certificate.gamma) {
        (Some(r), Some(g)) => Some(r.max_ratio <= g + 0.05),
        _ => None,
    };
    match &certificate.reason {
        None => info!("certificate satisfied (gamma {:?})", certificate.gamma),
        Some(why) => info!("certificate not satisfied: {why}"),
    }
    if let Some(r) = &empirical {
        info!("measured contraction rate: max {:.4}, median {:.4}", r.max_ratio, r.median_ratio);
    }
    let report = CertifyReport {
        checkpoint: meta.checkpoint,
        method: model.method,
        step: map.step(),
        spectral,
        lipschitz,
        certificate,
        empirical,
        empirical_within_bound,
    };
    std::fs::create_dir_all(&cfg.out)?;
    write_json(&cfg.out.join("certificate.json"), &report)
}

/// Loads one sidecar per method, listing everything that is missing.
fn load_models(cfg: &Config, methods: &[Method], suffix: &str) -> anyhow::Result<(ModelSet, BTreeMap<String, String>)> {
    let dir = cfg.models_dir();
    let op = cfg.operator()?;
    let mut missing = Vec::new();
    let mut models = ModelSet::new();
    let mut hashes = BTreeMap::new();
    for &m in methods {
        let path = dir.join(format!("{m}{suffix}.json"));
        match Model::load(&path, op.clone()) {
            Ok((model, meta)) => {
                hashes.insert(meta.checkpoint, meta.checkpoint_sha256);
                models.insert(m, model);
            }
            Err(Error::MissingArtifact(p)) => missing.push(format!("{} (run `deq train --method {m}`)", p.display())),
            Err(e) => missing.push(format!("{}: {e}", path.display())),
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingPrerequisites(missing).into());
    }
    Ok((models, hashes))
}

pub fn bench(cfg: &Config, suite: Suite) -> anyhow::Result<()> {
    let spec = cfg.experiment(suite.name());
    spec.validate()?;
    let suffix = if suite == Suite::Init { "-start" } else { "" };
    let (models, hashes) = load_models(cfg, &spec.methods, suffix)?;
    let setup = cfg.setup()?;
    let exec = Exec::Parallel;
    let records = match suite {
        Suite::Iterations => deq_core::bench::run_iteration_sweep(&spec, &setup, &models, exec)?,
        Suite::Engines => deq_core::bench::run_engine_comparison(&spec, &setup, &models, exec)?,
        Suite::Noise => deq_core::bench::run_noise_sensitivity(&spec, &setup, &models, exec)?,
        Suite::Init => deq_core::bench::run_init_study(&spec, &setup, &models, cfg.net_spec(), &cfg.budget(), exec)?,
    };
    let dir = cfg.out.join("bench");
    std::fs::create_dir_all(&dir)?;
    let name = suite.name();
    let results = format!("{name}.csv");
    save_records(&records, dir.join(&results))?;
    let summary = summarize(&records);
    save_summary(&summary, dir.join(format!("{name}-summary.csv")))?;
    let mut manifest = Manifest::new(name, &spec, &results, records.len());
    manifest.checkpoints = hashes;
    manifest.seeds = BTreeMap::from([
        ("config".to_string(), cfg.seed),
        ("dataset".to_string(), cfg.data_seed()),
        ("training".to_string(), cfg.train.seed),
    ]);
    manifest.save(dir.join(format!("{name}-manifest.json")))?;
    for s in &summary {
        let setting = if s.setting.is_empty() { String::new() } else { format!(" {}", s.setting) };
        let sweep = s.sweep.map(|v| format!(" @ {v}")).unwrap_or_default();
        info!(
            "{}{setting}{sweep}: {:.3} dB, {:.1} iterations, {:.0}% converged",
            s.method,
            s.mean_psnr,
            s.mean_iterations,
            100.0 * s.converged_fraction
        );
    }
    info!("wrote {} records to {}", records.len(), dir.join(&results).display());
    Ok(())
}
