use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use deq_core::bench::Model;
use deq_core::dataset::{generate_phantoms, DatasetSpec};
use deq_core::deq::{InitPolicy, IterationMap, MapKind};
use deq_core::io::{write_tensor, DType};
use deq_core::linops::make_blur;
use deq_core::noise::{add_noise, NoiseSpec};
use deq_core::regnet::{NetSpec, RegNet};
use deq_core::Shape;
use tempfile::TempDir;

const CONFIG: &str = r#"{
  "seed": 3,
  "problem": {"preset": "deblur-hi"},
  "dataset": {"size": 16, "train": 8, "val": 2, "test": 3},
  "pretrain": {"epochs": 3},
  "train": {"epochs": 2},
  "grid": {"eta": [0.5, 1.0, 1.5], "alpha": [0.5, 1.0], "sigma": [0.05, 0.02, 0.01]},
  "bench": {"methods": ["de-prox", "pnp-prox"], "iterations": [1, 3, 5]}
}
"#;

fn deq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deq"))
        .current_dir(dir)
        .env("DEQ_LOG", "info")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(&o));
    o
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("cfg.json");
    std::fs::write(&p, text).unwrap();
    p
}

/// A directory with pretrained denoisers and trained de-prox, pnp-prox
/// and du-prox models, built once.
fn trained() -> &'static Path {
    static DIR: OnceLock<TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        write_config(dir.path(), CONFIG);
        ok(deq(dir.path(), &["--config", "cfg.json", "pretrain"]));
        for m in ["de-prox", "pnp-prox"] {
            ok(deq(dir.path(), &["--config", "cfg.json", "train", "--method", m]));
        }
        ok(deq(dir.path(), &["--config", "cfg.json", "train", "--method", "du-prox", "--K", "3"]));
        dir
    })
    .path()
}

fn csv_rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn unknown_suite_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let o = deq(dir.path(), &["bench", "--suite", "everything"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    assert_eq!(deq(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_rejected_with_its_line() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path(), "{\n  \"seed\": 1,\n  \"epochz\": 3\n}\n");
    let o = deq(dir.path(), &["--config", "cfg.json", "pretrain"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("epochz") && err.contains("line 3"), "{err}");
}

#[test]
fn nested_unknown_key_is_rejected() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path(), r#"{"train": {"lr": 0.1, "momentum": 0.9}}"#);
    let o = deq(dir.path(), &["--config", "cfg.json", "pretrain"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn invalid_values_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path(), r#"{"problem": {"preset": "deblur-hi", "sigma": -1.0}}"#);
    assert_eq!(deq(dir.path(), &["--config", "cfg.json", "pretrain"]).status.code(), Some(2));
    let o = deq(dir.path(), &["train", "--method", "de-sharpen"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_file_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    assert_eq!(deq(dir.path(), &["--config", "nope.json", "pretrain"]).status.code(), Some(2));
}

#[test]
fn pretrain_writes_one_checkpoint_per_level_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path(), CONFIG);
    for out in ["a", "b"] {
        ok(deq(dir.path(), &["--config", "cfg.json", "--out", out, "pretrain", "--epochs", "1"]));
    }
    let list = |d: &str| {
        let mut v: Vec<String> = std::fs::read_dir(dir.path().join(d).join("pretrain"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        v.sort();
        v
    };
    let files = list("a");
    assert_eq!(files.iter().filter(|f| f.ends_with(".dqw")).count(), 3);
    assert!(files.contains(&"manifest.json".to_string()));
    let manifest = std::fs::read_to_string(dir.path().join("a/pretrain/manifest.json")).unwrap();
    for f in files.iter().filter(|f| f.ends_with(".dqw")) {
        assert!(manifest.contains(f.as_str()));
        let a = std::fs::read(dir.path().join("a/pretrain").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b/pretrain").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    assert_eq!(files, list("b"));
}

#[test]
fn pretrain_with_zero_epochs_writes_initial_nets() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path(), CONFIG);
    ok(deq(dir.path(), &["--config", "cfg.json", "pretrain", "--epochs", "0"]));
    assert_eq!(std::fs::read_dir(dir.path().join("out/pretrain")).unwrap().count(), 4);
}

#[test]
fn train_without_pretraining_lists_the_missing_artifacts() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path(), CONFIG);
    let o = deq(dir.path(), &["--config", "cfg.json", "train", "--method", "de-prox"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("manifest.json"), "{}", stderr(&o));
}

#[test]
fn random_init_trains_without_pretraining() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path(), CONFIG);
    ok(deq(dir.path(), &["--config", "cfg.json", "train", "--method", "de-grad", "--init", "random", "--epochs", "1"]));
    assert!(dir.path().join("out/models/de-grad.json").exists());
    assert_eq!(csv_rows(&dir.path().join("out/models/de-grad-train-log.csv")), 1);
}

#[test]
fn training_log_has_one_row_per_epoch() {
    let d = trained();
    assert_eq!(csv_rows(&d.join("out/models/de-prox-train-log.csv")), 2);
    assert_eq!(csv_rows(&d.join("out/models/du-prox-train-log.csv")), 2);
    let header = std::fs::read_to_string(d.join("out/models/de-prox-train-log.csv")).unwrap();
    assert!(header.starts_with(
        "epoch,train_loss,val_psnr,mean_forward_iters,mean_backward_iters,epsilon_estimate,wall_seconds"
    ));
    assert_eq!(csv_rows(&d.join("out/models/de-prox-grid.csv")), 9);
    let meta = std::fs::read_to_string(d.join("out/models/du-prox.json")).unwrap();
    assert!(meta.contains("\"unroll\": 3"), "{meta}");
}

#[test]
fn admm_on_a_nullspace_operator_logs_the_failed_certificate() {
    let dir = TempDir::new().unwrap();
    write_config(
        dir.path(),
        r#"{
  "problem": {"preset": "mri8x"},
  "dataset": {"size": 16, "train": 4, "val": 2, "test": 1},
  "pretrain": {"epochs": 1, "sigma_levels": [0.05]},
  "train": {"epochs": 1},
  "grid": {"eta": [1.0], "alpha": [1.0], "sigma": [0.05]}
}"#,
    );
    ok(deq(dir.path(), &["--config", "cfg.json", "pretrain"]));
    let o = ok(deq(dir.path(), &["--config", "cfg.json", "train", "--method", "de-admm"]));
    let err = stderr(&o);
    assert!(err.contains("unsatisfiable") && err.contains("λ_min = 0"), "{err}");
    assert!(dir.path().join("out/models/de-admm.json").exists());
}

/// Writes a noisy blurred phantom and its ground truth for the config's
/// 16x16 deblurring problem.
fn measurement(dir: &Path) -> (PathBuf, PathBuf) {
    let shape = Shape::new(1, 16, 16);
    let op = make_blur(9, 5.0, shape).unwrap();
    let x = generate_phantoms(&DatasetSpec::phantoms(1, 16, 99)).unwrap().remove(0);
    let y = add_noise(&op.forward(&x).unwrap(), NoiseSpec::new(0.01, 5).unwrap());
    let (yp, xp) = (dir.join("y.dqt"), dir.join("x.dqt"));
    write_tensor(&yp, &y, DType::F64).unwrap();
    write_tensor(&xp, &x, DType::F64).unwrap();
    (yp, xp)
}

fn metrics(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn reconstruct_improves_on_the_input_and_is_repeatable() {
    let d = trained();
    let work = TempDir::new().unwrap();
    let (y, x) = measurement(work.path());
    let (y, x) = (y.to_str().unwrap(), x.to_str().unwrap());
    let ckpt = d.join("out/models/de-prox.json");
    let ckpt = ckpt.to_str().unwrap();
    let cfg = d.join("cfg.json");
    let cfg = cfg.to_str().unwrap();
    let mut outs = Vec::new();
    for out in ["r1", "r2"] {
        let out = work.path().join(out);
        ok(deq(d, &["--config", cfg, "--out", out.to_str().unwrap(), "reconstruct", "--input", y, "--checkpoint", ckpt, "--truth", x]));
        outs.push(out);
    }
    let m = metrics(&outs[0].join("metrics.json"));
    for key in ["psnr", "ssim", "iterations", "seconds", "converged"] {
        assert!(m.get(key).is_some(), "{key} missing from {m}");
    }
    assert!(m["psnr"].as_f64().unwrap() > m["input_psnr"].as_f64().unwrap(), "{m}");
    let a = std::fs::read(outs[0].join("reconstruction.dqt")).unwrap();
    let b = std::fs::read(outs[1].join("reconstruction.dqt")).unwrap();
    assert_eq!(a, b);
    let m2 = metrics(&outs[1].join("metrics.json"));
    assert_eq!(m["psnr"], m2["psnr"]);
    assert_eq!(m["iterations"], m2["iterations"]);
    let residuals = std::fs::read_to_string(outs[0].join("residuals.csv")).unwrap();
    assert!(residuals.starts_with("iteration,residual,cumulative_seconds"));
    assert_eq!(residuals.lines().count() - 1, m["iterations"].as_u64().unwrap() as usize);
}

#[test]
fn reconstruct_with_one_iteration_returns_the_first_step() {
    let d = trained();
    let work = TempDir::new().unwrap();
    let (y, _) = measurement(work.path());
    let ckpt = d.join("out/models/de-prox.dqw");
    let out = work.path().join("one");
    ok(deq(
        d,
        &[
            "--config",
            "cfg.json",
            "--out",
            out.to_str().unwrap(),
            "reconstruct",
            "--input",
            y.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--max-iter",
            "1",
        ],
    ));
    let m = metrics(&out.join("metrics.json"));
    assert_eq!(m["iterations"].as_u64(), Some(1));
    assert!(m["psnr"].is_null());
}

#[test]
fn reconstruct_rejects_a_mismatched_measurement() {
    let d = trained();
    let work = TempDir::new().unwrap();
    let y = work.path().join("bad.dqt");
    write_tensor(&y, &deq_core::Tensor::zeros(Shape::new(1, 8, 8)), DType::F64).unwrap();
    let ckpt = d.join("out/models/de-prox.json");
    let o = deq(d, &["--config", "cfg.json", "--out", work.path().to_str().unwrap(), "reconstruct", "--input", y.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("does not match"), "{}", stderr(&o));
}

#[test]
fn certify_zero_regularizer_gives_the_closed_form_rate() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path(), r#"{"problem": {"preset": "deblur-hi"}, "dataset": {"size": 16}}"#);
    let shape = Shape::new(1, 16, 16);
    let op = make_blur(9, 5.0, shape).unwrap();
    // Zero weights with the identity skip: R = I, so eps = 0.
    let net = RegNet::zeros(NetSpec { channels: 1, hidden: 2, depth: 2, kernel: 3, residual: true, spectral_size: 16 }).unwrap();
    let eta = 0.3;
    let map = IterationMap::new(MapKind::DeGrad, op, net, eta).unwrap();
    let model = Model::new(deq_core::bench::Method::DeGrad, map, 1, InitPolicy::Zeros, 0.01).unwrap();
    model.save(dir.path().join("m"), "zero").unwrap();
    ok(deq(dir.path(), &["--config", "cfg.json", "--out", "c", "certify", "--checkpoint", "m/zero.json"]));
    let c = metrics(&dir.path().join("c/certificate.json"));
    let cert = &c["certificate"];
    assert_eq!(cert["satisfied"], true, "{c}");
    let mu = c["spectral"]["mu"].as_f64().unwrap();
    let gamma = cert["gamma"].as_f64().unwrap();
    assert!((gamma - (1.0 - eta * (1.0 + mu))).abs() < 1e-9, "{gamma} vs mu {mu}");
    assert_eq!(c["lipschitz"]["epsilon"].as_f64(), Some(0.0));
    assert_eq!(c["empirical"]["probes"].as_u64(), Some(10));
    assert_eq!(c["empirical_within_bound"], true);
}

#[test]
fn certify_prox_on_undersampled_mri_is_unsatisfiable() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path(), r#"{"problem": {"preset": "mri4x"}, "dataset": {"size": 16}}"#);
    let cfg_op = deq_core::bench::Problem::Mri4x
        .operator_spec(16, deq_core::rng::sub_seed(0, "dataset"))
        .build()
        .unwrap();
    let net = RegNet::zeros(NetSpec { channels: 2, hidden: 2, depth: 2, kernel: 3, residual: true, spectral_size: 16 }).unwrap();
    let map = IterationMap::new(MapKind::DeProx, cfg_op, net, 1.0).unwrap();
    let model = Model::new(deq_core::bench::Method::DeProx, map, 1, InitPolicy::Adjoint, 0.01).unwrap();
    model.save(dir.path(), "mri").unwrap();
    ok(deq(dir.path(), &["--config", "cfg.json", "--out", "c", "certify", "--checkpoint", "mri.json"]));
    let c = metrics(&dir.path().join("c/certificate.json"));
    assert_eq!(c["certificate"]["satisfied"], false);
    assert_eq!(c["certificate"]["reason"], "λ_min = 0");
}

#[test]
fn bench_lists_every_missing_checkpoint() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path(), r#"{"bench": {"methods": ["de-prox", "du-prox", "pnp-prox"]}}"#);
    let o = deq(dir.path(), &["--config", "cfg.json", "bench", "--suite", "noise"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    for m in ["de-prox.json", "du-prox.json", "pnp-prox.json"] {
        assert!(err.contains(m), "{m} not listed: {err}");
    }
}

#[test]
fn bench_iterations_has_one_row_per_image_method_and_budget() {
    let d = trained();
    let work = TempDir::new().unwrap();
    write_config(work.path(), CONFIG);
    copy_dir(&d.join("out/models"), &work.path().join("out/models"));
    ok(deq(work.path(), &["--config", "cfg.json", "bench", "--suite", "iterations"]));
    let out = work.path().join("out/bench");
    assert_eq!(csv_rows(&out.join("iterations.csv")), 3 * 2 * 3);
    assert_eq!(csv_rows(&out.join("iterations-summary.csv")), 2 * 3);
    let manifest = metrics(&out.join("iterations-manifest.json"));
    assert_eq!(manifest["records"].as_u64(), Some(18));
    assert_eq!(manifest["spec_hash"].as_str().map(str::len), Some(64));
    assert!(manifest["checkpoints"].get("de-prox.dqw").is_some(), "{manifest}");
    assert!(manifest["seeds"].get("dataset").is_some());
    assert!(manifest["version"].is_string());
}

#[test]
fn bench_engines_compares_three_engines() {
    let d = trained();
    let work = TempDir::new().unwrap();
    write_config(
        work.path(),
        &CONFIG.replace(r#""methods": ["de-prox", "pnp-prox"]"#, r#""methods": ["de-prox"]"#),
    );
    let models = d.join("out/models");
    let out = work.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    copy_dir(&models, &out.join("models"));
    ok(deq(work.path(), &["--config", "cfg.json", "bench", "--suite", "engines"]));
    let csv = std::fs::read_to_string(out.join("bench/engines.csv")).unwrap();
    assert_eq!(csv.lines().count() - 1, 3 * 3);
    for e in ["picard", "anderson", "broyden"] {
        assert_eq!(csv.lines().filter(|l| l.contains(&format!(",{e},"))).count(), 3, "{e}");
    }
}

#[test]
fn bench_engines_rejects_unrolled_models() {
    let d = trained();
    let work = TempDir::new().unwrap();
    write_config(work.path(), &CONFIG.replace(r#""methods": ["de-prox", "pnp-prox"]"#, r#""methods": ["du-prox"]"#));
    copy_dir(&d.join("out/models"), &work.path().join("out/models"));
    let o = deq(work.path(), &["--config", "cfg.json", "bench", "--suite", "engines"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn bench_noise_covers_the_default_sweep() {
    let d = trained();
    let work = TempDir::new().unwrap();
    write_config(work.path(), CONFIG);
    copy_dir(&d.join("out/models"), &work.path().join("out/models"));
    ok(deq(work.path(), &["--config", "cfg.json", "bench", "--suite", "noise"]));
    assert_eq!(csv_rows(&work.path().join("out/bench/noise.csv")), 4 * 2 * 3);
}

#[test]
fn log_level_comes_from_the_environment() {
    let dir = TempDir::new().unwrap();
    write_config(dir.path(), CONFIG);
    let o = Command::new(env!("CARGO_BIN_EXE_deq"))
        .current_dir(dir.path())
        .env("DEQ_LOG", "error")
        .args(["--config", "cfg.json", "pretrain", "--epochs", "0"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(!stderr(&o).contains("INFO"), "{}", stderr(&o));
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        std::fs::copy(e.path(), to.join(e.file_name())).unwrap();
    }
}
