//! `deq`: pretrain denoisers, train equilibrium and unrolled models,
//! reconstruct, certify contraction and run the benchmark suites.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use deq_core::bench::Method;

use config::Config;

#[derive(Parser, Debug)]
#[command(name = "deq", version, about = "Deep equilibrium reconstruction for linear inverse problems")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; all logical cores by default.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain one denoiser per noise level.
    Pretrain {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Tune on the pretrained denoisers, then train end to end.
    Train {
        #[arg(long, value_parser = parse_method)]
        method: Method,
        #[arg(long, value_enum, default_value_t = Init::Pretrained)]
        init: Init,
        /// Unrolled depth for DU methods.
        #[arg(long = "K")]
        k: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Reconstruct an image from a measurement tensor.
    Reconstruct {
        /// Measurement tensor (DQT1).
        #[arg(long)]
        input: PathBuf,
        /// Model sidecar JSON written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        max_iter: Option<usize>,
        /// Ground-truth tensor for PSNR/SSIM.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Contraction certificate for a trained model.
    Certify {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Random probes for the measured contraction rate.
        #[arg(long, default_value_t = 10)]
        probes: usize,
    },
    /// Run a benchmark suite over trained models.
    Bench {
        #[arg(long, value_enum)]
        suite: Suite,
        /// Training epochs for the initialization study.
        #[arg(long)]
        epochs: Option<usize>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Pretrained,
    Random,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Iterations,
    Engines,
    Noise,
    Init,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Iterations => "iterations",
            Suite::Engines => "engines",
            Suite::Noise => "noise",
            Suite::Init => "init",
        }
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse::<Method>().map_err(|_| {
        let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        format!("unknown method {s:?}; expected one of {}", names.join(", "))
    })
}

/// A bad config or flag combination; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn init_logging() {
    let level = std::env::var("DEQ_LOG").unwrap_or_default();
    let filter = match level.to_ascii_lowercase().as_str() {
        "" | "info" => "info",
        "error" => "error",
        "debug" => "debug",
        other => {
            eprintln!("warning: DEQ_LOG={other:?} is not one of error, info, debug; using info");
            "info"
        }
    };
    env_logger::Builder::new().parse_filters(filter).format_timestamp_millis().init();
}

fn load_config(common: &Common) -> anyhow::Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path).map_err(|e| usage(format!("{e:#}")))?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(t) = common.threads {
        cfg.threads = Some(t);
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    cfg.derive_seeds();
    cfg.validate().map_err(|e| usage(format!("invalid config: {e:#}")))?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli.common)?;
    deq_core::exec::init_threads(cfg.threads);
    match cli.command {
        Command::Pretrain { epochs } => {
            if let Some(e) = epochs {
                cfg.pretrain.epochs = e;
            }
            commands::pretrain(&cfg)
        }
        Command::Train { method, init, k, epochs } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(k) = k {
                if k == 0 {
                    return Err(usage("--K must be >= 1"));
                }
                cfg.unroll = k;
            }
            commands::train(&cfg, method, init == Init::Random)
        }
        Command::Reconstruct { input, checkpoint, max_iter, truth } => {
            if max_iter == Some(0) {
                return Err(usage("--max-iter must be >= 1"));
            }
            commands::reconstruct(&cfg, &input, &checkpoint, max_iter, truth.as_deref())
        }
        Command::Certify { checkpoint, probes } => {
            if probes == 0 {
                return Err(usage("--probes must be >= 1"));
            }
            commands::certify(&cfg, &checkpoint, probes)
        }
        Command::Bench { suite, epochs } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            commands::bench(&cfg, suite)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage_error = e.chain().any(|c| {
                c.is::<UsageError>() || matches!(c.downcast_ref::<deq_core::Error>(), Some(deq_core::Error::Config(_)))
            });
            ExitCode::from(if usage_error { 2 } else { 1 })
        }
    }
}
