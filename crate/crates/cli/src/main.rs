//! `afrd` command line: generate the synthetic multi-lighting benchmark,
//! train and evaluate fusion models, and run the full ablation grid.
//!
//! Exit codes: 0 success, 1 runtime failure (I/O, training, scoring),
//! 2 invalid usage (bad flags, bad config values, out-of-range lighting).
//! Every command accepts `--config <file>` with flat `key = value`
//! settings; explicit flags override the file, and the effective
//! configuration is echoed next to the primary output. `AFRD_THREADS`
//! caps the worker count.

mod config;

use afrd_core::data::{self, SceneSpec};
use afrd_core::model::FusionMode;
use afrd_core::train::TrainConfig;
use afrd_core::{checkpoint, pipeline, score};
use clap::{Parser, Subcommand};
use config::FileConfig;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "afrd", version, about = "Multi-lighting anomaly detection via attention-fusion reverse distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-lighting dataset tree and print its hash.
    Generate {
        /// Output directory for the dataset tree.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Number of lightings per sample.
        #[arg(long)]
        lightings: Option<usize>,
        /// Square image side in pixels.
        #[arg(long)]
        size: Option<usize>,
        /// Number of normal training sets.
        #[arg(long)]
        train: Option<usize>,
        /// Number of normal test sets.
        #[arg(long = "test-normal")]
        test_normal: Option<usize>,
        /// Number of defective test sets.
        #[arg(long = "test-anomalous")]
        test_anomalous: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model on a dataset tree and write a checkpoint.
    Train {
        /// Dataset root (as written by `generate`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long = "out-ckpt")]
        out_ckpt: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Fusion variant: `attention`, `mean`, or `single:<j>`.
        #[arg(long)]
        fusion: Option<String>,
        /// Optional training-curve CSV (epoch, loss, attention entropy).
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Optional line-oriented training log.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score a test split with a trained checkpoint and write reports.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Per-sample score CSV output path.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Directory for per-sample anomaly maps (8-bit PGM + range sidecar).
        #[arg(long = "maps-dir")]
        maps_dir: Option<PathBuf>,
        /// Gaussian smoothing bandwidth in pixels (0 disables).
        #[arg(long)]
        sigma: Option<f64>,
        /// Optional ROC-point CSV output path.
        #[arg(long)]
        roc: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and evaluate every fusion variant with shared seeds.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Ablation table CSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds, e.g. `0,1,2`.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

/// Failures split by exit code: usage errors (2) versus runtime errors (1).
enum CliError {
    Usage(String),
    Runtime(String),
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        let mut msg = e.to_string();
        let mut src = e.source();
        while let Some(s) = src {
            msg.push_str(&format!(": {s}"));
            src = s.source();
        }
        CliError::Runtime(msg)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn load_config(path: &Option<PathBuf>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::empty()),
        Some(p) => FileConfig::load(p).map_err(usage),
    }
}

/// Flag value, else config-file value, else default.
fn setting<T: std::str::FromStr>(
    flag: Option<T>,
    cfg: &FileConfig,
    key: &str,
    default: T,
) -> Result<T, CliError> {
    match flag {
        Some(v) => Ok(v),
        None => Ok(cfg.get::<T>(key).map_err(usage)?.unwrap_or(default)),
    }
}

fn required_path(
    flag: Option<PathBuf>,
    cfg: &FileConfig,
    key: &str,
    flag_name: &str,
) -> Result<PathBuf, CliError> {
    flag.or_else(|| cfg.get_path(key))
        .ok_or_else(|| usage(format!("missing required `{flag_name}` (flag or config key `{key}`)")))
}

fn cmd_generate(
    out: Option<PathBuf>,
    seed: Option<u64>,
    lightings: Option<usize>,
    size: Option<usize>,
    train: Option<usize>,
    test_normal: Option<usize>,
    test_anomalous: Option<usize>,
    config: Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = load_config(&config)?;
    let out = required_path(out, &cfg, "generate.out", "--out")?;
    let seed = setting(seed, &cfg, "generate.seed", 0)?;
    let lightings = setting(lightings, &cfg, "generate.lightings", 6)?;
    let size = setting(size, &cfg, "generate.size", 64)?;
    let train = setting(train, &cfg, "generate.train", 150)?;
    let test_normal = setting(test_normal, &cfg, "generate.test-normal", 30)?;
    let test_anomalous = setting(test_anomalous, &cfg, "generate.test-anomalous", 30)?;

    let spec = SceneSpec::with_lightings(lightings, size, seed);
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let index = data::generate(&spec, train, test_normal, test_anomalous, &out)?;
    let hash = data::tree_hash(&out)?;
    config::echo(
        &out.join("run.config"),
        &[
            ("generate.out", out.display().to_string()),
            ("generate.seed", seed.to_string()),
            ("generate.lightings", lightings.to_string()),
            ("generate.size", size.to_string()),
            ("generate.train", train.to_string()),
            ("generate.test-normal", test_normal.to_string()),
            ("generate.test-anomalous", test_anomalous.to_string()),
        ],
    )
    .map_err(CliError::Runtime)?;
    println!("generated {} sample sets under {}", index.entries.len(), out.display());
    println!("tree hash: {hash}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: Option<PathBuf>,
    out_ckpt: Option<PathBuf>,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch: Option<usize>,
    seed: Option<u64>,
    fusion: Option<String>,
    curve: Option<PathBuf>,
    log: Option<PathBuf>,
    config: Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = load_config(&config)?;
    let data_dir = required_path(data, &cfg, "train.data", "--data")?;
    let out_ckpt = required_path(out_ckpt, &cfg, "train.out-ckpt", "--out-ckpt")?;
    let defaults = TrainConfig::default();
    let epochs = setting(epochs, &cfg, "train.epochs", defaults.epochs)?;
    let lr = setting(lr, &cfg, "train.lr", defaults.learning_rate)?;
    let batch = setting(batch, &cfg, "train.batch", defaults.batch_size)?;
    let seed = setting(seed, &cfg, "train.seed", defaults.seed)?;
    let fusion_str = setting(fusion, &cfg, "train.fusion", "attention".to_string())?;
    let fusion: FusionMode = fusion_str.parse().map_err(usage)?;

    let (train_sets, _) = data::load_dataset::<f32>(&data_dir)?;
    let first = train_sets
        .first()
        .ok_or_else(|| usage(format!("{}: empty training split", data_dir.display())))?;
    let n_lightings = first.images.len();
    let image_size = first.height;
    let sliced;
    let sets = match fusion {
        FusionMode::Single(j) => {
            if j >= n_lightings {
                return Err(usage(format!(
                    "single:{j} out of range: dataset has {n_lightings} lightings"
                )));
            }
            sliced = pipeline::select_lighting(&train_sets, j)?;
            &sliced[..]
        }
        _ => &train_sets[..],
    };

    let tc = TrainConfig {
        learning_rate: lr,
        batch_size: batch,
        epochs,
        seed,
        ..defaults
    };
    tc.validate()?;
    let (model, report) = pipeline::train_model(sets, n_lightings, image_size, fusion, &tc)?;
    checkpoint::save_checkpoint(&model, None, &out_ckpt)?;
    if let Some(p) = curve.or_else(|| cfg.get_path("train.curve")) {
        report.write_csv(&p)?;
    }
    if let Some(p) = log.or_else(|| cfg.get_path("train.log")) {
        report.write_log(&p)?;
    }
    config::echo(
        &out_ckpt.with_extension("config"),
        &[
            ("train.data", data_dir.display().to_string()),
            ("train.out-ckpt", out_ckpt.display().to_string()),
            ("train.epochs", epochs.to_string()),
            ("train.lr", lr.to_string()),
            ("train.batch", batch.to_string()),
            ("train.seed", seed.to_string()),
            ("train.fusion", fusion.to_string()),
        ],
    )
    .map_err(CliError::Runtime)?;
    let last = report.epoch_loss.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {fusion} for {epochs} epoch(s) in {:.1}s, final loss {last:.6}",
        report.wall_time_secs
    );
    println!("checkpoint: {}", out_ckpt.display());
    Ok(())
}

fn cmd_eval(
    data: Option<PathBuf>,
    ckpt: Option<PathBuf>,
    report: Option<PathBuf>,
    maps_dir: Option<PathBuf>,
    sigma: Option<f64>,
    roc: Option<PathBuf>,
    config: Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = load_config(&config)?;
    let data_dir = required_path(data, &cfg, "eval.data", "--data")?;
    let ckpt_path = required_path(ckpt, &cfg, "eval.ckpt", "--ckpt")?;
    let report_path = required_path(report, &cfg, "eval.report", "--report")?;
    let sigma = setting(sigma, &cfg, "eval.sigma", pipeline::DEFAULT_SIGMA)?;
    if sigma < 0.0 {
        return Err(usage("--sigma must be >= 0"));
    }
    let maps_dir = maps_dir.or_else(|| cfg.get_path("eval.maps-dir"));
    let roc = roc.or_else(|| cfg.get_path("eval.roc"));

    let (model, _) = checkpoint::load_checkpoint::<f32>(&ckpt_path)?;
    let (_, test_sets) = data::load_dataset::<f32>(&data_dir)?;
    let sliced;
    let sets = match model.config.fusion {
        FusionMode::Single(j) => {
            let n = test_sets.first().map_or(0, |s| s.images.len());
            if j >= n {
                return Err(usage(format!(
                    "checkpoint is single:{j} but dataset has {n} lightings"
                )));
            }
            sliced = pipeline::select_lighting(&test_sets, j)?;
            &sliced[..]
        }
        _ => &test_sets[..],
    };
    let (eval, results) = score::evaluate(&model, sets, sigma)?;
    eval.write_scores_csv(&report_path)?;
    if let Some(p) = &roc {
        eval.write_roc_csv(p)?;
    }
    if let Some(dir) = &maps_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        for r in &results {
            score::write_map_pgm(r, dir)?;
        }
    }
    config::echo(
        &report_path.with_extension("config"),
        &[
            ("eval.data", data_dir.display().to_string()),
            ("eval.ckpt", ckpt_path.display().to_string()),
            ("eval.report", report_path.display().to_string()),
            ("eval.sigma", sigma.to_string()),
        ],
    )
    .map_err(CliError::Runtime)?;
    println!("I-AUROC: {:.6}", eval.i_auroc);
    match eval.p_auroc {
        Some(p) => println!("P-AUROC: {p:.6}"),
        None => println!("P-AUROC: n/a (no masks in test split)"),
    }
    println!("report: {}", report_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    seeds: Option<String>,
    epochs: Option<usize>,
    lr: Option<f64>,
    batch: Option<usize>,
    sigma: Option<f64>,
    config: Option<PathBuf>,
) -> Result<(), CliError> {
    let cfg = load_config(&config)?;
    let data_dir = required_path(data, &cfg, "ablate.data", "--data")?;
    let out = required_path(out, &cfg, "ablate.out", "--out")?;
    let seeds_str = setting(seeds, &cfg, "ablate.seeds", "0".to_string())?;
    let seeds: Vec<u64> = seeds_str
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|_| usage(format!("bad seed `{s}`"))))
        .collect::<Result<_, _>>()?;
    if seeds.is_empty() {
        return Err(usage("--seeds must list at least one seed"));
    }
    let defaults = TrainConfig::default();
    let base = TrainConfig {
        epochs: setting(epochs, &cfg, "ablate.epochs", defaults.epochs)?,
        learning_rate: setting(lr, &cfg, "ablate.lr", defaults.learning_rate)?,
        batch_size: setting(batch, &cfg, "ablate.batch", defaults.batch_size)?,
        ..defaults
    };
    base.validate()?;
    let sigma = setting(sigma, &cfg, "ablate.sigma", pipeline::DEFAULT_SIGMA)?;

    let rows = pipeline::run_ablation::<f32>(&data_dir, &base, &seeds, sigma)?;
    pipeline::write_ablation_csv(&rows, &out)?;
    config::echo(
        &out.with_extension("config"),
        &[
            ("ablate.data", data_dir.display().to_string()),
            ("ablate.out", out.display().to_string()),
            ("ablate.seeds", seeds_str.clone()),
            ("ablate.epochs", base.epochs.to_string()),
            ("ablate.lr", base.learning_rate.to_string()),
            ("ablate.batch", base.batch_size.to_string()),
            ("ablate.sigma", sigma.to_string()),
        ],
    )
    .map_err(CliError::Runtime)?;
    for row in &rows {
        let p = row.p_auroc.map_or("n/a".to_string(), |p| format!("{p:.4}"));
        println!("{:<12} I-AUROC {:.4}  P-AUROC {p}", row.variant.to_string(), row.i_auroc);
    }
    println!("{}", pipeline::ablation_summary(&rows));
    Ok(())
}

fn main() -> ExitCode {
    if let Ok(v) = std::env::var("AFRD_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { out, seed, lightings, size, train, test_normal, test_anomalous, config } => {
            cmd_generate(out, seed, lightings, size, train, test_normal, test_anomalous, config)
        }
        Command::Train { data, out_ckpt, epochs, lr, batch, seed, fusion, curve, log, config } => {
            cmd_train(data, out_ckpt, epochs, lr, batch, seed, fusion, curve, log, config)
        }
        Command::Eval { data, ckpt, report, maps_dir, sigma, roc, config } => {
            cmd_eval(data, ckpt, report, maps_dir, sigma, roc, config)
        }
        Command::Ablate { data, out, seeds, epochs, lr, batch, sigma, config } => {
            cmd_ablate(data, out, seeds, epochs, lr, batch, sigma, config)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
    }
}
