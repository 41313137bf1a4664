use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use resnet_core::arch::{count_params, parse_arch, shape_audit, ShortcutOption};
use resnet_core::harness::checkpoint::{load_checkpoint, save_checkpoint};
use resnet_core::harness::config::{DataSource, TrainConfig};
use resnet_core::harness::degradation::{run_degradation, DegradationConfig};
use resnet_core::harness::evaluate::evaluate;
use resnet_core::harness::gradcheck::{run_suite, TOLERANCE};
use resnet_core::harness::respstd::layer_response_std;
use resnet_core::harness::train::Trainer;
use resnet_core::nn::Mode;
use resnet_core::error::io_at;
use resnet_core::{Error, Result, Tensor};

#[derive(Parser)]
#[command(name = "resnet", version, about = "Train, evaluate and audit residual networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config, writing log.csv and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Read CIFAR-10 binaries from here instead of the configured source.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Test error of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
    /// Per-layer output shapes, parameters and multiply-adds.
    Audit {
        /// e.g. resnet-imagenet-50, plain-imagenet-34, resnet-cifar-110
        #[arg(long)]
        arch: String,
        #[arg(long, default_value = "A")]
        option: ShortcutOption,
        #[arg(long, default_value = "audit.csv")]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of every layer and block type.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
    /// Standard deviation of every 3x3 layer's response.
    Respstd {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Leading test images to measure on.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, value_enum, default_value_t = StatsMode::Infer)]
        mode: StatsMode,
        #[arg(long, default_value = "respstd.csv")]
        out: PathBuf,
    },
    /// Plain versus residual nets across depths and seeds.
    Degradation {
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value = "degradation")]
        out: PathBuf,
        /// Override the preset's seeds, e.g. --seeds 0,1,2
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StatsMode {
    Infer,
    BatchStats,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Full,
}

fn with_data_dir(cfg: &mut TrainConfig, dir: Option<PathBuf>) {
    if let Some(dir) = dir {
        let train_subset = match &cfg.data {
            DataSource::Cifar { train_subset, .. } => *train_subset,
            _ => None,
        };
        cfg.data = DataSource::Cifar { dir, train_subset };
    }
}

fn emit(v: serde_json::Value) {
    println!("{v}");
}

fn train(config: &Path, data_dir: Option<PathBuf>, out: &Path, resume: Option<PathBuf>) -> Result<()> {
    let mut trainer = match resume {
        Some(p) => Trainer::resume(&load_checkpoint(&p, None)?)?,
        None => {
            let mut cfg = TrainConfig::from_json(&std::fs::read_to_string(config).map_err(io_at(config))?)?;
            with_data_dir(&mut cfg, data_dir.clone());
            Trainer::new(cfg)?
        }
    };
    with_data_dir(&mut trainer.cfg, data_dir);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.json"), trainer.cfg.to_json()?)?;
    let (train, test) = trainer.cfg.data.load(trainer.cfg.seed, trainer.cfg.mean_mode)?;
    let ckpt_every = trainer.cfg.checkpoint_every;
    let mut logged = trainer.log.rows.len();
    let mut hook = |t: &Trainer| -> Result<()> {
        if t.log.rows.len() > logged {
            logged = t.log.rows.len();
            std::fs::write(out.join("log.csv"), t.log.to_csv())?;
            if let Some(r) = t.log.last() {
                eprintln!("{}", serde_json::to_string(r)?);
            }
        }
        if ckpt_every.is_some_and(|k| t.iter.is_multiple_of(k)) {
            save_checkpoint(&out.join(format!("iter-{}.ckpt", t.iter)), &t.checkpoint()?)?;
        }
        Ok(())
    };
    let total = trainer.cfg.total_iters;
    if let Err(e) = trainer.run_until(&train, Some(&test), total, &mut hook) {
        if matches!(e, Error::NonFinite(_)) {
            // Parameters are still finite when the loss is the first casualty.
            let _ = save_checkpoint(&out.join("abort.ckpt"), &trainer.checkpoint()?);
        }
        return Err(e);
    }
    std::fs::write(out.join("log.csv"), trainer.log.to_csv())?;
    save_checkpoint(&out.join("final.ckpt"), &trainer.checkpoint()?)?;
    let last = trainer.log.last().copied();
    emit(json!({"iter": trainer.iter, "final": last, "out": out}));
    Ok(())
}

fn load_for_checkpoint(path: &Path, data_dir: Option<PathBuf>) -> Result<(Trainer, resnet_core::data::Dataset, resnet_core::data::Dataset)> {
    let mut t = Trainer::resume(&load_checkpoint(path, None)?)?;
    with_data_dir(&mut t.cfg, data_dir);
    let (train, test) = t.cfg.data.load(t.cfg.seed, t.cfg.mean_mode)?;
    Ok((t, train, test))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            data_dir,
            out,
            resume,
        } => train(&config, data_dir, &out, resume),
        Command::Eval { checkpoint, data_dir } => {
            let (mut t, _, test) = load_for_checkpoint(&checkpoint, data_dir)?;
            let err = evaluate(&mut t.net, &test, 250)?;
            emit(json!({"iter": t.iter, "arch": t.cfg.arch.label(), "test_error": err, "test_images": test.len()}));
            Ok(())
        }
        Command::Audit { arch, option, out } => {
            let spec = parse_arch(&arch, option)?;
            let [c, h, w] = spec.input;
            let audit = shape_audit(&spec, [1, c, h, w])?;
            std::fs::write(&out, audit.to_csv())?;
            emit(json!({
                "arch": arch,
                "params": count_params(&spec),
                "madds": audit.total_madds,
                "weighted_layers": spec.weighted_layers(),
                "fingerprint": format!("{:016x}", spec.fingerprint()),
                "out": out,
            }));
            Ok(())
        }
        Command::Gradcheck { eps } => {
            let cases = run_suite(eps)?;
            let mut worst: f64 = 0.0;
            for c in &cases {
                worst = worst.max(c.report.max_rel_err);
                emit(json!({"case": c.name, "max_rel_err": c.report.max_rel_err, "checked": c.report.checked, "pass": c.passed()}));
            }
            if cases.iter().all(|c| c.passed()) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("gradient check failed: worst relative error {worst:e} > {TOLERANCE:e}")))
            }
        }
        Command::Respstd {
            checkpoint,
            data_dir,
            samples,
            mode,
            out,
        } => {
            let (mut t, _, test) = load_for_checkpoint(&checkpoint, data_dir)?;
            let n = samples.min(test.len());
            let per = test.images.numel() / test.len();
            let [c, h, w] = test.image_shape();
            let x = Tensor::new(&[n, c, h, w], test.images.data()[..n * per].to_vec())?;
            let mode = match mode {
                StatsMode::Infer => Mode::Infer,
                StatsMode::BatchStats => Mode::BatchStats,
            };
            let stats = layer_response_std(&mut t.net, &x, mode, 250)?;
            std::fs::write(&out, stats.to_csv())?;
            emit(json!({"arch": t.cfg.arch.label(), "layers": stats.layer_order.len(), "median": stats.median(), "out": out}));
            Ok(())
        }
        Command::Degradation {
            preset,
            data_dir,
            out,
            seeds,
        } => {
            let mut cfg = match preset {
                Preset::Desk => DegradationConfig::desk(data_dir),
                Preset::Full => DegradationConfig::full(
                    data_dir.ok_or_else(|| Error::InvalidArgument("the full preset needs --data-dir".into()))?,
                ),
            };
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("preset.json"), serde_json::to_string_pretty(&cfg)?)?;
            let report = run_degradation(&cfg, Some(&out), &mut |c| {
                eprintln!(
                    "{}",
                    json!({"net": c.label(), "seed": c.seed, "final_train_error": c.final_train_error,
                           "test_error": c.test_error, "response_median": c.response_median})
                );
            })?;
            for s in report.summary() {
                emit(json!({
                    "net": format!("{}-{}", if s.residual { "resnet" } else { "plain" }, s.depth),
                    "params": s.params,
                    "runs": s.runs,
                    "mean_train_error": s.mean_train_error,
                    "mean_test_error": s.mean_test_error,
                    "mean_response_median": s.mean_response_median,
                }));
            }
            emit(json!({"plain_degrades": report.plain_degrades(), "residual_keeps_up": report.residual_keeps_up(0.005)}));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", json!({"error": "usage", "message": e.to_string().trim()}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
