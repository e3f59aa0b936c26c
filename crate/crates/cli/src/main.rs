use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gazeformer::config::config_keys;
use gazeformer::train::{ablation_cells, dataset_for, prepare_split, save_ablation, test_alpha};
use gazeformer::{
    evaluate, generate_dataset, load_checkpoint, profile_model, run_ablation, save_dataset, train_model, EgSpikeFormer,
    EnergyConstants, Error, TrainConfig,
};
use serde_json::json;

const OVERRIDE_HELP: &str = "Every configuration key can also be set on the command line as `--key value`; \
dotted keys reach nested tables and dashes may replace underscores (e.g. `--model.token-dim 16`, \
`--ablation.seeds [0,1]`).";

#[derive(Parser, Debug)]
#[command(name = "gazeformer", version, about = "Gaze-guided spiking transformer toolkit", after_help = OVERRIDE_HELP)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark and write it to a directory.
    GenData {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train a model; writes a checkpoint and an epoch-level metrics log.
    Train {
        /// Output directory (same as --output.dir).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Estimate inference energy of a checkpoint.
    Profile {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Also write the per-layer breakdown as CSV.
        #[arg(long, value_name = "PATH")]
        emit_csv: Option<PathBuf>,
    },
    /// Train the GM × ALH × timesteps grid over several seeds.
    Ablate {
        /// Output directory (same as --output.dir).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

/// Separates `--key value` configuration overrides from ordinary arguments.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let keys: HashSet<String> = config_keys().into_iter().collect();
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    if let Some(program) = it.next() {
        rest.push(program);
    }
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        let key = name.replace('-', "_");
        if !keys.contains(&key) {
            rest.push(arg);
            continue;
        }
        match inline.or_else(|| it.next()) {
            Some(value) => overrides.push((key, value)),
            None => {
                // let clap report the dangling flag
                rest.push(arg);
            }
        }
    }
    (rest, overrides)
}

fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<TrainConfig> {
    if let Some(p) = path {
        if !p.is_file() {
            return Err(Error::Config(format!("configuration file {} not found", p.display())).into());
        }
    }
    Ok(TrainConfig::load(path, overrides)?)
}

/// Adopts the architecture stored in a checkpoint.
fn match_model(cfg: &mut TrainConfig, model: &EgSpikeFormer) {
    cfg.model = model.config.clone();
    cfg.dataset.image_size = model.config.image_size;
}

fn emit(json: bool, value: serde_json::Value, text: String) {
    if json {
        println!("{}", serde_json::to_string_pretty(&value).expect("json output"));
    } else {
        print!("{text}");
    }
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::GenData { out } => {
            let data = generate_dataset(&cfg.dataset, cfg.seed)?;
            save_dataset(&out, &data, &cfg.dataset, cfg.seed)?;
            emit(
                cli.json,
                json!({"out": out, "seed": cfg.seed, "train": data.train.len(), "test": data.test.len()}),
                format!(
                    "wrote {} train and {} test samples (seed {}) to {}\n",
                    data.train.len(),
                    data.test.len(),
                    cfg.seed,
                    out.display()
                ),
            );
        }
        Command::Train { out } => {
            if let Some(dir) = out {
                cfg.output.dir = dir;
            }
            let data = dataset_for(&cfg)?;
            let outcome = train_model(&cfg, &data, Some(&cfg.output))?;
            let e = &outcome.evaluation;
            let checkpoint = cfg.output.checkpoint_path();
            let metrics = cfg.output.metrics_path();
            emit(
                cli.json,
                json!({"checkpoint": checkpoint, "metrics": metrics, "evaluation": e, "epochs": outcome.rows.len()}),
                format!(
                    "test accuracy {:.4}  auc {}  f1 {:.4}  ssim {:.4}\ncheckpoint {}\nmetrics {}\n",
                    e.accuracy,
                    e.auc.map_or_else(|| "n/a".into(), |a| format!("{a:.4}")),
                    e.f1,
                    e.ssim,
                    checkpoint.display(),
                    metrics.display()
                ),
            );
        }
        Command::Eval { checkpoint, split } => {
            let mut model =
                load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            match_model(&mut cfg, &model);
            let data = dataset_for(&cfg)?;
            let samples = match split {
                SplitArg::Train => &data.train,
                SplitArg::Test => &data.test,
            };
            let prepared = prepare_split(samples, &cfg, test_alpha(&cfg))?;
            let e = evaluate(&mut model, &prepared, cfg.timesteps, cfg.eval_batch_size)?;
            emit(
                cli.json,
                serde_json::to_value(&e)?,
                format!(
                    "samples {}\naccuracy {:.4}\nauc {}\nf1 {:.4}\nssim {:.4}\n",
                    e.samples,
                    e.accuracy,
                    e.auc.map_or_else(|| "n/a".into(), |a| format!("{a:.4}")),
                    e.f1,
                    e.ssim
                ),
            );
        }
        Command::Profile { checkpoint, emit_csv } => {
            let mut model =
                load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            match_model(&mut cfg, &model);
            let mut data = dataset_for(&cfg)?;
            data.test.truncate(cfg.calibration_samples.max(1));
            let prepared = prepare_split(&data.test, &cfg, test_alpha(&cfg))?;
            let all: Vec<usize> = (0..prepared.len()).collect();
            let report = profile_model(
                &mut model,
                &prepared.image_batch(&all),
                cfg.timesteps,
                EnergyConstants::default(),
            )?;
            if let Some(path) = emit_csv {
                let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                report.write_csv(file)?;
            }
            if cli.json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.to_table());
            }
        }
        Command::Ablate { out } => {
            if let Some(dir) = out {
                cfg.output.dir = dir;
            }
            let cells = ablation_cells(&cfg.ablation.timesteps);
            let seeds = cfg.ablation.seeds.clone();
            let report = run_ablation(&cfg, &cells, &seeds, |r| {
                log::info!(
                    "{} seed {}: accuracy {:.4} ssim {:.4}",
                    r.cell,
                    r.seed,
                    r.accuracy,
                    r.ssim
                );
            })?;
            save_ablation(&cfg.output.dir, &report)?;
            let mut text = format!(
                "{:<14} {:>6} {:>9} {:>9} {:>9}\n",
                "cell", "seed", "accuracy", "f1", "ssim"
            );
            for r in &report.runs {
                text.push_str(&format!(
                    "{:<14} {:>6} {:>9.4} {:>9.4} {:>9.4}\n",
                    r.cell, r.seed, r.accuracy, r.f1, r.ssim
                ));
            }
            text.push('\n');
            text.push_str(&report.to_table());
            emit(cli.json, serde_json::to_value(&report)?, text);
        }
    }
    Ok(())
}

/// Keeps freed memory in the process; the training loop allocates and drops
/// many large buffers per step.
fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tunables and is called before
    // any other thread exists.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_TOP_PAD, 256 << 20);
    }
}

fn main() -> ExitCode {
    tune_allocator();
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let config_error = err
                .chain()
                .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config(_))));
            ExitCode::from(if config_error { 2 } else { 1 })
        }
    }
}
