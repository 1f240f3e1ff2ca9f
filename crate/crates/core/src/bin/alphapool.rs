use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use alphapool::config::{DatasetKind, TrainConfig};
use alphapool::data::Split;
use alphapool::experiment::{
    cmd_alpha_sweep, cmd_eval, cmd_gradcheck, cmd_train, resolve_data_dir, EvalRequest, DATA_DIR_ENV,
};

#[derive(Parser)]
#[command(name = "alphapool", version, about = "Train and inspect CNNs with alpha-integration pooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a SimpleCNN and write metrics, alpha trace and checkpoint.
    Train {
        /// key = value config file; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// max, avg, lp or alphaI
        #[arg(long)]
        pool: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Extra config overrides, e.g. `--set batch_size=64`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Accuracy of a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// mnist or cifar10; defaults to the dataset the checkpoint was trained on.
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Alpha-integration of fixed values over a uniform alpha grid, as CSV.
    AlphaSweep {
        #[arg(long, value_delimiter = ',', default_value = "1,2")]
        values: Vec<f64>,
        #[arg(long, default_value_t = -10.0, allow_negative_numbers = true)]
        from: f64,
        #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
        to: f64,
        #[arg(long, default_value_t = 201)]
        steps: usize,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every layer's backward pass.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Scale every backward pass by this factor (should make checks fail).
        #[arg(long)]
        mutate: Option<f64>,
    },
}

fn run(cli: Cli) -> Result<bool> {
    let env_dir = std::env::var(DATA_DIR_ENV).ok();
    match cli.command {
        Command::Train {
            config,
            pool,
            seed,
            epochs,
            data_dir,
            out,
            overrides,
        } => {
            let mut cfg = match &config {
                Some(path) => TrainConfig::load(path)?,
                None => TrainConfig::default(),
            };
            for item in &overrides {
                let (k, v) = item
                    .split_once('=')
                    .with_context(|| format!("override `{item}` must be KEY=VALUE"))?;
                cfg.set(k.trim(), v.trim())?;
            }
            if let Some(pool) = pool {
                cfg.set("pool", &pool)?;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(epochs) = epochs {
                cfg.epochs = epochs;
            }
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            cfg.data_dir = resolve_data_dir(data_dir.as_deref(), env_dir.as_deref(), &cfg.data_dir);
            cfg.validate()?;
            let outcome = cmd_train(&cfg)?;
            let last = outcome.last();
            println!(
                "final epoch {} test_acc {} train_loss {} -> {}",
                last.epoch,
                last.test_acc,
                last.train_loss,
                outcome.out_dir.display()
            );
            Ok(true)
        }
        Command::Eval {
            checkpoint,
            data_dir,
            split,
            dataset,
        } => {
            let split: Split = split.parse()?;
            let dataset = dataset.map(|d| d.parse::<DatasetKind>()).transpose()?;
            let Some(data_dir) = data_dir.or_else(|| env_dir.filter(|s| !s.is_empty()).map(PathBuf::from)) else {
                bail!("--data-dir is required (or set {DATA_DIR_ENV})");
            };
            let result = cmd_eval(&EvalRequest {
                checkpoint: &checkpoint,
                data_dir: &data_dir,
                split,
                dataset,
            })?;
            println!(
                "accuracy {} ({}/{}) loss {}",
                result.accuracy(),
                result.correct,
                result.total,
                result.mean_loss
            );
            Ok(true)
        }
        Command::AlphaSweep {
            values,
            from,
            to,
            steps,
            out,
        } => {
            let rows = cmd_alpha_sweep(&values, from, to, steps, out.as_deref())?;
            if out.is_none() {
                println!("alpha,value");
                for (a, v) in rows {
                    println!("{a},{v}");
                }
            }
            Ok(true)
        }
        Command::Gradcheck { seed, mutate } => {
            let (reports, ok) = cmd_gradcheck(seed, mutate)?;
            for r in &reports {
                println!("{r}");
            }
            let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
            if ok {
                println!("gradcheck: all {} checks passed", reports.len());
            } else {
                println!("gradcheck: {} failed: {}", failed.len(), failed.join(", "));
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
