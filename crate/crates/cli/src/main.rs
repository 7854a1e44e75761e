use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use jetbench::encoder::Checkpoint;
use jetbench::evalmetrics::render_tables;
use jetbench::jetdata::toy::ToySpec;
use jetbench::runner::{self, Dataset, RunConfig, RunOutcome};
use jetbench::sampler::Split;

/// Log verbosity, in `env_logger` filter syntax.
const LOG_ENV: &str = "JETBENCH_LOG";

#[derive(Parser)]
#[command(name = "jetbench", version, about = "Jet representation-learning benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder with a self-supervised or contrastive objective.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Fine-tune a pretrained encoder as a 7-way classifier.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        /// Pretraining checkpoint.
        #[arg(long)]
        from: PathBuf,
    },
    /// Train a classifier from scratch with cross-entropy.
    TrainSupervised {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compute the metric report of a classifier checkpoint on one split.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        /// train, val or test.
        #[arg(long)]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a toy dataset and its split manifest.
    GenData {
        /// TOML toy-generator spec.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient and invariance checks.
    Selfcheck,
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if cfg.output.dir.is_none() {
        cfg.output.dir = Some(PathBuf::from("runs").join(cfg.objective.name()));
    }
    Ok(cfg)
}

fn report(outcome: &RunOutcome) {
    let r = &outcome.record;
    println!(
        "{} {}: best epoch {} of {}, val loss {:.5}",
        r.objective,
        r.stage.name(),
        r.best_epoch,
        r.epochs.len(),
        r.best().val_loss
    );
    if let Some(m) = &r.best().val_report {
        println!("val macro AUC {:.4}", m.macro_auc);
    }
    if let Some(p) = &r.best_checkpoint {
        println!("best checkpoint: {}", p.display());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { config } => {
            let cfg = load_config(&config)?;
            if !cfg.objective.is_pretraining() {
                bail!("{} is not a pretraining objective; use train-supervised", cfg.objective);
            }
            let data = Dataset::load(&cfg.data)?;
            report(&runner::run_pretrain(&cfg, &data)?);
        }
        Command::Finetune { config, from } => {
            let cfg = load_config(&config)?;
            let ckpt = Checkpoint::load(&from).with_context(|| format!("loading {}", from.display()))?;
            let data = Dataset::load(&cfg.data)?;
            report(&runner::run_finetune(&cfg, &data, &ckpt)?);
        }
        Command::TrainSupervised { config } => {
            let cfg = load_config(&config)?;
            let data = Dataset::load(&cfg.data)?;
            report(&runner::run_supervised(&cfg, &data)?);
        }
        Command::Evaluate { ckpt, split, out } => {
            let ckpt = Checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let metrics = runner::run_evaluate(&ckpt, split)?;
            std::fs::write(&out, metrics.to_json()?).with_context(|| format!("writing {}", out.display()))?;
            print!("{}", render_tables(&[("model", &metrics)]));
        }
        Command::GenData { spec, out } => {
            let text = std::fs::read_to_string(&spec).with_context(|| format!("reading {}", spec.display()))?;
            let toy: ToySpec = toml::from_str(&text).with_context(|| format!("parsing {}", spec.display()))?;
            let manifest = runner::generate_toy_data(&toy, runner::DEFAULT_SPLIT, &out)?;
            println!("wrote {} files, manifest {}", toy.n_files, manifest.display());
        }
        Command::Selfcheck => {
            let results = runner::selfcheck()?;
            let mut failed = 0;
            for r in &results {
                let status = if r.passed { "PASS" } else { "FAIL" };
                println!("[{status}] {:<48} {:.3e} (tol {:.0e})", r.name, r.value, r.tolerance);
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                bail!("{failed} of {} checks failed", results.len());
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
