use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use meatlab::analysis::{landscape_grid, weight_histogram, LandscapeConfig};
use meatlab::ensemble::{finalize, CheckpointStore, EnsembleConfig, Strategy};
use meatlab::harness::{
    load_checkpoint, run_experiment, save_checkpoint, Experiment, ExperimentConfig,
};
use meatlab::Result;

#[derive(Parser)]
#[command(
    name = "meatlab",
    version,
    about = "Adversarial training with median checkpoint ensembles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with every ensemble strategy evaluated alongside; write all artifacts.
    Train(TrainArgs),
    /// Build one strategy's ensemble from a finished run's checkpoints.
    Ensemble {
        #[command(flatten)]
        run: RunDir,
        #[arg(long, default_value = "meat_median")]
        strategy: Strategy,
        /// Last epoch to include; defaults to the final one.
        #[arg(long)]
        epoch: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Clean and robust test accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        run: RunDir,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Loss surface around a checkpoint, written as JSON.
    Landscape {
        #[command(flatten)]
        run: RunDir,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Histogram of selected weights of a checkpoint, printed as JSON.
    Hist {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `*`, a layer name, or `layer.tensor`.
        #[arg(long, default_value = "*")]
        selector: String,
        #[arg(long, default_value_t = 41)]
        bins: usize,
        /// Half-width of the symmetric range.
        #[arg(long, default_value_t = 1.0)]
        range: f32,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a field, e.g. `--set train.total_epochs=30`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, env = "MEATLAB_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "MEATLAB_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    overwrite: bool,
}

#[derive(Args)]
struct RunDir {
    /// Directory produced by `meatlab train`.
    #[arg(long)]
    run_dir: PathBuf,
}

impl RunDir {
    fn experiment(&self) -> Result<Experiment> {
        let cfg = ExperimentConfig::load(self.run_dir.join("config.resolved.toml"))?;
        Experiment::prepare(&cfg)
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| meatlab::Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(d) = args.output_dir {
        cfg.output_dir = d;
    }
    cfg.overwrite |= args.overwrite;
    let summary = run_experiment(&cfg)?;
    println!("output: {}", cfg.output_dir.display());
    println!(
        "{:<12} {:>6} {:>9} {:>9} {:>8}",
        "tag", "best@", "best_rob", "last_rob", "gap"
    );
    for (tag, g) in &summary.gaps {
        println!(
            "{:<12} {:>6} {:>9.4} {:>9.4} {:>8.4}",
            tag, g.best_epoch, g.best_robust, g.last_robust, g.robust_gap
        );
    }
    Ok(())
}

fn ensemble(run: &RunDir, strategy: Strategy, epoch: Option<usize>, out: &Path) -> Result<()> {
    let exp = run.experiment()?;
    let cfg = &exp.config;
    let total = cfg.train.total_epochs;
    let store = CheckpointStore::open(run.run_dir.join("checkpoints"))?;
    let upto = epoch
        .or_else(|| store.epochs().last().copied())
        .ok_or_else(|| meatlab::Error::Precondition("run has no checkpoints".into()))?;
    let ens = EnsembleConfig {
        strategy,
        ..cfg.ensemble.config_for(strategy)
    };
    let ckpt = finalize(
        &cfg.model,
        &store,
        &ens,
        total,
        upto,
        &exp.calibration_batches()?,
    )?;
    save_checkpoint(&ckpt, out)?;
    let (clean, robust) = exp.evaluate(&ckpt.to_model(&cfg.model), upto)?;
    println!(
        "{strategy} @ {upto}: clean {clean:.4} robust {robust:.4} -> {}",
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => train(args),
        Command::Ensemble {
            run,
            strategy,
            epoch,
            out,
        } => ensemble(&run, strategy, epoch, &out),
        Command::Eval { run, checkpoint } => {
            let exp = run.experiment()?;
            let ckpt = load_checkpoint(&checkpoint)?;
            let (clean, robust) = exp.evaluate(&ckpt.to_model(&exp.config.model), ckpt.epoch)?;
            println!("epoch {}: clean {clean:.4} robust {robust:.4}", ckpt.epoch);
            Ok(())
        }
        Command::Landscape {
            run,
            checkpoint,
            out,
            resolution,
        } => {
            let exp = run.experiment()?;
            let lc = LandscapeConfig {
                resolution: resolution.unwrap_or(exp.config.landscape.resolution),
                ..exp.config.landscape
            };
            let sample = exp.test.subsample(lc.sample_size, lc.direction_seed)?;
            let model = load_checkpoint(&checkpoint)?.to_model(&exp.config.model);
            let grid = landscape_grid(&model, &sample.features, &sample.labels, &lc)?;
            std::fs::write(&out, serde_json::to_string_pretty(&grid)?)?;
            println!(
                "center {:.4} spread {:.4} -> {}",
                grid.center(),
                grid.spread(),
                out.display()
            );
            Ok(())
        }
        Command::Hist {
            checkpoint,
            selector,
            bins,
            range,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let h = weight_histogram(&ckpt.params, &selector, bins, (-range, range))?;
            println!("{}", serde_json::to_string_pretty(&h)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
