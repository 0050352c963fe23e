use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rwalk_core::harness::{self, DatasetSource, ReplayMode};
use rwalk_core::{ExperimentConfig, HeadMode, Method, Sampler, SyntheticSpec};

#[derive(Parser)]
#[command(
    name = "rwalk",
    version,
    about = "Incremental-learning experiments on task streams"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write CSV/JSON results into the output directory.
    Run(RunArgs),
    /// Print the default configuration as JSON.
    DefaultConfig {
        #[arg(long, value_enum, default_value_t = DatasetArg::Mnist)]
        dataset: DatasetArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Mnist,
    Synthetic,
}

#[derive(Clone, Copy, ValueEnum)]
enum HeadsArg {
    Single,
    Multi,
}

#[derive(clap::Args)]
struct RunArgs {
    /// JSON config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// vanilla, ewcpp, pi or rwalk.
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    /// uniform, plane, entropy or mof.
    #[arg(long)]
    sampler: Option<Sampler>,
    #[arg(long, value_enum)]
    heads: Option<HeadsArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetArg>,
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    /// Skip training the joint reference models (no intransigence).
    #[arg(long)]
    no_reference: bool,
    /// Save the full learner state after every task.
    #[arg(long)]
    checkpoint: bool,
    /// Create output units for all labels before the first task.
    #[arg(long)]
    preallocate_outputs: bool,
    /// Append the whole episodic memory to every mini-batch.
    #[arg(long)]
    replay_every_batch: bool,
}

impl RunArgs {
    fn build_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)
                .with_context(|| format!("loading config {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        match self.dataset {
            Some(DatasetArg::Synthetic) if !matches!(cfg.dataset, DatasetSource::Synthetic(_)) => {
                let base = ExperimentConfig::synthetic(SyntheticSpec::default());
                cfg.dataset = base.dataset;
                if self.config.is_none() {
                    cfg.hidden = base.hidden;
                    cfg.out_dir = base.out_dir;
                }
            }
            Some(DatasetArg::Mnist) if !matches!(cfg.dataset, DatasetSource::Mnist { .. }) => {
                cfg.dataset = DatasetSource::default();
            }
            _ => {}
        }
        if let Some(dir) = &self.mnist_dir {
            cfg.dataset = DatasetSource::Mnist { dir: dir.clone() };
        }
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(l) = self.lambda {
            cfg.lambda = Some(l);
        }
        if let Some(m) = self.samples_per_class {
            cfg.samples_per_class = m;
        }
        if let Some(s) = self.sampler {
            cfg.sampler = s;
        }
        if let Some(h) = self.heads {
            cfg.head_mode = match h {
                HeadsArg::Single => HeadMode::Single,
                HeadsArg::Multi => HeadMode::Multi,
            };
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.epochs_per_task = Some(e);
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if self.no_reference {
            cfg.compute_reference = false;
        }
        if self.checkpoint {
            cfg.write_checkpoint = true;
        }
        if self.preallocate_outputs {
            cfg.preallocate_outputs = true;
        }
        if self.replay_every_batch {
            cfg.replay = ReplayMode::EveryBatch;
        }
        cfg.validate().context("invalid configuration")?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.build_config()?;
            let result = harness::run_experiment(&cfg).context("experiment failed")?;
            print!("{}", harness::summary_table(&result));
            println!("results written to {}", cfg.out_dir.display());
        }
        Command::DefaultConfig { dataset } => {
            let cfg = match dataset {
                DatasetArg::Mnist => ExperimentConfig::default(),
                DatasetArg::Synthetic => ExperimentConfig::synthetic(SyntheticSpec::default()),
            };
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
