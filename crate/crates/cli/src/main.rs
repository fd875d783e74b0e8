use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fmlab_cli::commands::{self, NumericFailure};
use fmlab_cli::config::ExperimentConfig;
use fmlab_cli::repro::{self, Figure, ReproOptions};

/// Flow-map training laboratory.
///
/// Exit codes: 0 success, 1 usage or input error, 2 numeric failure.
#[derive(Debug, Parser)]
#[command(name = "fmlab", version)]
struct Cli {
    /// Experiment config file (flat `key = value`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train and write metrics.csv, checkpoint.bin and state.bin.
    Train {
        /// Continue from a saved state.bin.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint into samples.csv / samples.svg.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write one metrics row (eval.csv) for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Loss landscape along the top two Hessian directions.
    Landscape {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Landscape CSV whose 95% bound is used for a second spike count.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Run a toy reproduction: fig2, fig3, fig4, fig10 or landscape.
    Repro {
        figure: Figure,
        /// Training steps per run.
        #[arg(long, default_value_t = 5000)]
        steps: u64,
        /// Seeds per cell, starting at --seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::parse(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Train { resume } => commands::train(&cfg, resume.as_deref()),
        Command::Sample { checkpoint } => commands::sample(&cfg, checkpoint),
        Command::Eval { checkpoint } => {
            let row = commands::eval(&cfg, checkpoint)?;
            println!(
                "ed_proxy = {}, energy_distance = {}",
                row.ed_proxy.unwrap_or(f64::NAN),
                row.dist_energy.unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Landscape { checkpoint, reference } => {
            let r = commands::landscape(&cfg, checkpoint, reference.as_deref())?;
            println!("sigma = {}, spikes = {}", r.sigma, r.spikes);
            Ok(())
        }
        Command::Repro { figure, steps, seeds } => {
            let opts = ReproOptions {
                steps: *steps,
                seeds: *seeds,
                base_seed: cli.seed.unwrap_or(0),
                out: cli.out.clone().unwrap_or_else(|| PathBuf::from("repro")),
                landscape: cfg.landscape.clone(),
                ..Default::default()
            };
            for check in repro::run(*figure, &opts)? {
                println!("{check}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<NumericFailure>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
