use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fedcal_core::harness::{self, ExperimentConfig, RunOptions, SEED_ENV};

/// Federated calibration simulator.
#[derive(Parser)]
#[command(name = "fedcal", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one experiment and write its result files.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Worker threads for client training.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Overwrite an existing output directory.
        #[arg(long)]
        force: bool,
        /// Record per-round wall-clock time in results.csv.
        #[arg(long)]
        wall_clock: bool,
    },
    /// Run one variant per value of a config axis and write compare.csv.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Named axis (beta_rule, sim, aux, algorithm, task, partition) or dotted config path.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        force: bool,
    },
    /// Write per-client class counts of the configured partition.
    PartitionStats {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Evaluate a saved model on the configured test split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg =
        ExperimentConfig::from_path(path).with_context(|| format!("loading config {}", path.display()))?;
    cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            threads,
            force,
            wall_clock,
        } => {
            let cfg = load_config(&config)?;
            let (dir, bundle) = harness::cmd_run(&cfg, &out, RunOptions { threads, wall_clock }, force)?;
            let r = &bundle.final_report;
            println!(
                "{}: accuracy {:.4} ece {:.4} sce {:.4} -> {}",
                cfg.name,
                r.accuracy,
                r.ece,
                r.sce,
                dir.display()
            );
            if let Some(ts) = &bundle.temperature {
                println!(
                    "temperature {:.4}: ece {:.4} holdout nll {:.4} -> {:.4}",
                    ts.temperature, ts.report.ece, ts.holdout_nll_before, ts.holdout_nll_after
                );
            }
        }
        Command::Sweep {
            config,
            axis,
            values,
            out,
            threads,
            force,
        } => {
            let cfg = load_config(&config)?;
            let options = RunOptions {
                threads,
                wall_clock: false,
            };
            for row in harness::cmd_sweep(&cfg, &axis, &values, &out, options, force)? {
                println!("{}: accuracy {:.4} ece {:.4} sce {:.4}", row.variant, row.accuracy, row.ece, row.sce);
            }
        }
        Command::PartitionStats { config, out } => {
            let cfg = load_config(&config)?;
            let (path, rows) = harness::cmd_partition_stats(&cfg, &out)?;
            let max = rows.iter().map(|r| r.max_class_share).fold(0.0, f64::max);
            println!("{} clients, max class share {max:.3} -> {}", rows.len(), path.display());
        }
        Command::Eval { model, config } => {
            let cfg = load_config(&config)?;
            let report = harness::cmd_eval(&model, &cfg)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
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
