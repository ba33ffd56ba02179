//! Command-line driver for the weight-generation experiments.
//!
//! Subcommands mirror the pipeline stages; every one takes `--config`,
//! `--out`, and an optional `--seed` override. Exit codes: 0 success,
//! 1 usage error, 2 verification violation, 3 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mcdi_core::harness::{self, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "mcdi",
    version,
    about = "Meta-learned weight generation via local consistency diffusion"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file (key=value).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides base_seed from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Collect and store one optimization trajectory per training task.
    Prepare {
        #[command(flatten)]
        common: Common,
    },
    /// Meta-train the denoiser on stored trajectories.
    Train {
        #[command(flatten)]
        common: Common,
        /// Trajectory directory; defaults to <out>/trajectories.
        #[arg(long)]
        traj_dir: Option<PathBuf>,
    },
    /// Generate weights for held-out tasks and write metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Denoiser checkpoint; defaults to <out>/checkpoint.bin.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Fine-tune generated weights this many Adam steps on the support
        /// set before measuring the query metric.
        #[arg(long)]
        finetune_steps: Option<usize>,
    },
    /// Run the four-variant ablation ladder and the segment sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Run the numeric verification suite.
    Verify {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, mcdi_core::Error> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    for notice in &cfg.notices {
        eprintln!("note: {notice}");
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<u8, mcdi_core::Error> {
    match cli.command {
        Command::Prepare { common } => {
            let cfg = load_config(&common)?;
            let outcome = harness::run_prepare(&cfg, &common.out)?;
            println!(
                "prepared {} trajectories in {} ({} failures)",
                outcome.written,
                outcome.trajectory_dir.display(),
                outcome.failures.len()
            );
            Ok(0)
        }
        Command::Train { common, traj_dir } => {
            let cfg = load_config(&common)?;
            let dir = traj_dir.unwrap_or_else(|| common.out.join("trajectories"));
            let outcome = harness::run_train(&cfg, &dir, &common.out)?;
            println!(
                "trained {} epochs, final mean loss {:.6}, checkpoint {}",
                cfg.meta.epochs,
                outcome.log.final_mean_loss(),
                outcome.checkpoint_path.display()
            );
            Ok(0)
        }
        Command::Eval {
            common,
            checkpoint,
            finetune_steps,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(steps) = finetune_steps {
                cfg.finetune_steps = steps;
            }
            let ckpt = checkpoint.unwrap_or_else(|| common.out.join("checkpoint.bin"));
            let outcome = harness::run_eval(&cfg, &ckpt, &common.out)?;
            for r in &outcome.records {
                println!(
                    "{:<14} recon_mse {:>12.6e}  query {:>8.4}  denoiser_evals {}",
                    r.variant, r.recon_mse, r.query_metric, r.denoiser_evals
                );
            }
            println!("metrics written to {}", outcome.metrics_path.display());
            Ok(0)
        }
        Command::Ablate { common } => {
            let cfg = load_config(&common)?;
            let outcome = harness::run_ablation(&cfg, Some(common.out.as_path()))?;
            for r in &outcome.records {
                println!(
                    "{:<9} k={} T={:<3} recon_mse {:>12.6e}  query {:>8.4}",
                    r.variant, r.k, r.t_steps, r.recon_mse, r.query_metric
                );
            }
            if let Some(path) = &outcome.csv_path {
                println!("ablation table written to {}", path.display());
            }
            Ok(0)
        }
        Command::Verify { common } => {
            let cfg = load_config(&common)?;
            let report = harness::run_verify(&cfg, Some(common.out.as_path()))?;
            let checks: std::collections::BTreeSet<&str> =
                report.rows.iter().map(|r| r.check.as_str()).collect();
            for check in checks {
                let rows: Vec<_> = report.rows.iter().filter(|r| r.check == check).collect();
                let bad = rows.iter().filter(|r| !r.holds).count();
                println!(
                    "{:<18} {:>4} instances, {} violations",
                    check,
                    rows.len(),
                    bad
                );
            }
            if let Some(path) = &report.csv_path {
                println!("report written to {}", path.display());
            }
            if report.violations > 0 {
                eprintln!("{} violations detected", report.violations);
                return Ok(2);
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help/version requests are successes; everything else is usage.
            use clap::error::ErrorKind;
            let _ = err.print();
            return match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(3)
        }
    }
}
