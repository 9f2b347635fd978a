//! Batch command-line frontend: simulate, fit, and post-process on CSV
//! datasets. Every command is deterministic given its seed; the worker count
//! can be overridden with the `GEOLATENT_THREADS` environment variable.

use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use geolatent::pipeline::{
    cmd_correlate, cmd_diagnose, cmd_evaluate, cmd_fit, cmd_predict, cmd_rank, cmd_simulate,
    FitArgs, FitOverrides,
};

#[derive(Parser)]
#[command(
    name = "geolatent",
    version,
    about = "Latent Gaussian field inference for mixed ordinal/continuous spatial responses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model to a dataset directory (sites.csv + responses.csv)
    Fit(Fit),
    /// Kriging prediction of the latent field and responses at new sites
    Predict(Predict),
    /// Posterior ranks of the observed sites
    Rank(FitDirOp),
    /// Metric-field correlations and contribution weights
    Correlate(FitDirOp),
    /// Standardized squared-error loss table
    Evaluate(FitDirOp),
    /// Gelman-Rubin convergence diagnostics (needs >= 2 chains)
    Diagnose(FitDirOp),
    /// Generate a synthetic dataset with known truth
    Simulate(Simulate),
}

#[derive(Args)]
struct Fit {
    /// Directory containing sites.csv and responses.csv
    #[arg(long)]
    data: PathBuf,
    /// Run configuration (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Output directory for traces, summaries, and the manifest
    #[arg(long)]
    out: PathBuf,
    /// Number of chains (default from config, 2)
    #[arg(long)]
    chains: Option<usize>,
    /// Total MCMC iterations per chain (default 100000)
    #[arg(long)]
    iters: Option<usize>,
    /// Burn-in iterations discarded from each chain (default 10000)
    #[arg(long)]
    burnin: Option<usize>,
    /// Store latent-response draws every S-th retained iteration (default 10)
    #[arg(long = "thin-z")]
    thin_z: Option<usize>,
    /// Base RNG seed; chain c uses seed + c
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Predict {
    /// Completed fit directory
    #[arg(long)]
    fit: PathBuf,
    /// Directory containing the new sites.csv
    #[arg(long)]
    newdata: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Use every N-th retained draw for the predictive sample (default 10)
    #[arg(long = "thin-pred", default_value_t = 10)]
    thin_pred: usize,
}

#[derive(Args)]
struct FitDirOp {
    /// Completed fit directory
    #[arg(long)]
    fit: PathBuf,
    /// Output directory (defaults to the fit directory)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Simulate {
    /// Run configuration with an optional [sim] section (defaults used when
    /// omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the simulation seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Fit(a) => {
            let report = cmd_fit(&FitArgs {
                data_dir: a.data,
                config_path: a.config,
                out_dir: a.out,
                overrides: FitOverrides {
                    chains: a.chains,
                    iterations: a.iters,
                    burnin: a.burnin,
                    thin_z: a.thin_z,
                    seed: a.seed,
                },
            })
            .context("fit failed")?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!("fit written to {}", report.out_dir.display());
        }
        Command::Predict(a) => {
            cmd_predict(&a.fit, &a.newdata, &a.out, a.thin_pred).context("predict failed")?;
            println!("predictions written to {}", a.out.display());
        }
        Command::Rank(a) => {
            let out = a.out.unwrap_or_else(|| a.fit.clone());
            cmd_rank(&a.fit, &out).context("rank failed")?;
            println!("ranks written to {}", out.display());
        }
        Command::Correlate(a) => {
            let out = a.out.unwrap_or_else(|| a.fit.clone());
            cmd_correlate(&a.fit, &out).context("correlate failed")?;
            println!("weights written to {}", out.display());
        }
        Command::Evaluate(a) => {
            let out = a.out.unwrap_or_else(|| a.fit.clone());
            cmd_evaluate(&a.fit, &out).context("evaluate failed")?;
            println!("loss table written to {}", out.display());
        }
        Command::Diagnose(a) => {
            let out = a.out.unwrap_or_else(|| a.fit.clone());
            let report = cmd_diagnose(&a.fit, &out).context("diagnose failed")?;
            if report.flagged {
                eprintln!("warning: at least one parameter has PSRF >= 1.2; chains have not converged");
            }
            println!("diagnostics written to {}", out.display());
        }
        Command::Simulate(a) => {
            let warnings =
                cmd_simulate(a.config.as_deref(), a.seed, &a.out).context("simulate failed")?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            println!("simulated dataset written to {}", a.out.display());
        }
    }
    Ok(())
}
