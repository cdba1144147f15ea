//! Command-line driver for the experiment pipeline.
//!
//! Each subcommand runs one stage (or all of them) for a configured
//! experiment. Exit codes: 0 on success, 2 on validation errors, 3 on
//! numerical failures.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

use pigan::pipeline::{self, ExperimentConfig, ExperimentId, Preset, Stage};

#[derive(Parser)]
#[command(
    name = "pigan",
    about = "Functional priors from data and physics: WGAN-GP prior learning with latent-space HMC/NUTS posteriors"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate historical snapshots (and operator datasets).
    GenData(StageArgs),
    /// Train the adversarial functional prior.
    TrainPrior(StageArgs),
    /// Train the operator surrogate (operator-encoded experiments).
    TrainDeeponet(StageArgs),
    /// Estimate the latent posterior and push it forward.
    Posterior(StageArgs),
    /// Run the comparison baselines (GPR, meta-learned initialization).
    Baseline(StageArgs),
    /// Convergence and sanity diagnostics.
    Diagnose(StageArgs),
    /// Run every applicable stage in order.
    RunAll(StageArgs),
}

#[derive(Args)]
struct StageArgs {
    /// JSON experiment configuration; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Experiment id (used when no config file is given): sine-meta,
    /// dr-forward, dr-inverse, fractional, darcy, riser-window,
    /// gp-appendix-b, zigzag-appendix-c.
    #[arg(long)]
    experiment: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// desk (reduced budgets) or paper (full budgets).
    #[arg(long)]
    preset: Option<String>,
}

fn build_config(args: &StageArgs, stage: Stage) -> Result<ExperimentConfig, String> {
    let mut cfg = match (&args.config, &args.experiment) {
        (Some(path), _) => ExperimentConfig::from_json_file(path).map_err(|e| e.to_string())?,
        (None, Some(exp)) => {
            let id =
                ExperimentId::parse(exp).ok_or_else(|| format!("unknown experiment `{exp}`"))?;
            ExperimentConfig::new(id, stage, PathBuf::from(format!("runs/{exp}")))
        }
        (None, None) => {
            return Err("either --config or --experiment is required".into());
        }
    };
    cfg.stage = stage;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(preset) = &args.preset {
        cfg.preset = match preset.as_str() {
            "desk" => Preset::Desk,
            "paper" => Preset::Paper,
            other => return Err(format!("unknown preset `{other}` (use desk or paper)")),
        };
    }
    Ok(cfg)
}

fn main() {
    let cli = Cli::parse();
    let (args, stage) = match &cli.cmd {
        Cmd::GenData(a) => (a, Stage::GenData),
        Cmd::TrainPrior(a) => (a, Stage::TrainPrior),
        Cmd::TrainDeeponet(a) => (a, Stage::TrainDeeponet),
        Cmd::Posterior(a) => (a, Stage::Posterior),
        Cmd::Baseline(a) => (a, Stage::Baseline),
        Cmd::Diagnose(a) => (a, Stage::Diagnose),
        Cmd::RunAll(a) => (a, Stage::All),
    };
    let cfg = match build_config(args, stage) {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("error: {msg}");
            std::process::exit(2);
        }
    };
    match pipeline::run(&cfg) {
        Ok(manifest) => {
            for (name, value) in &manifest.metrics {
                println!("{name} = {value}");
            }
            println!(
                "wrote {} artifacts and manifest.json under {}",
                manifest.artifacts.len(),
                cfg.out_dir.display()
            );
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
