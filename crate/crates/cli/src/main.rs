//! `gatelab`: run gating experiments and trajectory/depth evaluations from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use commands::TrajFormat;
use config::{FileConfig, Overrides, RunConfig, OUT_ENV};

#[derive(Debug, Parser)]
#[command(name = "gatelab", version, about = "Recurrent-state update gating lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Threshold of the adaptive frame gates.
    #[arg(long, allow_hyphen_values = true)]
    tau: Option<f64>,
    /// Output directory [default: $GATELAB_OUT, else gatelab-out].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pooled β statistics and histogram of TTT3R over synthetic streams.
    ProfileBeta(Common),
    /// Duplicate-injection probe over every configured policy.
    ProbeRedundancy {
        #[command(flatten)]
        common: Common,
        /// cut3r, ttt3r, afg-img, afg-pose, fixed:<c>, fuse-max, fuse-prod, fuse-weighted.
        #[arg(long = "policy")]
        policies: Vec<String>,
    },
    /// Analytic and impulse-response memory horizons.
    Horizon {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        beta_bar: Option<f64>,
        #[arg(long)]
        alpha_min: Option<f64>,
    },
    /// Probe summary across the τ grid for the first adaptive policy.
    SweepTau {
        #[command(flatten)]
        common: Common,
        #[arg(long = "policy")]
        policies: Vec<String>,
    },
    /// Constant frame gates against the adaptive image gate.
    SweepAlpha(Common),
    /// Sim(3)-aligned ATE and rotational RPE; prints JSON.
    EvalTraj {
        est: PathBuf,
        gt: PathBuf,
        /// RPE frame lag.
        #[arg(long)]
        delta: Option<usize>,
        #[arg(long, value_enum, default_value = "auto")]
        format: TrajFormat,
        /// Print CSV instead of JSON.
        #[arg(long)]
        csv: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// AbsRel, RMSE and δ<1.25 over frames paired by file name; prints JSON.
    EvalDepth {
        pred_dir: PathBuf,
        gt_dir: PathBuf,
        /// metric or scale-shift.
        #[arg(long)]
        alignment: Option<String>,
        #[arg(long)]
        csv: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn resolve(config: Option<&PathBuf>, flags: Overrides) -> Result<RunConfig> {
    let file = match config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let env_out = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    RunConfig::resolve(file, flags, env_out)
}

fn common_overrides(c: &Common) -> Overrides {
    Overrides {
        seed: c.seed,
        tau: c.tau,
        out: c.out.clone(),
        ..Default::default()
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ProfileBeta(c) => commands::profile_beta(&resolve(c.config.as_ref(), common_overrides(&c))?),
        Command::ProbeRedundancy { common, policies } => {
            let flags = Overrides {
                policies,
                ..common_overrides(&common)
            };
            commands::probe_redundancy(&resolve(common.config.as_ref(), flags)?)
        }
        Command::Horizon {
            common,
            beta_bar,
            alpha_min,
        } => {
            let flags = Overrides {
                beta_bar,
                alpha_min,
                ..common_overrides(&common)
            };
            commands::horizon(&resolve(common.config.as_ref(), flags)?)
        }
        Command::SweepTau { common, policies } => {
            let flags = Overrides {
                policies,
                ..common_overrides(&common)
            };
            commands::sweep_tau_cmd(&resolve(common.config.as_ref(), flags)?)
        }
        Command::SweepAlpha(c) => commands::sweep_alpha_cmd(&resolve(c.config.as_ref(), common_overrides(&c))?),
        Command::EvalTraj {
            est,
            gt,
            delta,
            format,
            csv,
            config,
        } => {
            let cfg = resolve(
                config.as_ref(),
                Overrides {
                    delta,
                    ..Default::default()
                },
            )?;
            print!("{}", commands::eval_traj(&est, &gt, format, cfg.delta, csv)?);
            Ok(())
        }
        Command::EvalDepth {
            pred_dir,
            gt_dir,
            alignment,
            csv,
            config,
        } => {
            let cfg = resolve(
                config.as_ref(),
                Overrides {
                    alignment,
                    ..Default::default()
                },
            )?;
            print!("{}", commands::eval_depth(&pred_dir, &gt_dir, cfg.alignment, csv)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
