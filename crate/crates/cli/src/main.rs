//! `ternq`: teacher training, policy distillation into a ternary/binary
//! student, deployment verification, temperature sweeps, and a real-time
//! play loop, all driven by one flat-key config format.
//!
//! Exit codes: 0 ok, 2 bad config or usage, 3 missing input artifact,
//! 4 corrupt artifact, 5 verification failure, 1 anything else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ternq_core::Error;

mod commands;
mod config;
mod manifest;

use config::ExperimentConfig;

#[derive(Parser)]
#[command(
    name = "ternq",
    version,
    about = "Low-precision policy distillation: full-precision DQN teachers \
             into ternary-weight, binary-activation students, folded to \
             integer-only deployment"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a DDQN teacher and write its checkpoint plus metrics
    #[command(after_help = key_help())]
    TrainTeacher {
        /// Config file; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config value, e.g. --set teacher.gamma=0.95
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Distill a teacher checkpoint into a constrained student and fold it
    /// into the integer-only deployed model
    #[command(after_help = key_help())]
    Distill {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Distillation loss: kl, nll, or mse (overrides student.loss)
        #[arg(long)]
        loss: Option<String>,
        /// Distillation temperature (overrides student.tau)
        #[arg(long)]
        tau: Option<f64>,
        /// Comma-separated games for a merged multi-game student; each needs
        /// a teachers.<game> checkpoint
        #[arg(long)]
        games: Option<String>,
        /// Evaluate through the deployed integer network instead of the
        /// float inference path
        #[arg(long)]
        deployed: bool,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Run a deployed model in a paced frame loop and report returns and
    /// measured rates
    Play {
        /// Deployed model file (.tnf)
        #[arg(long)]
        model: PathBuf,
        /// Config file for the environment; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// Target frames per second; 0 runs unpaced
        #[arg(long, default_value_t = 30.0)]
        fps: f64,
        #[arg(long, default_value_t = 1000)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train one student per temperature in the grid and tabulate
    /// normalized scores; completed cells are skipped on rerun
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Temperature grid, e.g. --grid tau=0.05,0.01,0.005,0.001
        #[arg(long)]
        grid: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Check a deployed model against its student checkpoint: bit-exact
    /// hidden activations and fan-in bounds
    Verify {
        /// Deployed model file (.tnf)
        #[arg(long)]
        model: PathBuf,
        /// Student checkpoint the model was folded from
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print the annotated default config template
    PrintConfig,
}

/// The full key table for --help, so the config surface is discoverable
/// without running anything.
fn key_help() -> String {
    let mut out = String::from("Config keys (defaults tagged [paper] or [desk]):\n");
    for (key, default, help) in config::KEYS {
        out.push_str(&format!("  {key:<24} {default:<14} {help}\n"));
    }
    out
}

fn load_config(path: Option<&PathBuf>, sets: &[String]) -> ternq_core::Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for kv in sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set wants KEY=VALUE, got '{kv}'")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> ternq_core::Result<()> {
    match cli.cmd {
        Cmd::TrainTeacher { config, set } => {
            commands::cmd_train_teacher(&load_config(config.as_ref(), &set)?)
        }
        Cmd::Distill { config, loss, tau, games, deployed, set } => {
            let mut cfg = load_config(config.as_ref(), &set)?;
            if let Some(loss) = loss {
                cfg.set("student.loss", &loss)?;
            }
            if let Some(tau) = tau {
                cfg.set("student.tau", &tau.to_string())?;
            }
            commands::cmd_distill(&cfg, games.as_deref(), deployed)
        }
        Cmd::Play { model, config, fps, steps, seed, set } => {
            commands::cmd_play(&model, &load_config(config.as_ref(), &set)?, fps, steps, seed)
        }
        Cmd::Sweep { config, grid, set } => {
            commands::cmd_sweep(&load_config(config.as_ref(), &set)?, &grid)
        }
        Cmd::Verify { model, checkpoint } => commands::cmd_verify(&model, &checkpoint),
        Cmd::PrintConfig => {
            print!("{}", ExperimentConfig::template());
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::MissingInput(_) => 3,
        Error::Corrupt(_) => 4,
        Error::Verification(_) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
