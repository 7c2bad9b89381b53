use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mfcrowd_cli::{execute, parse_config, ArmSelection, RunOptions};

#[derive(Parser)]
#[command(name = "mfcrowd", version, about = "Mean-field crowd-aversion control on the 1-D torus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize the configured arms and write CSV/JSON artifacts.
    Run {
        /// TOML run configuration.
        config: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Arms to solve; overrides the configuration.
        #[arg(long, value_enum)]
        arm: Option<ArmSelection>,
        /// Run the particle convergence study.
        #[arg(long)]
        particles: bool,
        /// Continue when a convexity check fails.
        #[arg(long)]
        override_convexity: bool,
        /// Seed for the convexity sampler and the particles; overrides the
        /// configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let Command::Run {
        config,
        out,
        arm,
        particles,
        override_convexity,
        seed,
    } = Cli::parse().command;
    let mut experiment = match parse_config(&config) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(arm) = arm {
        experiment.config.arm = Some(arm);
        experiment = match mfcrowd_cli::config::resolve(experiment.config) {
            Ok(e) => e,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(1);
            }
        };
    }
    if let Some(seed) = seed {
        experiment.config.seed = seed;
    }
    if particles {
        experiment.config.particles.enabled = true;
    }
    match execute(&experiment, &out, RunOptions { override_convexity }) {
        Ok(report) => {
            let summary = &report.summary;
            for (arm, s) in &summary.arms {
                eprintln!(
                    "{}: risk {:.6} after {} iterations ({:?}), residual ratio {:.3e}",
                    arm.name(),
                    s.risk.total,
                    s.iterations,
                    s.stop,
                    s.residual_ratio
                );
            }
            eprintln!(
                "optimization {:.1} s, particles {:.1} s",
                report.timings.optimization, report.timings.particles
            );
            if summary.stalled {
                eprintln!("error: line search stalled; partial artifacts in {}", out.display());
            }
            ExitCode::from(summary.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
