use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lgtm_cli::{cmd_run, cmd_sweep, cmd_verify, load_config};
use lgtm_core::checks::{CheckOptions, Scale};
use lgtm_core::influence::{EpsilonMode, EpsilonRule};
use lgtm_core::Error;

/// Influence-guided teacher/student distillation.
#[derive(Parser)]
#[command(name = "lgtm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Small,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration.
    Run {
        /// TOML config, or a manifest.json from an earlier run.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "LGTM_OUT_DIR", default_value = "lgtm-out")]
        out: PathBuf,
    },
    /// Run the numerical self-checks.
    Verify {
        #[arg(long, value_enum, default_value = "small")]
        scale: ScaleArg,
        /// Fixed finite-difference step for the FDA checks.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Run the Cartesian product of a grid over a base config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// TOML table mapping sweepable keys to lists of values.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, env = "LGTM_OUT_DIR", default_value = "lgtm-out")]
        out: PathBuf,
    },
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    if e.is_config() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match cli.command {
        Command::Run { config, out } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            match cmd_run(&cfg, &out) {
                Ok(m) => {
                    println!("run complete: {} steps, artifacts in {}", m.steps.unwrap_or(0), out.display());
                    if let Some(f) = m.final_metrics {
                        println!("student val acc {:.4}, val loss {:.4}", f.student_val_acc, f.student_val_loss);
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Verify { scale, epsilon } => {
            let mut opts = CheckOptions::new(match scale {
                ScaleArg::Small => Scale::Small,
                ScaleArg::Full => Scale::Full,
            });
            if let Some(value) = epsilon {
                let rule = EpsilonRule {
                    mode: EpsilonMode::Fixed,
                    value,
                };
                if let Err(e) = rule.validate() {
                    return fail(&Error::config("epsilon", e.to_string()));
                }
                opts.epsilon = Some(rule);
            }
            match cmd_verify(&opts, &mut std::io::stdout()) {
                Ok((true, _)) => ExitCode::SUCCESS,
                Ok((false, _)) => ExitCode::from(1),
                Err(e) => fail(&e),
            }
        }
        Command::Sweep { config, grid, jobs, out } => {
            let grid_text = match std::fs::read_to_string(&grid) {
                Ok(t) => t,
                Err(e) => return fail(&Error::config("grid", format!("cannot read {}: {e}", grid.display()))),
            };
            match cmd_sweep(&config, &grid_text, jobs, &out) {
                Ok(outcomes) => {
                    let failed: Vec<_> = outcomes.iter().filter(|o| o.result.is_err()).collect();
                    for o in &failed {
                        eprintln!("cell {} failed: {}", o.cell.name, o.result.as_ref().unwrap_err());
                    }
                    println!("sweep: {} cells, {} failed, summary in {}", outcomes.len(), failed.len(), out.display());
                    if failed.is_empty() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(1)
                    }
                }
                Err(e) => fail(&e),
            }
        }
    }
}
