use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dynsparse::commands;
use dynsparse::config::{self, desk_task, OracleSparsityCommand};
use dynsparse::presets;
use dynsparse::{CliError, Result};
use serde::Serialize;

/// Dynamic sparse attention experiments: training, sweeps, cost model and
/// dataflow simulation.
#[derive(Parser)]
#[command(name = "dynsparse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy model (dense pretraining, adaptation or two-phase).
    Train(Common),
    /// Grid of adaptation runs over σ, bit width, sparsity and seed.
    Sweep(Common),
    /// Analytic MAC and energy breakdown.
    Cost(Common),
    /// Operand-fetch simulation of sparse attention dataflows.
    Dataflow(Common),
    /// Accuracy versus post-softmax threshold on a trained checkpoint.
    OracleSparsity {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to analyse when no config file is given.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration by name.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides the configured seed(s).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "DYNSPARSE_OUT", default_value = "dynsparse-out")]
    out: PathBuf,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    dump_config: bool,
}

fn resolve<T>(
    common: &Common,
    command: &str,
    preset: impl Fn(&str) -> Option<T>,
) -> Result<T>
where
    T: serde::de::DeserializeOwned,
{
    match (&common.config, &common.preset) {
        (Some(path), _) => config::load(path),
        (None, Some(name)) => preset(name).ok_or_else(|| {
            CliError::Config(format!(
                "unknown {command} preset {name:?}; available: {}",
                presets::names_for(command).join(", ")
            ))
        }),
        (None, None) => Err(CliError::Config(format!(
            "{command} needs --config FILE or --preset NAME (available: {})",
            presets::names_for(command).join(", ")
        ))),
    }
}

/// Prints the resolved config when requested; returns true if the command
/// should stop there.
fn dump<T: Serialize>(common: &Common, cfg: &T) -> bool {
    if common.dump_config {
        println!("{}", serde_json::to_string_pretty(cfg).expect("config serializes"));
    }
    common.dump_config
}

fn done(out: &Path, summary: String) {
    println!("{summary}");
    println!("outputs written to {}", out.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let mut cfg = resolve(&c, "train", |n| presets::train(n, c.seed.unwrap_or(1)))?;
            if let Some(s) = c.seed {
                cfg.train.seed = s;
            }
            if dump(&c, &cfg) {
                return Ok(());
            }
            let outcome = commands::cmd_train(&cfg, &c.out)?;
            let e = outcome.final_eval();
            done(
                &c.out,
                format!(
                    "trained {} steps: accuracy {:.4}, model loss {:.4}",
                    outcome.history.len(),
                    e.accuracy,
                    e.model_loss
                ),
            );
        }
        Command::Sweep(c) => {
            let mut cfg = resolve(&c, "sweep", |n| presets::sweep(n, c.seed))?;
            if let Some(s) = c.seed {
                cfg.seeds = vec![s];
            }
            if dump(&c, &cfg) {
                return Ok(());
            }
            let res = commands::cmd_sweep(&cfg, &c.out)?;
            let mut lines = Vec::new();
            for s in &res.summary {
                lines.push(format!(
                    "sigma {} bits {} sparsity {} {:?}: median accuracy {:.4}",
                    s.sigma, s.bits, s.sparsity, s.policy, s.median_accuracy
                ));
            }
            done(&c.out, lines.join("\n"));
        }
        Command::Cost(c) => {
            let cfg = resolve(&c, "cost", presets::cost)?;
            if dump(&c, &cfg) {
                return Ok(());
            }
            let res = commands::cmd_cost(&cfg, &c.out)?;
            done(&c.out, format!("{} cost rows", res.rows.len()));
        }
        Command::Dataflow(c) => {
            let mut cfg = resolve(&c, "dataflow", |n| presets::dataflow(n, c.seed))?;
            if c.seed.is_some() {
                cfg.seed = c.seed;
            }
            if dump(&c, &cfg) {
                return Ok(());
            }
            let res = commands::cmd_dataflow(&cfg, &c.out)?;
            done(&c.out, format!("{} dataflow rows", res.rows.len()));
        }
        Command::OracleSparsity { common: c, checkpoint } => {
            let mut cfg: OracleSparsityCommand = match (&c.config, &c.preset, checkpoint) {
                (None, None, Some(path)) => OracleSparsityCommand {
                    checkpoint: path,
                    task: desk_task(),
                    eval_samples: 512,
                    seed: 1,
                    thetas: vec![1e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1],
                    max_drop: 0.01,
                },
                (Some(path), None, None) => config::load(path)?,
                _ => {
                    return Err(CliError::Config(
                        "oracle-sparsity takes either --config FILE or --checkpoint PATH".into(),
                    ))
                }
            };
            if let Some(s) = c.seed {
                cfg.seed = s;
            }
            if dump(&c, &cfg) {
                return Ok(());
            }
            let res = commands::cmd_oracle_sparsity(&cfg, &c.out)?;
            let best = match &res.best {
                Some(b) => format!("theta {} keeps accuracy within {} at sparsity {:.4}", b.theta, cfg.max_drop, b.sparsity),
                None => "no threshold stays within the tolerated drop".to_string(),
            };
            done(&c.out, format!("baseline accuracy {:.4}; {best}", res.baseline_accuracy));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
