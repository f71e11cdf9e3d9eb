//! Command-line front end: `dcg train` and `dcg export`.

mod config;
mod export;
mod run;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

pub use config::{parse_assignment, parse_config, parse_value, read_config_file, ExperimentConfig};
pub use export::{aggregate_experiment, bin_curve, export_plot_data, BinRow, EXPORT_HEADER, N_BINS};
pub use run::{
    experiment_dir, format_metrics, parse_metrics, read_metrics, run_experiment, run_seed, seed_dir, RunOptions,
    SeedOutcome, CHECKPOINT_DIR, CONFIG_FILE, METRICS_FILE, METRICS_HEADER,
};
pub use crate::trainer::MetricsRow;

use crate::error::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "dcg", version, about = "Deep coordination graphs on predator-prey tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration over one or more seeds.
    Train(TrainArgs),
    /// Aggregate finished runs into binned mean ± standard error curves.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
#[command(allow_negative_numbers = true)]
pub struct TrainArgs {
    /// dcg, dcg-s, vdn, iql or lrq.
    #[arg(long)]
    pub algo: Option<String>,
    /// full, cycle, line, star or empty.
    #[arg(long)]
    pub topology: Option<String>,
    /// Payoff rank (0 = full) or LRQ factor count.
    #[arg(long)]
    pub rank: Option<String>,
    /// pp-coop or pp-ghost.
    #[arg(long)]
    pub env: Option<String>,
    /// Punishment for a lone catch attempt.
    #[arg(long)]
    pub p: Option<String>,
    /// Run seed; repeat for several.
    #[arg(long = "seed")]
    pub seeds: Vec<String>,
    /// Total training env steps.
    #[arg(long)]
    pub steps: Option<String>,
    #[arg(long)]
    pub k_passes: Option<String>,
    /// Disable max-plus message normalisation.
    #[arg(long)]
    pub no_msg_norm: bool,
    /// Separate parameters per agent and per edge.
    #[arg(long)]
    pub nps: bool,
    /// Output root.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flat JSON config file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Env steps between checkpoints (0 = final only).
    #[arg(long)]
    pub checkpoint_every: Option<String>,
    /// Experiment name (output subdirectory).
    #[arg(long)]
    pub name: Option<String>,
    /// Continue from existing checkpoints.
    #[arg(long)]
    pub resume: bool,
    /// Record wall-clock milliseconds in metrics.
    #[arg(long)]
    pub wall_time: bool,
    /// Any other config key, as key=value.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Experiment directories (`<out>/<name>`).
    #[arg(required = true)]
    pub dirs: Vec<PathBuf>,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl TrainArgs {
    /// Command-line values as config overrides.
    pub fn overrides(&self) -> Result<Map<String, Value>> {
        let mut m = Map::new();
        for s in &self.set {
            let (k, v) = parse_assignment(s)?;
            m.insert(k, v);
        }
        let mut put = |key: &str, raw: &Option<String>, as_string: bool| {
            if let Some(r) = raw {
                let v = if as_string { Value::String(r.clone()) } else { parse_value(r) };
                m.insert(key.to_string(), v);
            }
        };
        put("algo", &self.algo, true);
        put("topology", &self.topology, true);
        put("rank", &self.rank, false);
        put("env", &self.env, true);
        put("p", &self.p, false);
        put("total_env_steps", &self.steps, false);
        put("k_passes", &self.k_passes, false);
        put("checkpoint_every", &self.checkpoint_every, false);
        put("name", &self.name, true);
        if let Some(o) = &self.out {
            m.insert("out".into(), Value::String(o.to_string_lossy().into_owned()));
        }
        if !self.seeds.is_empty() {
            m.insert("seeds".into(), Value::Array(self.seeds.iter().map(|s| parse_value(s)).collect()));
        }
        if self.no_msg_norm {
            m.insert("msg_norm".into(), Value::Bool(false));
        }
        if self.nps {
            m.insert("nps".into(), Value::Bool(true));
        }
        if self.wall_time {
            m.insert("wall_time".into(), Value::Bool(true));
        }
        Ok(m)
    }

    pub fn to_config(&self) -> Result<ExperimentConfig> {
        let file = self.config.as_deref().map(read_config_file).transpose()?;
        parse_config(file.as_ref(), &self.overrides()?)
    }
}

/// Exit status for a usage error.
pub const EXIT_USAGE: i32 = 2;
/// Exit status when a run failed.
pub const EXIT_FAILURE: i32 = 1;

/// Executes a parsed command line and returns the process exit status.
pub fn execute(cli: Cli) -> i32 {
    match cli.command {
        Command::Train(args) => {
            let cfg = match args.to_config() {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: {e}");
                    return EXIT_USAGE;
                }
            };
            let opts = RunOptions {
                resume: args.resume,
                halt_after_checkpoint: None,
            };
            match run_experiment(&cfg, opts) {
                Ok(outcomes) => {
                    let mut failed = false;
                    for o in &outcomes {
                        match o {
                            SeedOutcome::Finished { seed, final_mean } => {
                                println!("seed {seed}: final mean test return {final_mean:.3}")
                            }
                            SeedOutcome::Halted { seed, at_step } => println!("seed {seed}: halted at step {at_step}"),
                            SeedOutcome::Failed { seed, error } => {
                                failed = true;
                                eprintln!("seed {seed}: failed: {error}");
                            }
                        }
                    }
                    if failed {
                        EXIT_FAILURE
                    } else {
                        0
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    if matches!(e, Error::Config { .. }) {
                        EXIT_USAGE
                    } else {
                        EXIT_FAILURE
                    }
                }
            }
        }
        Command::Export(args) => match export_plot_data(&args.dirs) {
            Ok(csv) => {
                let written = match &args.out {
                    Some(p) => std::fs::write(p, csv).map_err(Error::from),
                    None => {
                        print!("{csv}");
                        Ok(())
                    }
                };
                match written {
                    Ok(()) => 0,
                    Err(e) => {
                        eprintln!("error: {e}");
                        EXIT_FAILURE
                    }
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_FAILURE
            }
        },
    }
}
