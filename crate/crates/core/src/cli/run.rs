//! Seeded training runs with metrics and checkpoints.
//!
//! Output layout for a config named `name`:
//!
//! ```text
//! <out>/<name>/config.json
//! <out>/<name>/seed<k>/metrics.csv
//! <out>/<name>/seed<k>/checkpoint/
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::trainer::{epsilon_at, load_learner, save_learner, Learner, MetricsRow};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_HEADER: &str = "step,episode,mean_test_return,std_test_return,loss,epsilon,wall_ms";
const RUN_STATE_FILE: &str = "run_state.json";

pub fn experiment_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out.join(&cfg.name)
}

pub fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    experiment_dir(cfg).join(format!("seed{seed}"))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Continue from an existing checkpoint instead of starting over.
    pub resume: bool,
    /// Stop right after the first checkpoint written at or past this many
    /// env steps, as if the process had been killed.
    pub halt_after_checkpoint: Option<u64>,
}

/// How one seed's run ended.
#[derive(Debug)]
pub enum SeedOutcome {
    Finished { seed: u64, final_mean: f64 },
    Halted { seed: u64, at_step: u64 },
    Failed { seed: u64, error: Error },
}

impl SeedOutcome {
    pub fn is_failure(&self) -> bool {
        matches!(self, SeedOutcome::Failed { .. })
    }
}

/// Loop bookkeeping saved with each checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RunState {
    next_eval: u64,
    eval_index: u64,
    next_checkpoint: u64,
    elapsed_ms: u64,
    metrics: Vec<MetricsRow>,
}

pub fn format_metrics(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let loss = r.loss.map(|l| format!("{l:?}")).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{:?},{:?},{},{:?},{}\n",
            r.step, r.episode, r.mean_test_return, r.std_test_return, loss, r.epsilon, r.wall_ms
        ));
    }
    s
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Argument("metrics file has an unexpected header".into()));
    }
    let bad = |line: &str| Error::Argument(format!("malformed metrics row `{line}`"));
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(line));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
        let int = |s: &str| s.parse::<u64>().map_err(|_| bad(line));
        out.push(MetricsRow {
            step: int(f[0])?,
            episode: int(f[1])?,
            mean_test_return: num(f[2])?,
            std_test_return: num(f[3])?,
            loss: if f[4].is_empty() { None } else { Some(num(f[4])?) },
            epsilon: num(f[5])?,
            wall_ms: int(f[6])?,
        });
    }
    Ok(out)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    parse_metrics(&fs::read_to_string(path)?)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Runs every seed of `cfg`. Seeds fail independently; the config is echoed
/// to the experiment directory first.
pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Vec<SeedOutcome>> {
    cfg.validate()?;
    let dir = experiment_dir(cfg);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.materialized().to_json()?)?;
    let mut out = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let outcome = match run_seed(cfg, seed, opts) {
            Ok(o) => o,
            Err(error) => {
                log::error!("seed {seed} failed: {error}");
                SeedOutcome::Failed { seed, error }
            }
        };
        out.push(outcome);
    }
    Ok(out)
}

/// Trains one seed to `total_env_steps`, evaluating every
/// `eval_interval_steps` (including step 0) and checkpointing on schedule
/// and at the end.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, opts: RunOptions) -> Result<SeedOutcome> {
    let dir = seed_dir(cfg, seed);
    let ckpt = dir.join(CHECKPOINT_DIR);
    let tc = cfg.train_config();
    let (mut learner, mut state) = if opts.resume && ckpt.join(RUN_STATE_FILE).exists() {
        let l = load_learner(&ckpt, cfg.model_config(), cfg.env_config())?;
        if l.cfg != tc || l.seed != seed {
            return Err(Error::Checkpoint("checkpoint was written with a different configuration".into()));
        }
        let s: RunState = serde_json::from_slice(&fs::read(ckpt.join(RUN_STATE_FILE))?)?;
        log::info!("seed {seed}: resuming at step {}", l.env_steps);
        (l, s)
    } else {
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        let l = Learner::new(cfg.model_config(), cfg.env_config(), tc.clone(), seed)?;
        let s = RunState {
            next_eval: 0,
            eval_index: 0,
            next_checkpoint: cfg.checkpoint_every,
            elapsed_ms: 0,
            metrics: Vec::new(),
        };
        (l, s)
    };
    fs::create_dir_all(&dir)?;
    let metrics_path = dir.join(METRICS_FILE);
    write_atomic(&metrics_path, format_metrics(&state.metrics).as_bytes())?;

    let started = Instant::now();
    let base_ms = state.elapsed_ms;
    let elapsed = |s: &Instant| base_ms + s.elapsed().as_millis() as u64;
    loop {
        let step = learner.env_steps;
        if step >= state.next_eval {
            let (mean, std) = learner.evaluate(state.eval_index)?;
            state.eval_index += 1;
            while state.next_eval <= step {
                state.next_eval += tc.eval_interval_steps;
            }
            state.metrics.push(MetricsRow {
                step,
                episode: learner.episodes,
                mean_test_return: mean,
                std_test_return: std,
                loss: learner.last_loss,
                epsilon: epsilon_at(step, &tc),
                wall_ms: if cfg.wall_time { elapsed(&started) } else { 0 },
            });
            write_atomic(&metrics_path, format_metrics(&state.metrics).as_bytes())?;
            log::info!("seed {seed} step {step}: test return {mean:.3} ± {std:.3}");
        }
        if step >= tc.total_env_steps {
            break;
        }
        if cfg.checkpoint_every > 0 && step >= state.next_checkpoint {
            while state.next_checkpoint <= step {
                state.next_checkpoint += cfg.checkpoint_every;
            }
            state.elapsed_ms = elapsed(&started);
            save_checkpoint(&learner, &state, &ckpt)?;
            if opts.halt_after_checkpoint.is_some_and(|h| step >= h) {
                return Ok(SeedOutcome::Halted { seed, at_step: step });
            }
        }
        learner.train_iteration()?;
    }
    state.elapsed_ms = elapsed(&started);
    save_checkpoint(&learner, &state, &ckpt)?;
    let final_mean = state.metrics.last().map(|r| r.mean_test_return).unwrap_or(f64::NAN);
    Ok(SeedOutcome::Finished { seed, final_mean })
}

fn save_checkpoint(learner: &Learner, state: &RunState, dir: &Path) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(state)?;
    save_learner(learner, dir, &[(RUN_STATE_FILE, &bytes)])
}
