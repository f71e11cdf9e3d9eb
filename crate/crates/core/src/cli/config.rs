//! Flat experiment configuration.
//!
//! Values are layered: defaults, then a JSON file, then command-line
//! overrides. Every layer is a flat JSON object whose keys must be fields of
//! [`ExperimentConfig`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::env::{EnvConfig, Task, N_ACTIONS};
use crate::error::{Error, Result};
use crate::graph::{build_topology, Topology};
use crate::models::{Algo, ModelConfig, HIDDEN};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    /// Env steps between checkpoints; 0 saves only the final one.
    pub checkpoint_every: u64,
    /// Record elapsed milliseconds in metrics; off keeps metrics reproducible.
    pub wall_time: bool,

    pub algo: Algo,
    pub topology: Topology,
    pub rank: usize,
    pub k_passes: usize,
    pub msg_norm: bool,
    /// Separate parameters per agent and per edge.
    pub nps: bool,
    pub hidden: usize,

    pub env: Task,
    pub p: f64,
    pub grid_w: usize,
    pub grid_h: usize,
    pub n_agents: usize,
    pub n_prey: usize,
    pub episode_limit: usize,
    pub obs_window: usize,
    /// `null` picks the task's default.
    pub catch_reward: Option<f64>,

    pub gamma: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_anneal_steps: u64,
    pub batch_size: usize,
    pub buffer_size: usize,
    pub target_update_episodes: u64,
    pub eval_interval_steps: u64,
    pub eval_episodes: usize,
    pub total_env_steps: u64,
    pub lr: f64,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    pub clip_norm: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let e = EnvConfig::new(Task::Coop);
        let t = TrainConfig::default();
        Self {
            name: "run".into(),
            out: PathBuf::from("out"),
            seeds: vec![0],
            checkpoint_every: 0,
            wall_time: false,
            algo: Algo::Dcg,
            topology: Topology::Full,
            rank: 0,
            k_passes: 8,
            msg_norm: true,
            nps: false,
            hidden: HIDDEN,
            env: e.task,
            p: e.punishment,
            grid_w: e.grid_w,
            grid_h: e.grid_h,
            n_agents: e.n_agents,
            n_prey: e.n_prey,
            episode_limit: e.episode_limit,
            obs_window: e.obs_window,
            catch_reward: None,
            gamma: t.gamma,
            eps_start: t.eps_start,
            eps_end: t.eps_end,
            eps_anneal_steps: t.eps_anneal_steps,
            batch_size: t.batch_size,
            buffer_size: t.buffer_size,
            target_update_episodes: t.target_update_episodes,
            eval_interval_steps: t.eval_interval_steps,
            eval_episodes: t.eval_episodes,
            total_env_steps: t.total_env_steps,
            lr: t.lr,
            rms_alpha: t.rms_alpha,
            rms_eps: t.rms_eps,
            clip_norm: t.clip_norm,
        }
    }
}

impl ExperimentConfig {
    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            task: self.env,
            grid_w: self.grid_w,
            grid_h: self.grid_h,
            n_agents: self.n_agents,
            n_prey: self.n_prey,
            punishment: self.p,
            episode_limit: self.episode_limit,
            obs_window: self.obs_window,
            catch_reward: self.catch_reward.unwrap_or_else(|| self.env.default_catch_reward()),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let e = self.env_config();
        ModelConfig {
            algo: self.algo,
            n_agents: self.n_agents,
            n_actions: N_ACTIONS,
            obs_dim: e.obs_dim(),
            state_dim: e.state_dim(),
            hidden: self.hidden,
            rank: self.rank,
            topology: self.topology,
            shared: !self.nps,
            k_passes: self.k_passes,
            msg_norm: self.msg_norm,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            gamma: self.gamma,
            eps_start: self.eps_start,
            eps_end: self.eps_end,
            eps_anneal_steps: self.eps_anneal_steps,
            batch_size: self.batch_size,
            buffer_size: self.buffer_size,
            target_update_episodes: self.target_update_episodes,
            eval_interval_steps: self.eval_interval_steps,
            eval_episodes: self.eval_episodes,
            total_env_steps: self.total_env_steps,
            lr: self.lr,
            rms_alpha: self.rms_alpha,
            rms_eps: self.rms_eps,
            clip_norm: self.clip_norm,
        }
    }

    /// Checks every invariant the run will rely on.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config("name", "must be a non-empty plain directory name"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(Error::config("seeds", "seeds must be distinct"));
        }
        if self.hidden == 0 {
            return Err(Error::config("hidden", "must be at least 1"));
        }
        self.env_config().validate()?;
        self.train_config().validate()?;
        build_topology(self.topology, self.n_agents).map_err(|e| Error::config("topology", e.to_string()))?;
        if self.algo == Algo::Lrq && self.rank == 0 {
            return Err(Error::config("rank", "lrq needs at least one factor"));
        }
        if self.algo.uses_graph() && self.k_passes == 0 {
            return Err(Error::config("k_passes", "must be at least 1"));
        }
        Ok(())
    }

    /// The config with every default spelled out, as echoed to disk.
    pub fn materialized(&self) -> Self {
        let mut c = self.clone();
        c.catch_reward = Some(self.env_config().catch_reward);
        c
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn defaults_map() -> Map<String, Value> {
    match serde_json::to_value(ExperimentConfig::default()).expect("defaults serialize") {
        Value::Object(m) => m,
        _ => unreachable!("config serializes to an object"),
    }
}

/// Reads a flat JSON object from `path`.
pub fn read_config_file(path: &Path) -> Result<Map<String, Value>> {
    let text = fs::read_to_string(path)?;
    match serde_json::from_str(&text)? {
        Value::Object(m) => Ok(m),
        _ => Err(Error::config("config", "file must hold a flat JSON object")),
    }
}

/// Parses a command-line value: JSON if it parses, a bare string otherwise.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Layers `file` and then `overrides` over the defaults and validates the
/// result. Errors name the offending key.
pub fn parse_config(file: Option<&Map<String, Value>>, overrides: &Map<String, Value>) -> Result<ExperimentConfig> {
    let defaults = defaults_map();
    let mut merged = defaults.clone();
    for layer in file.into_iter().chain(std::iter::once(overrides)) {
        for (k, v) in layer {
            if !defaults.contains_key(k) {
                return Err(Error::config(k.clone(), "unknown key"));
            }
            // Type-check this key alone so a mismatch names it.
            let mut probe = defaults.clone();
            probe.insert(k.clone(), v.clone());
            if let Err(e) = serde_json::from_value::<ExperimentConfig>(Value::Object(probe)) {
                return Err(Error::config(k.clone(), e.to_string()));
            }
            merged.insert(k.clone(), v.clone());
        }
    }
    let cfg: ExperimentConfig = serde_json::from_value(Value::Object(merged))?;
    cfg.validate()?;
    Ok(cfg.materialized())
}

/// Parses `key=value` into a single override.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::config(s, "expected key=value"))?;
    Ok((k.trim().to_string(), parse_value(v.trim())))
}
