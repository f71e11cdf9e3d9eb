//! Episodic deep Q-learning.
//!
//! One training iteration collects a single ε-greedy episode, stores it in
//! the replay buffer and, once the buffer holds a full batch, takes one
//! RMSprop step on a batch that always contains the newest episode. Targets
//! use double Q-learning: the online network picks the next joint action and
//! the target network evaluates it.

mod checkpoint;
mod loss;

use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_learner, save_learner, RngState, TRAINER_STATE_FILE};
pub use loss::{dqn_loss, executed_q, forward, td_targets, Batch, Forward, Targets};

use crate::env::{Env, EnvConfig, N_ACTIONS};
use crate::error::{Error, Result};
use crate::models::{HiddenStates, Model, ModelConfig};
use crate::numgrad::{RmsProp, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
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

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_anneal_steps: 50_000,
            batch_size: 32,
            buffer_size: 500,
            target_update_episodes: 200,
            eval_interval_steps: 2000,
            eval_episodes: 20,
            total_env_steps: 2_000_000,
            lr: 5e-4,
            rms_alpha: 0.99,
            rms_eps: 1e-5,
            clip_norm: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("gamma", "must lie in [0, 1]"));
        }
        if !(0.0 <= self.eps_end && self.eps_end <= self.eps_start && self.eps_start <= 1.0) {
            return Err(Error::config("eps_start", "need 0 ≤ eps_end ≤ eps_start ≤ 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.buffer_size < self.batch_size {
            return Err(Error::config("buffer_size", "must hold at least one batch"));
        }
        if self.target_update_episodes == 0 {
            return Err(Error::config("target_update_episodes", "must be at least 1"));
        }
        if self.eval_interval_steps == 0 {
            return Err(Error::config("eval_interval_steps", "must be at least 1"));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) || !(self.rms_eps > 0.0) {
            return Err(Error::config("lr", "lr, rms_eps and clip_norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.rms_alpha) {
            return Err(Error::config("rms_alpha", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Linear decay from `eps_start` to `eps_end` over `eps_anneal_steps`.
pub fn epsilon_at(t: u64, cfg: &TrainConfig) -> f64 {
    if cfg.eps_anneal_steps == 0 || t >= cfg.eps_anneal_steps {
        return cfg.eps_end;
    }
    let frac = t as f64 / cfg.eps_anneal_steps as f64;
    cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start)
}

/// Labelled, independent random stream for a run seed.
pub fn derive_rng(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    // FNV-1a
    let mut hsh: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        hsh ^= u64::from(b);
        hsh = hsh.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(hsh ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng
}

/// A complete episode of `len` transitions. Observations, availability
/// masks and states are stored for all `len + 1` visited timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub len: usize,
    /// `[(len+1) × n × obs_dim]`
    pub obs: Vec<f32>,
    /// `[(len+1) × n × A]`
    pub avail: Vec<bool>,
    /// `[(len+1) × state_dim]`, empty when states are not recorded.
    pub states: Vec<f32>,
    /// `[len × n]`
    pub actions: Vec<u8>,
    pub rewards: Vec<f64>,
    /// The last transition ended the episode for real (no bootstrap).
    pub terminal: bool,
    /// The last transition hit the step limit (bootstrap from the final observation).
    pub truncated: bool,
}

impl Episode {
    pub fn new(n_agents: usize, obs_dim: usize, state_dim: usize) -> Self {
        Self {
            n_agents,
            obs_dim,
            state_dim,
            len: 0,
            obs: Vec::new(),
            avail: Vec::new(),
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            terminal: false,
            truncated: false,
        }
    }

    pub fn push_observation(&mut self, obs: &[Vec<f64>], avail: &[Vec<bool>], state: Option<&[f64]>) {
        for o in obs {
            self.obs.extend(o.iter().map(|&v| v as f32));
        }
        for m in avail {
            self.avail.extend_from_slice(m);
        }
        if let Some(s) = state {
            self.states.extend(s.iter().map(|&v| v as f32));
        }
    }

    pub fn push_transition(&mut self, actions: &[usize], reward: f64) {
        self.actions.extend(actions.iter().map(|&a| a as u8));
        self.rewards.push(reward);
        self.len += 1;
    }

    pub fn obs_at(&self, t: usize, agent: usize) -> &[f32] {
        let d = self.obs_dim;
        let k = (t * self.n_agents + agent) * d;
        &self.obs[k..k + d]
    }

    pub fn avail_at(&self, t: usize, agent: usize) -> &[bool] {
        let k = (t * self.n_agents + agent) * N_ACTIONS;
        &self.avail[k..k + N_ACTIONS]
    }

    pub fn state_at(&self, t: usize) -> &[f32] {
        let d = self.state_dim;
        &self.states[t * d..(t + 1) * d]
    }

    pub fn action(&self, t: usize, agent: usize) -> usize {
        self.actions[t * self.n_agents + agent] as usize
    }

    pub fn has_states(&self) -> bool {
        !self.states.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Structural consistency of the flat buffers.
    pub fn validate(&self) -> Result<()> {
        let steps = self.len + 1;
        let ok = self.len >= 1
            && self.obs.len() == steps * self.n_agents * self.obs_dim
            && self.avail.len() == steps * self.n_agents * N_ACTIONS
            && (self.states.is_empty() || self.states.len() == steps * self.state_dim)
            && self.actions.len() == self.len * self.n_agents
            && self.rewards.len() == self.len
            && !(self.terminal && self.truncated);
        if ok {
            Ok(())
        } else {
            Err(Error::Contract("malformed episode".into()))
        }
    }
}

/// FIFO buffer of complete episodes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            episodes: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Appends an episode, evicting the oldest one when full.
    pub fn push(&mut self, ep: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(ep);
    }

    pub fn get(&self, i: usize) -> Option<&Episode> {
        self.episodes.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    /// Indices of a batch: the newest episode first, then `size − 1`
    /// distinct episodes drawn uniformly from the rest.
    pub fn sample_indices(&self, size: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        let n = self.episodes.len();
        if size == 0 || n < size {
            return Err(Error::Argument(format!("cannot draw {size} episodes from {n}")));
        }
        let mut out = vec![n - 1];
        out.extend(sample(rng, n - 1, size - 1).into_iter());
        Ok(out)
    }
}

/// Runs one episode with ε-greedy actions. `env_rng` drives the
/// environment, `act_rng` the exploration.
pub fn collect_episode(
    model: &Model,
    env: &mut Env,
    epsilon: f64,
    env_rng: &mut impl Rng,
    act_rng: &mut impl Rng,
) -> Result<Episode> {
    let cfg = model.config();
    let keep_state = model.config().algo == crate::models::Algo::DcgS;
    let ecfg = env.config().clone();
    let mut ep = Episode::new(cfg.n_agents, ecfg.obs_dim(), if keep_state { ecfg.state_dim() } else { 0 });
    let mut res = env.reset(env_rng);
    let mut hidden = HiddenStates::zeros(cfg.n_agents, cfg.hidden);
    let mut prev: Option<Vec<usize>> = None;
    loop {
        let state = keep_state.then(|| env.state_vector());
        ep.push_observation(&res.obs, &res.avail, state.as_deref());
        let mut tape = Tape::new();
        let (h, heads) = model.step_single(&mut tape, &hidden, &res.obs, prev.as_deref(), state.as_deref())?;
        let actions = model.select_actions(&tape, &heads, &res.avail, epsilon, act_rng)?.0;
        hidden = h;
        res = env.step(&actions, env_rng)?;
        ep.push_transition(&actions, res.reward);
        if res.terminal || res.truncated {
            let state = keep_state.then(|| env.state_vector());
            ep.push_observation(&res.obs, &res.avail, state.as_deref());
            ep.terminal = res.terminal;
            ep.truncated = res.truncated;
            return Ok(ep);
        }
        prev = Some(actions);
    }
}

/// Mean and population standard deviation of greedy returns over fresh
/// environments.
pub fn evaluate(model: &Model, env_cfg: &EnvConfig, n_episodes: usize, rng: &mut impl Rng) -> Result<(f64, f64)> {
    if n_episodes == 0 {
        return Err(Error::Argument("evaluation needs at least one episode".into()));
    }
    let mut returns = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let (mut env, _) = Env::new(env_cfg.clone(), rng)?;
        let mut eval_rng = ChaCha8Rng::from_rng(&mut *rng).map_err(|e| Error::Numeric(e.to_string()))?;
        let ep = collect_episode(model, &mut env, 0.0, rng, &mut eval_rng)?;
        returns.push(ep.total_return());
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// One row of evaluation metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub episode: u64,
    pub mean_test_return: f64,
    pub std_test_return: f64,
    pub loss: Option<f64>,
    pub epsilon: f64,
    pub wall_ms: u64,
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct Learner {
    pub cfg: TrainConfig,
    pub env_cfg: EnvConfig,
    pub seed: u64,
    pub model: Model,
    pub target: Model,
    pub optim: RmsProp,
    pub buffer: ReplayBuffer,
    pub env: Env,
    pub env_rng: ChaCha8Rng,
    pub explore_rng: ChaCha8Rng,
    pub env_steps: u64,
    pub episodes: u64,
    pub updates: u64,
    pub target_updates: u64,
    pub last_loss: Option<f64>,
}

/// Outcome of [`Learner::train_iteration`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationInfo {
    pub episode_len: usize,
    pub episode_return: f64,
    pub loss: Option<f64>,
    pub target_updated: bool,
}

impl Learner {
    pub fn new(model_cfg: ModelConfig, env_cfg: EnvConfig, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        env_cfg.validate()?;
        if model_cfg.n_agents != env_cfg.n_agents
            || model_cfg.obs_dim != env_cfg.obs_dim()
            || model_cfg.n_actions != N_ACTIONS
        {
            return Err(Error::Contract("model does not fit the environment".into()));
        }
        let mut init_rng = derive_rng(seed, "init", 0);
        let mut env_rng = derive_rng(seed, "env", 0);
        let explore_rng = derive_rng(seed, "explore", 0);
        let model = Model::new(model_cfg, &mut init_rng)?;
        let target = model.clone();
        let optim = RmsProp::new(model.params(), cfg.lr, cfg.rms_alpha, cfg.rms_eps);
        let (env, _) = Env::new(env_cfg.clone(), &mut env_rng)?;
        Ok(Self {
            buffer: ReplayBuffer::new(cfg.buffer_size),
            cfg,
            env_cfg,
            seed,
            model,
            target,
            optim,
            env,
            env_rng,
            explore_rng,
            env_steps: 0,
            episodes: 0,
            updates: 0,
            target_updates: 0,
            last_loss: None,
        })
    }

    pub fn epsilon(&self) -> f64 {
        epsilon_at(self.env_steps, &self.cfg)
    }

    /// Collects one episode and, when the buffer holds a batch, takes one
    /// gradient step.
    pub fn train_iteration(&mut self) -> Result<IterationInfo> {
        let eps = self.epsilon();
        let ep = collect_episode(&self.model, &mut self.env, eps, &mut self.env_rng, &mut self.explore_rng)?;
        let info_len = ep.len;
        let info_ret = ep.total_return();
        self.env_steps += ep.len as u64;
        self.episodes += 1;
        self.buffer.push(ep);

        let mut loss = None;
        if self.buffer.len() >= self.cfg.batch_size {
            let idx = self.buffer.sample_indices(self.cfg.batch_size, &mut self.explore_rng)?;
            let batch = Batch::new(idx.iter().map(|&i| self.buffer.get(i).expect("sampled index")).collect())?;
            let l = update_step(
                &mut self.model,
                &self.target,
                &mut self.optim,
                &batch,
                &self.cfg,
                &mut self.explore_rng,
            )?;
            self.updates += 1;
            self.last_loss = Some(l);
            loss = Some(l);
        }
        let target_updated = self.update_target()?;
        Ok(IterationInfo {
            episode_len: info_len,
            episode_return: info_ret,
            loss,
            target_updated,
        })
    }

    /// Copies the online parameters into the target network whenever the
    /// episode counter sits on a multiple of the update interval.
    pub fn update_target(&mut self) -> Result<bool> {
        let due = self.episodes / self.cfg.target_update_episodes;
        if due > self.target_updates {
            self.target.params_mut().copy_values_from(self.model.params())?;
            self.target_updates = due;
            return Ok(true);
        }
        Ok(false)
    }

    /// Greedy evaluation with the stream reserved for evaluation number `index`.
    pub fn evaluate(&self, index: u64) -> Result<(f64, f64)> {
        let mut rng = derive_rng(self.seed, "eval", index);
        evaluate(&self.model, &self.env_cfg, self.cfg.eval_episodes, &mut rng)
    }
}

/// Targets, loss, backward pass, clipping and one optimiser step. Returns the
/// loss before the update.
pub fn update_step(
    model: &mut Model,
    target: &Model,
    optim: &mut RmsProp,
    batch: &Batch<'_>,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let fwd = forward(model, &mut tape, batch)?;
    let targets = td_targets(model, &tape, &fwd, target, batch, cfg.gamma, rng)?;
    let q = executed_q(model, &mut tape, &fwd, batch)?;
    let loss = dqn_loss(&mut tape, q, &targets)?;
    let value = tape.value(loss).data()[0];
    let params = model.params_mut();
    params.zero_grad();
    tape.backward(loss, params)?;
    params.clip_grad_norm(cfg.clip_norm);
    optim.step(params)?;
    Ok(value)
}
