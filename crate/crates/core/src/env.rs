//! Predator–prey grid worlds.
//!
//! Agents and prey live on a bounded `w × h` grid with at most one entity per
//! cell. `x` grows east, `y` grows south. Two tasks share the dynamics:
//!
//! * `pp-coop`: a prey is captured when two adjacent agents execute *catch*
//!   in the same step; a catch attempt that captures nothing is punished.
//! * `pp-ghost`: a single catcher suffices, but a per-step coin decides
//!   whether the capture is rewarded or punished. The coin is only visible
//!   on the 3×3 cells of one randomly chosen corner.

use std::fmt;
use std::str::FromStr;

use rand::seq::{index::sample, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NORTH: usize = 0;
pub const SOUTH: usize = 1;
pub const EAST: usize = 2;
pub const WEST: usize = 3;
pub const STAY: usize = 4;
pub const CATCH: usize = 5;
pub const N_ACTIONS: usize = 6;

const MOVES: [(isize, isize); 4] = [(0, -1), (0, 1), (1, 0), (-1, 0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "pp-coop")]
    Coop,
    #[serde(rename = "pp-ghost")]
    Ghost,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Coop => "pp-coop",
            Task::Ghost => "pp-ghost",
        }
    }

    pub fn default_catch_reward(self) -> f64 {
        match self {
            Task::Coop => 10.0,
            Task::Ghost => 1.0,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Task::Coop, Task::Ghost]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config("env", format!("unknown environment `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub task: Task,
    pub grid_w: usize,
    pub grid_h: usize,
    pub n_agents: usize,
    pub n_prey: usize,
    /// Reward added per unsuccessful catcher (`pp-coop` only), `≤ 0`.
    pub punishment: f64,
    pub episode_limit: usize,
    pub obs_window: usize,
    /// Reward per capture; scaled by the coin in `pp-ghost`.
    pub catch_reward: f64,
}

impl EnvConfig {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            grid_w: 10,
            grid_h: 10,
            n_agents: 8,
            n_prey: 8,
            punishment: 0.0,
            episode_limit: 200,
            obs_window: 5,
            catch_reward: task.default_catch_reward(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_w == 0 || self.grid_h == 0 {
            return Err(Error::config("grid_w", "grid must be non-empty"));
        }
        if self.n_agents == 0 {
            return Err(Error::config("n_agents", "need at least one agent"));
        }
        if self.n_prey == 0 {
            return Err(Error::config("n_prey", "need at least one prey"));
        }
        if self.n_agents + self.n_prey > self.grid_w * self.grid_h {
            return Err(Error::config("n_prey", "more entities than grid cells"));
        }
        if self.obs_window % 2 == 0 {
            return Err(Error::config("obs_window", "must be odd"));
        }
        if self.episode_limit == 0 {
            return Err(Error::config("episode_limit", "must be at least 1"));
        }
        if !(self.punishment <= 0.0) {
            return Err(Error::config("p", "punishment must be ≤ 0"));
        }
        if !self.catch_reward.is_finite() {
            return Err(Error::config("catch_reward", "must be finite"));
        }
        if self.task == Task::Ghost && (self.grid_w < 3 || self.grid_h < 3) {
            return Err(Error::config("grid_w", "the indicator needs a grid of at least 3×3"));
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        let w = self.obs_window;
        2 * w * w + usize::from(self.task == Task::Ghost)
    }

    pub fn state_dim(&self) -> usize {
        2 * self.grid_w * self.grid_h + if self.task == Task::Ghost { 5 } else { 0 }
    }

    /// Largest undiscounted return of an episode.
    pub fn max_return(&self) -> f64 {
        self.catch_reward * self.n_prey.min(self.n_agents / self.catchers_per_prey()) as f64
    }

    fn catchers_per_prey(&self) -> usize {
        match self.task {
            Task::Coop => 2,
            Task::Ghost => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Entity {
    pub x: usize,
    pub y: usize,
    pub alive: bool,
}

impl Entity {
    pub fn at(x: usize, y: usize) -> Self {
        Entity { x, y, alive: true }
    }
}

/// Corner holding the coin indicator: 0 top-left, 1 top-right,
/// 2 bottom-left, 3 bottom-right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Corner(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub agents: Vec<Entity>,
    pub prey: Vec<Entity>,
    pub t: usize,
    pub corner: Option<Corner>,
    /// `+1` or `−1`; meaningful in `pp-ghost` only.
    pub coin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub obs: Vec<Vec<f64>>,
    pub avail: Vec<Vec<bool>>,
    pub reward: f64,
    pub terminal: bool,
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cell {
    Empty,
    Agent,
    Prey,
}

#[derive(Debug, Clone)]
pub struct Env {
    cfg: EnvConfig,
    state: EnvState,
    cells: Vec<Cell>,
    done: bool,
}

impl Env {
    pub fn new(cfg: EnvConfig, rng: &mut impl Rng) -> Result<(Self, StepResult)> {
        cfg.validate()?;
        let empty = EnvState {
            agents: Vec::new(),
            prey: Vec::new(),
            t: 0,
            corner: None,
            coin: 1.0,
        };
        let mut env = Env {
            cells: vec![Cell::Empty; cfg.grid_w * cfg.grid_h],
            cfg,
            state: empty,
            done: false,
        };
        let first = env.reset(rng);
        Ok((env, first))
    }

    /// Wraps a hand-made state, checking its invariants.
    pub fn from_state(cfg: EnvConfig, state: EnvState) -> Result<Self> {
        cfg.validate()?;
        if state.agents.len() != cfg.n_agents || state.prey.len() != cfg.n_prey {
            return Err(Error::Argument("entity counts do not match the config".into()));
        }
        if state.t > cfg.episode_limit {
            return Err(Error::Argument("timestep beyond the episode limit".into()));
        }
        if cfg.task == Task::Ghost && state.corner.map_or(true, |c| c.0 > 3) {
            return Err(Error::Argument("ghost task needs an indicator corner".into()));
        }
        let mut env = Env {
            cells: vec![Cell::Empty; cfg.grid_w * cfg.grid_h],
            cfg,
            state,
            done: false,
        };
        let placed: Vec<(Entity, Cell)> = env
            .state
            .agents
            .iter()
            .map(|&e| (e, Cell::Agent))
            .chain(env.state.prey.iter().map(|&e| (e, Cell::Prey)))
            .collect();
        for (e, kind) in placed {
            if e.x >= env.cfg.grid_w || e.y >= env.cfg.grid_h {
                return Err(Error::Argument(format!("entity at ({}, {}) outside the grid", e.x, e.y)));
            }
            if e.alive {
                let idx = env.idx(e.x, e.y);
                if env.cells[idx] != Cell::Empty {
                    return Err(Error::Argument(format!("cell ({}, {}) occupied twice", e.x, e.y)));
                }
                env.cells[idx] = kind;
            }
        }
        env.done = env.is_terminal() || env.state.t >= env.cfg.episode_limit;
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    fn idx(&self, x: usize, y: usize) -> usize {
        y * self.cfg.grid_w + x
    }

    fn shifted(&self, x: usize, y: usize, dir: usize) -> Option<(usize, usize)> {
        let (dx, dy) = MOVES[dir];
        let nx = x.checked_add_signed(dx)?;
        let ny = y.checked_add_signed(dy)?;
        (nx < self.cfg.grid_w && ny < self.cfg.grid_h).then_some((nx, ny))
    }

    fn free(&self, x: usize, y: usize) -> bool {
        self.cells[self.idx(x, y)] == Cell::Empty
    }

    /// Places all entities uniformly on distinct cells and starts a new episode.
    pub fn reset(&mut self, rng: &mut impl Rng) -> StepResult {
        let (w, h) = (self.cfg.grid_w, self.cfg.grid_h);
        let (n, m) = (self.cfg.n_agents, self.cfg.n_prey);
        let cells = sample(rng, w * h, n + m).into_vec();
        let at = |c: usize| Entity::at(c % w, c / w);
        self.state.agents = cells[..n].iter().map(|&c| at(c)).collect();
        self.state.prey = cells[n..].iter().map(|&c| at(c)).collect();
        self.state.t = 0;
        if self.cfg.task == Task::Ghost {
            self.state.corner = Some(Corner(rng.gen_range(0..4)));
            self.state.coin = flip(rng);
        } else {
            self.state.corner = None;
            self.state.coin = 1.0;
        }
        self.cells.fill(Cell::Empty);
        for e in self.state.agents.clone() {
            let i = self.idx(e.x, e.y);
            self.cells[i] = Cell::Agent;
        }
        for e in self.state.prey.clone() {
            let i = self.idx(e.x, e.y);
            self.cells[i] = Cell::Prey;
        }
        self.done = false;
        StepResult {
            obs: self.observe_all(),
            avail: self.avail_all(),
            reward: 0.0,
            terminal: false,
            truncated: false,
        }
    }

    fn adjacent_prey(&self, x: usize, y: usize) -> bool {
        (0..4).any(|d| {
            self.shifted(x, y, d)
                .is_some_and(|(nx, ny)| self.cells[self.idx(nx, ny)] == Cell::Prey)
        })
    }

    /// Mask over the six actions of agent `i`. Dead agents may only stay.
    pub fn available_actions(&self, i: usize) -> Vec<bool> {
        let mut mask = vec![false; N_ACTIONS];
        mask[STAY] = true;
        let a = self.state.agents[i];
        if !a.alive {
            return mask;
        }
        for (d, slot) in mask.iter_mut().enumerate().take(4) {
            *slot = self.shifted(a.x, a.y, d).is_some_and(|(x, y)| self.free(x, y));
        }
        mask[CATCH] = self.adjacent_prey(a.x, a.y);
        mask
    }

    pub fn avail_all(&self) -> Vec<Vec<bool>> {
        (0..self.cfg.n_agents).map(|i| self.available_actions(i)).collect()
    }

    /// Window of `obs_window²` cells around agent `i`, agents channel first,
    /// rows by `dy` then `dx`. The ghost task appends the visible coin.
    pub fn observe(&self, i: usize) -> Vec<f64> {
        let win = self.cfg.obs_window;
        let r = (win / 2) as isize;
        let mut out = vec![0.0; self.cfg.obs_dim()];
        let me = self.state.agents[i];
        if !me.alive {
            return out;
        }
        for dy in -r..=r {
            for dx in -r..=r {
                let (Some(x), Some(y)) = (me.x.checked_add_signed(dx), me.y.checked_add_signed(dy)) else {
                    continue;
                };
                if x >= self.cfg.grid_w || y >= self.cfg.grid_h {
                    continue;
                }
                let k = ((dy + r) as usize) * win + (dx + r) as usize;
                match self.cells[self.idx(x, y)] {
                    Cell::Agent => out[k] = 1.0,
                    Cell::Prey => out[win * win + k] = 1.0,
                    Cell::Empty => {}
                }
            }
        }
        if self.cfg.task == Task::Ghost && self.in_indicator(me.x, me.y) {
            out[2 * win * win] = self.state.coin;
        }
        out
    }

    pub fn observe_all(&self) -> Vec<Vec<f64>> {
        (0..self.cfg.n_agents).map(|i| self.observe(i)).collect()
    }

    /// Whether `(x, y)` lies in the 3×3 block at the indicator corner.
    pub fn in_indicator(&self, x: usize, y: usize) -> bool {
        let Some(Corner(c)) = self.state.corner else { return false };
        let (w, h) = (self.cfg.grid_w, self.cfg.grid_h);
        let in_x = if c % 2 == 0 { x < 3 } else { x + 3 >= w };
        let in_y = if c < 2 { y < 3 } else { y + 3 >= h };
        in_x && in_y
    }

    /// Flattened global state: agent and prey occupancy grids, plus coin and
    /// one-hot indicator corner in the ghost task.
    pub fn state_vector(&self) -> Vec<f64> {
        let cells = self.cfg.grid_w * self.cfg.grid_h;
        let mut out = vec![0.0; self.cfg.state_dim()];
        for (k, c) in self.cells.iter().enumerate() {
            match c {
                Cell::Agent => out[k] = 1.0,
                Cell::Prey => out[cells + k] = 1.0,
                Cell::Empty => {}
            }
        }
        if self.cfg.task == Task::Ghost {
            out[2 * cells] = self.state.coin;
            if let Some(Corner(c)) = self.state.corner {
                out[2 * cells + 1 + c] = 1.0;
            }
        }
        out
    }

    fn is_terminal(&self) -> bool {
        !self.state.agents.iter().any(|a| a.alive) || !self.state.prey.iter().any(|p| p.alive)
    }

    fn remove_agent(&mut self, i: usize) {
        let a = self.state.agents[i];
        let k = self.idx(a.x, a.y);
        self.cells[k] = Cell::Empty;
        self.state.agents[i].alive = false;
    }

    fn remove_prey(&mut self, j: usize) {
        let p = self.state.prey[j];
        let k = self.idx(p.x, p.y);
        self.cells[k] = Cell::Empty;
        self.state.prey[j].alive = false;
    }

    /// Advances one step. Every action must be available.
    pub fn step(&mut self, actions: &[usize], rng: &mut impl Rng) -> Result<StepResult> {
        let n = self.cfg.n_agents;
        if self.done {
            return Err(Error::Contract("step called on a finished episode".into()));
        }
        if actions.len() != n {
            return Err(Error::Contract(format!("{} actions for {n} agents", actions.len())));
        }
        for (i, &a) in actions.iter().enumerate() {
            if a >= N_ACTIONS || !self.available_actions(i)[a] {
                return Err(Error::Contract(format!("action {a} unavailable for agent {i}")));
            }
        }

        // catches
        let mut reward = 0.0;
        let mut used = vec![false; n];
        let catcher: Vec<bool> = (0..n)
            .map(|i| self.state.agents[i].alive && actions[i] == CATCH)
            .collect();
        let need = self.cfg.catchers_per_prey();
        for j in 0..self.cfg.n_prey {
            let p = self.state.prey[j];
            if !p.alive {
                continue;
            }
            let adjacent: Vec<usize> = (0..n)
                .filter(|&i| {
                    let a = self.state.agents[i];
                    catcher[i] && !used[i] && a.x.abs_diff(p.x) + a.y.abs_diff(p.y) == 1
                })
                .collect();
            if adjacent.len() >= need {
                reward += match self.cfg.task {
                    Task::Coop => self.cfg.catch_reward,
                    Task::Ghost => self.state.coin * self.cfg.catch_reward,
                };
                self.remove_prey(j);
                for &i in &adjacent[..need] {
                    used[i] = true;
                    self.remove_agent(i);
                }
            }
        }
        if self.cfg.task == Task::Coop {
            let lone = (0..n).filter(|&i| catcher[i] && !used[i]).count();
            reward += self.cfg.punishment * lone as f64;
        }

        // agent moves
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        for i in order {
            let a = self.state.agents[i];
            if !a.alive || actions[i] >= 4 {
                continue;
            }
            if let Some((x, y)) = self.shifted(a.x, a.y, actions[i]) {
                if self.free(x, y) {
                    let (from, to) = (self.idx(a.x, a.y), self.idx(x, y));
                    self.cells[from] = Cell::Empty;
                    self.cells[to] = Cell::Agent;
                    self.state.agents[i].x = x;
                    self.state.agents[i].y = y;
                }
            }
        }

        // prey moves
        let mut order: Vec<usize> = (0..self.cfg.n_prey).collect();
        order.shuffle(rng);
        for j in order {
            let p = self.state.prey[j];
            if !p.alive {
                continue;
            }
            let options: Vec<(usize, usize)> = (0..4)
                .filter_map(|d| self.shifted(p.x, p.y, d))
                .filter(|&(x, y)| self.free(x, y))
                .collect();
            if let Some(&(x, y)) = options.choose(rng) {
                let (from, to) = (self.idx(p.x, p.y), self.idx(x, y));
                self.cells[from] = Cell::Empty;
                self.cells[to] = Cell::Prey;
                self.state.prey[j].x = x;
                self.state.prey[j].y = y;
            }
        }

        if self.cfg.task == Task::Ghost {
            self.state.coin = flip(rng);
        }
        self.state.t += 1;
        let terminal = self.is_terminal();
        let truncated = !terminal && self.state.t >= self.cfg.episode_limit;
        self.done = terminal || truncated;
        Ok(StepResult {
            obs: self.observe_all(),
            avail: self.avail_all(),
            reward,
            terminal,
            truncated,
        })
    }
}

fn flip(rng: &mut impl Rng) -> f64 {
    if rng.gen_bool(0.5) {
        1.0
    } else {
        -1.0
    }
}
