//! Value-function models.
//!
//! All agents share one recurrent encoder (`fc → ReLU → GRU`) unless the
//! model is built without parameter sharing, in which case every agent gets
//! its own encoder and head and every edge its own payoff head.
//!
//! Batched computations use an agent-major row layout: with `m` parallel
//! episodes, row `i·m + x` belongs to agent `i` in episode `x`. Payoff rows
//! are edge-major, `e·m + x` for the `(i, j)` direction and `(|E| + e)·m + x`
//! for the swapped `(j, i)` direction.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_topology, CoordinationGraph, Topology};
use crate::maxplus::{self, coordinate_ascent, greedy_maxplus, masked_argmax, AnnotatedGraph, JointAction};
use crate::numgrad::{ParamStore, Tape, Tensor, Var};

pub const HIDDEN: usize = 64;
/// Coordinate-ascent sweeps used to maximise the LRQ value.
pub const LRQ_SWEEPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algo {
    #[serde(rename = "dcg")]
    Dcg,
    #[serde(rename = "dcg-s")]
    DcgS,
    #[serde(rename = "vdn")]
    Vdn,
    #[serde(rename = "iql")]
    Iql,
    #[serde(rename = "lrq")]
    Lrq,
}

impl Algo {
    pub const ALL: [Algo; 5] = [Algo::Dcg, Algo::DcgS, Algo::Vdn, Algo::Iql, Algo::Lrq];

    pub fn name(self) -> &'static str {
        match self {
            Algo::Dcg => "dcg",
            Algo::DcgS => "dcg-s",
            Algo::Vdn => "vdn",
            Algo::Iql => "iql",
            Algo::Lrq => "lrq",
        }
    }

    /// Whether the joint value is maximised by message passing.
    pub fn uses_graph(self) -> bool {
        matches!(self, Algo::Dcg | Algo::DcgS)
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algo::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config("algo", format!("unknown algorithm `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub algo: Algo,
    pub n_agents: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    /// Length of the global state vector; only read by `dcg-s`.
    pub state_dim: usize,
    pub hidden: usize,
    /// Payoff rank for `dcg`/`dcg-s` (0 = full matrix), factor count for `lrq`.
    pub rank: usize,
    pub topology: Topology,
    pub shared: bool,
    pub k_passes: usize,
    pub msg_norm: bool,
}

impl ModelConfig {
    pub fn input_dim(&self) -> usize {
        self.obs_dim + self.n_actions + self.n_agents
    }

    fn validate(&self) -> Result<()> {
        if self.n_agents == 0 || self.n_actions == 0 || self.hidden == 0 {
            return Err(Error::Argument("model needs agents, actions and hidden units".into()));
        }
        if self.algo == Algo::Lrq && self.rank == 0 {
            return Err(Error::config("rank", "lrq needs at least one factor"));
        }
        if self.algo.uses_graph() && self.k_passes == 0 {
            return Err(Error::config("k_passes", "must be at least 1"));
        }
        Ok(())
    }
}

/// One GRU state per agent for a single environment.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates(pub Tensor);

impl HiddenStates {
    pub fn zeros(n_agents: usize, hidden: usize) -> Self {
        HiddenStates(Tensor::zeros(&[n_agents, hidden]))
    }
}

/// Tape handles produced for one timestep of `m` parallel episodes.
#[derive(Debug, Clone, Copy)]
pub struct StepHeads {
    pub m: usize,
    /// `[n·m × A]`
    pub utilities: Option<Var>,
    /// `[2|E|·m × A²]` for full payoffs, `[2|E|·m × 2AK]` for low rank.
    pub payoffs: Option<Var>,
    /// `[n·m × KA]`, LRQ only.
    pub factors: Option<Var>,
    /// `[m × 1]`, `dcg-s` only.
    pub bias: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    graph: CoordinationGraph,
    params: ParamStore,
}

fn weight(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    store.init_weight(format!("{name}.W"), fan_in, fan_out, rng);
    store.init_bias(format!("{name}.b"), fan_out);
}

fn gru(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut impl Rng) {
    for g in ["z", "r", "h"] {
        store.init_weight(format!("{name}.W_{g}"), input, hidden, rng);
        store.init_weight(format!("{name}.U_{g}"), hidden, hidden, rng);
        store.init_bias(format!("{name}.b_{g}"), hidden);
    }
}

impl Model {
    pub fn new(cfg: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_agents;
        let topology = if cfg.algo.uses_graph() { cfg.topology } else { Topology::Empty };
        let graph = build_topology(topology, n)?;
        let (a, h, k) = (cfg.n_actions, cfg.hidden, cfg.rank);
        let mut p = ParamStore::new();
        let prefixes: Vec<String> = if cfg.shared {
            vec![String::new()]
        } else {
            (0..n).map(|i| format!("agent{i}.")).collect()
        };
        for pre in &prefixes {
            weight(&mut p, &format!("{pre}encoder.fc"), cfg.input_dim(), h, rng);
            gru(&mut p, &format!("{pre}encoder.gru"), h, h, rng);
            match cfg.algo {
                Algo::Lrq => weight(&mut p, &format!("{pre}factor"), h, k * a, rng),
                _ => weight(&mut p, &format!("{pre}utility"), h, a, rng),
            }
        }
        if cfg.algo.uses_graph() && graph.n_edges() > 0 {
            let out = if k == 0 { a * a } else { 2 * a * k };
            if cfg.shared {
                weight(&mut p, "payoff", 2 * h, out, rng);
            } else {
                for e in 0..graph.n_edges() {
                    weight(&mut p, &format!("edge{e}.payoff"), 2 * h, out, rng);
                }
            }
        }
        if cfg.algo == Algo::DcgS {
            weight(&mut p, "bias.fc1", cfg.state_dim, h, rng);
            weight(&mut p, "bias.fc2", h, 1, rng);
        }
        Ok(Self { cfg, graph, params: p })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &CoordinationGraph {
        &self.graph
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// The same architecture carrying a different parameter set, which must
    /// match this model's names and shapes.
    pub fn with_params(&self, params: ParamStore) -> Result<Model> {
        let mut out = Model {
            cfg: self.cfg.clone(),
            graph: self.graph.clone(),
            params: self.params.clone(),
        };
        out.params.copy_values_from(&params)?;
        Ok(out)
    }

    fn prefix(&self, agent: usize) -> String {
        if self.cfg.shared {
            String::new()
        } else {
            format!("agent{agent}.")
        }
    }

    /// Writes one encoder input row: observation, one-hot previous action
    /// (all zeros when `prev` is `None`) and one-hot agent id.
    pub fn input_row(&self, out: &mut [f64], obs: &[f64], prev: Option<usize>, agent: usize) {
        let (d, a) = (self.cfg.obs_dim, self.cfg.n_actions);
        debug_assert_eq!(out.len(), self.cfg.input_dim());
        out.fill(0.0);
        out[..d].copy_from_slice(obs);
        if let Some(p) = prev {
            out[d + p] = 1.0;
        }
        out[d + a + agent] = 1.0;
    }

    /// Encoder inputs for one environment, `[n × input_dim]`.
    pub fn encoder_input(&self, obs: &[Vec<f64>], prev: Option<&[usize]>) -> Result<Tensor> {
        let n = self.cfg.n_agents;
        let w = self.cfg.input_dim();
        if obs.len() != n || obs.iter().any(|o| o.len() != self.cfg.obs_dim) {
            return Err(Error::dim("encoder input", "observation count or width"));
        }
        let mut data = vec![0.0; n * w];
        for (i, row) in data.chunks_mut(w).enumerate() {
            self.input_row(row, &obs[i], prev.map(|p| p[i]), i);
        }
        Tensor::new(vec![n, w], data)
    }

    fn apply_per_agent(
        &self,
        tape: &mut Tape,
        x: Var,
        m: usize,
        name: &str,
    ) -> Result<Var> {
        if self.cfg.shared {
            let w = tape.param(&self.params, &format!("{name}.W"))?;
            let b = tape.param(&self.params, &format!("{name}.b"))?;
            return tape.affine(x, w, b);
        }
        let mut parts = Vec::with_capacity(self.cfg.n_agents);
        for i in 0..self.cfg.n_agents {
            let pre = self.prefix(i);
            let w = tape.param(&self.params, &format!("{pre}{name}.W"))?;
            let b = tape.param(&self.params, &format!("{pre}{name}.b"))?;
            let xi = tape.slice_rows(x, i * m, m)?;
            parts.push(tape.affine(xi, w, b)?);
        }
        tape.concat_rows(&parts)
    }

    /// One encoder step for `m` episodes: `h' = GRU(ReLU(fc(input)), h)`.
    pub fn encode_step(&self, tape: &mut Tape, h_prev: Var, input: Var, m: usize) -> Result<Var> {
        let rows = self.cfg.n_agents * m;
        if tape.value(input).rows() != rows || tape.value(h_prev).rows() != rows {
            return Err(Error::dim("encode_step", format!("expected {rows} rows")));
        }
        let z = self.apply_per_agent(tape, input, m, "encoder.fc")?;
        let z = tape.relu(z);
        if self.cfg.shared {
            let g = tape.gru_params(&self.params, "encoder.gru")?;
            return tape.gru(z, h_prev, g);
        }
        let mut parts = Vec::with_capacity(self.cfg.n_agents);
        for i in 0..self.cfg.n_agents {
            let g = tape.gru_params(&self.params, &format!("agent{i}.encoder.gru"))?;
            let zi = tape.slice_rows(z, i * m, m)?;
            let hi = tape.slice_rows(h_prev, i * m, m)?;
            parts.push(tape.gru(zi, hi, g)?);
        }
        tape.concat_rows(&parts)
    }

    /// Heads for hidden states `h` (`[n·m × H]`) on the model's own graph.
    pub fn heads(&self, tape: &mut Tape, h: Var, m: usize, state: Option<Var>) -> Result<StepHeads> {
        let graph = self.graph.clone();
        self.heads_on(tape, h, m, state, &graph)
    }

    /// Heads evaluated on an arbitrary graph over the same agents. Graphs
    /// other than the model's own need shared parameters.
    pub fn heads_on(
        &self,
        tape: &mut Tape,
        h: Var,
        m: usize,
        state: Option<Var>,
        graph: &CoordinationGraph,
    ) -> Result<StepHeads> {
        let n = self.cfg.n_agents;
        if graph.n_agents() != n {
            return Err(Error::Argument("graph does not match the agent count".into()));
        }
        if !self.cfg.shared && graph != &self.graph {
            return Err(Error::Contract("per-edge payoff heads are tied to the model's graph".into()));
        }
        if tape.value(h).rows() != n * m {
            return Err(Error::dim("heads", format!("expected {} hidden rows", n * m)));
        }
        let mut out = StepHeads {
            m,
            utilities: None,
            payoffs: None,
            factors: None,
            bias: None,
        };
        match self.cfg.algo {
            Algo::Lrq => out.factors = Some(self.apply_per_agent(tape, h, m, "factor")?),
            _ => out.utilities = Some(self.apply_per_agent(tape, h, m, "utility")?),
        }
        if self.cfg.algo.uses_graph() && graph.n_edges() > 0 {
            out.payoffs = Some(self.payoff_rows(tape, h, m, graph)?);
        }
        if self.cfg.algo == Algo::DcgS {
            let s = state.ok_or_else(|| Error::Contract("dcg-s needs the global state".into()))?;
            if tape.value(s).rows() != m {
                return Err(Error::dim("state bias", format!("expected {m} state rows")));
            }
            let w1 = tape.param(&self.params, "bias.fc1.W")?;
            let b1 = tape.param(&self.params, "bias.fc1.b")?;
            let w2 = tape.param(&self.params, "bias.fc2.W")?;
            let b2 = tape.param(&self.params, "bias.fc2.b")?;
            let z = tape.affine(s, w1, b1)?;
            let z = tape.relu(z);
            out.bias = Some(tape.affine(z, w2, b2)?);
        }
        Ok(out)
    }

    fn payoff_rows(&self, tape: &mut Tape, h: Var, m: usize, graph: &CoordinationGraph) -> Result<Var> {
        let edges = graph.edges();
        let ne = edges.len();
        let mut left = Vec::with_capacity(2 * ne * m);
        let mut right = Vec::with_capacity(2 * ne * m);
        for &(i, j) in edges {
            left.extend((0..m).map(|x| i * m + x));
            right.extend((0..m).map(|x| j * m + x));
        }
        for &(i, j) in edges {
            left.extend((0..m).map(|x| j * m + x));
            right.extend((0..m).map(|x| i * m + x));
        }
        let l = tape.gather_rows(h, left)?;
        let r = tape.gather_rows(h, right)?;
        let pair = tape.concat_cols(&[l, r])?;
        if self.cfg.shared {
            let w = tape.param(&self.params, "payoff.W")?;
            let b = tape.param(&self.params, "payoff.b")?;
            return tape.affine(pair, w, b);
        }
        let mut fwd = Vec::with_capacity(ne);
        let mut rev = Vec::with_capacity(ne);
        for e in 0..ne {
            let w = tape.param(&self.params, &format!("edge{e}.payoff.W"))?;
            let b = tape.param(&self.params, &format!("edge{e}.payoff.b"))?;
            let pf = tape.slice_rows(pair, e * m, m)?;
            let pr = tape.slice_rows(pair, (ne + e) * m, m)?;
            fwd.push(tape.affine(pf, w, b)?);
            rev.push(tape.affine(pr, w, b)?);
        }
        fwd.extend(rev);
        tape.concat_rows(&fwd)
    }

    /// Number of value rows [`Model::chosen_q`] produces for `m` episodes:
    /// one per agent for IQL, one per episode otherwise.
    pub fn value_rows(&self, m: usize) -> usize {
        match self.cfg.algo {
            Algo::Iql => self.cfg.n_agents * m,
            _ => m,
        }
    }

    /// Value of the given actions (agent-major, `n·m` entries) as a column
    /// of [`Model::value_rows`] rows.
    pub fn chosen_q(&self, tape: &mut Tape, heads: &StepHeads, actions: &[usize]) -> Result<Var> {
        let graph = self.graph.clone();
        self.chosen_q_on(tape, heads, actions, &graph)
    }

    pub fn chosen_q_on(
        &self,
        tape: &mut Tape,
        heads: &StepHeads,
        actions: &[usize],
        graph: &CoordinationGraph,
    ) -> Result<Var> {
        let (n, a, m) = (self.cfg.n_agents, self.cfg.n_actions, heads.m);
        if actions.len() != n * m {
            return Err(Error::dim("chosen_q", format!("{} actions for {} rows", actions.len(), n * m)));
        }
        if let Some(&bad) = actions.iter().find(|&&x| x >= a) {
            return Err(Error::Argument(format!("action {bad} out of range 0..{a}")));
        }
        match self.cfg.algo {
            Algo::Iql => {
                let u = heads.utilities.expect("utility head");
                tape.gather_cols(u, actions.to_vec())
            }
            Algo::Vdn => {
                let u = heads.utilities.expect("utility head");
                let picked = tape.gather_cols(u, actions.to_vec())?;
                let grid = tape.reshape(picked, &[n, m])?;
                let s = tape.sum_cols(grid);
                tape.reshape(s, &[m, 1])
            }
            Algo::Lrq => {
                let k = self.cfg.rank;
                let f = heads.factors.expect("factor head");
                let idx: Vec<usize> = actions.iter().flat_map(|&ai| (0..k).map(move |c| ai * k + c)).collect();
                let picked = tape.gather_cols(f, idx)?;
                let mut prod = tape.slice_rows(picked, 0, m)?;
                for i in 1..n {
                    let fi = tape.slice_rows(picked, i * m, m)?;
                    prod = tape.mul(prod, fi)?;
                }
                Ok(tape.sum_rows(prod))
            }
            Algo::Dcg | Algo::DcgS => {
                let u = heads.utilities.expect("utility head");
                let picked = tape.gather_cols(u, actions.to_vec())?;
                let grid = tape.reshape(picked, &[n, m])?;
                let s = tape.sum_cols(grid);
                let mut q = tape.scale(s, 1.0 / n as f64);
                if let Some(p) = heads.payoffs {
                    let edge_terms = self.edge_terms(tape, p, actions, m, graph)?;
                    let ne = graph.n_edges();
                    let grid = tape.reshape(edge_terms, &[ne, m])?;
                    let s = tape.sum_cols(grid);
                    let pq = tape.scale(s, 1.0 / ne as f64);
                    q = tape.add(q, pq)?;
                }
                let q = tape.reshape(q, &[m, 1])?;
                match heads.bias {
                    Some(b) => tape.add(q, b),
                    None => Ok(q),
                }
            }
        }
    }

    /// Symmetrised payoff of the chosen action pair, `[|E|·m × 1]`.
    fn edge_terms(
        &self,
        tape: &mut Tape,
        payoffs: Var,
        actions: &[usize],
        m: usize,
        graph: &CoordinationGraph,
    ) -> Result<Var> {
        let (a, k) = (self.cfg.n_actions, self.cfg.rank);
        let edges = graph.edges();
        let ne = edges.len();
        let fwd = tape.slice_rows(payoffs, 0, ne * m)?;
        let rev = tape.slice_rows(payoffs, ne * m, ne * m)?;
        let pairs: Vec<(usize, usize)> = edges
            .iter()
            .flat_map(|&(i, j)| (0..m).map(move |x| (actions[i * m + x], actions[j * m + x])))
            .collect();
        if k == 0 {
            let f = tape.gather_cols(fwd, pairs.iter().map(|&(ai, aj)| ai * a + aj).collect())?;
            let r = tape.gather_cols(rev, pairs.iter().map(|&(ai, aj)| aj * a + ai).collect())?;
            let s = tape.add(f, r)?;
            return Ok(tape.scale(s, 0.5));
        }
        let ak = a * k;
        let cols = |off_a: usize, act_a: fn(&(usize, usize)) -> usize| -> Vec<usize> {
            pairs
                .iter()
                .flat_map(|p| {
                    let base = off_a + act_a(p) * k;
                    (0..k).map(move |c| base + c)
                })
                .collect()
        };
        let hat = tape.gather_cols(fwd, cols(0, |p| p.0))?;
        let bar = tape.gather_cols(fwd, cols(ak, |p| p.1))?;
        let bar_r = tape.gather_cols(rev, cols(ak, |p| p.0))?;
        let hat_r = tape.gather_cols(rev, cols(0, |p| p.1))?;
        let t1 = tape.mul(hat, bar)?;
        let t1 = tape.sum_rows(t1);
        let t2 = tape.mul(bar_r, hat_r)?;
        let t2 = tape.sum_rows(t2);
        let s = tape.add(t1, t2)?;
        Ok(tape.scale(s, 0.5))
    }

    /// Utility and payoff tensors of episode `x` from evaluated heads.
    pub fn annotate<'g>(
        &self,
        tape: &Tape,
        heads: &StepHeads,
        x: usize,
        avail: &[Vec<bool>],
        graph: &'g CoordinationGraph,
    ) -> Result<AnnotatedGraph<'g>> {
        let (n, a, m, k) = (self.cfg.n_agents, self.cfg.n_actions, heads.m, self.cfg.rank);
        let u = tape.value(heads.utilities.ok_or_else(|| Error::Contract("model has no utility head".into()))?);
        let mut fv = Vec::with_capacity(n * a);
        for i in 0..n {
            fv.extend_from_slice(u.row(i * m + x));
        }
        let ne = graph.n_edges();
        let mut fe = vec![0.0; ne * a * a];
        if let Some(p) = heads.payoffs {
            let p = tape.value(p);
            for e in 0..ne {
                let fwd = p.row(e * m + x);
                let rev = p.row((ne + e) * m + x);
                let out = &mut fe[e * a * a..(e + 1) * a * a];
                if k == 0 {
                    for ai in 0..a {
                        for aj in 0..a {
                            out[ai * a + aj] = 0.5 * (fwd[ai * a + aj] + rev[aj * a + ai]);
                        }
                    }
                } else {
                    let ak = a * k;
                    for ai in 0..a {
                        for aj in 0..a {
                            let (mut t1, mut t2) = (0.0, 0.0);
                            for c in 0..k {
                                t1 += fwd[ai * k + c] * fwd[ak + aj * k + c];
                                t2 += rev[ak + ai * k + c] * rev[aj * k + c];
                            }
                            out[ai * a + aj] = 0.5 * (t1 + t2);
                        }
                    }
                }
            }
        }
        AnnotatedGraph::new(
            graph,
            Tensor::new(vec![n, a], fv)?,
            Tensor::new(vec![ne, a, a], fe)?,
            avail.to_vec(),
        )
    }

    /// Greedy joint actions for all `m` episodes, agent-major. `avail` is
    /// indexed like the rows (`i·m + x`).
    pub fn greedy(
        &self,
        tape: &Tape,
        heads: &StepHeads,
        avail: &[Vec<bool>],
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>> {
        let (n, a, m) = (self.cfg.n_agents, self.cfg.n_actions, heads.m);
        if avail.len() != n * m || avail.iter().any(|r| r.len() != a) {
            return Err(Error::dim("greedy", "availability rows"));
        }
        let mut out = vec![0; n * m];
        match self.cfg.algo {
            Algo::Vdn | Algo::Iql => {
                let u = tape.value(heads.utilities.expect("utility head"));
                for (r, slot) in out.iter_mut().enumerate() {
                    *slot = masked_argmax(u.row(r), &avail[r]).ok_or(Error::Infeasible { agent: r / m })?;
                }
            }
            Algo::Lrq => {
                let k = self.cfg.rank;
                let f = tape.value(heads.factors.expect("factor head"));
                for x in 0..m {
                    let rows: Vec<&[f64]> = (0..n).map(|i| f.row(i * m + x)).collect();
                    let av: Vec<Vec<bool>> = (0..n).map(|i| avail[i * m + x].clone()).collect();
                    let (ja, _) = coordinate_ascent(|ja| lrq_value(&rows, ja, k), &av, LRQ_SWEEPS, rng)?;
                    for i in 0..n {
                        out[i * m + x] = ja.0[i];
                    }
                }
            }
            Algo::Dcg | Algo::DcgS => {
                for x in 0..m {
                    let av: Vec<Vec<bool>> = (0..n).map(|i| avail[i * m + x].clone()).collect();
                    let ag = self.annotate(tape, heads, x, &av, &self.graph)?;
                    let (ja, _) = greedy_maxplus(&ag, self.cfg.k_passes, self.cfg.msg_norm)?;
                    for i in 0..n {
                        out[i * m + x] = ja.0[i];
                    }
                }
            }
        }
        Ok(out)
    }

    /// ε-greedy actions for a single environment. Each agent independently
    /// explores with probability `epsilon`.
    pub fn select_actions(
        &self,
        tape: &Tape,
        heads: &StepHeads,
        avail: &[Vec<bool>],
        epsilon: f64,
        rng: &mut impl Rng,
    ) -> Result<JointAction> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::Argument(format!("epsilon {epsilon} outside [0, 1]")));
        }
        if let Some(agent) = avail.iter().position(|r| !r.iter().any(|&b| b)) {
            return Err(Error::Infeasible { agent });
        }
        let greedy = self.greedy(tape, heads, avail, rng)?;
        let mut out = greedy;
        for (i, act) in out.iter_mut().enumerate() {
            if rng.gen::<f64>() < epsilon {
                let options: Vec<usize> = (0..avail[i].len()).filter(|&a| avail[i][a]).collect();
                *act = options[rng.gen_range(0..options.len())];
            }
        }
        Ok(JointAction(out))
    }

    /// Advances the hidden states of a single environment by one step and
    /// returns the step's heads, evaluated on `tape`.
    pub fn step_single(
        &self,
        tape: &mut Tape,
        hidden: &HiddenStates,
        obs: &[Vec<f64>],
        prev: Option<&[usize]>,
        state: Option<&[f64]>,
    ) -> Result<(HiddenStates, StepHeads)> {
        let input = self.encoder_input(obs, prev)?;
        let input = tape.constant(input);
        let h = tape.constant(hidden.0.clone());
        let h = self.encode_step(tape, h, input, 1)?;
        let s = match (self.cfg.algo, state) {
            (Algo::DcgS, Some(s)) => Some(tape.constant(Tensor::new(vec![1, s.len()], s.to_vec())?)),
            (Algo::DcgS, None) => return Err(Error::Contract("dcg-s needs the global state".into())),
            _ => None,
        };
        let heads = self.heads(tape, h, 1, s)?;
        Ok((HiddenStates(tape.value(h).clone()), heads))
    }
}

impl Model {
    fn check_available(avail: &[Vec<bool>], a: &[usize]) -> Result<()> {
        for (i, &ai) in a.iter().enumerate() {
            if !avail.get(i).and_then(|r| r.get(ai)).copied().unwrap_or(false) {
                return Err(Error::Contract(format!("agent {i} action {ai} is unavailable")));
            }
        }
        Ok(())
    }

    /// `Σᵢ f(aᵢ | hᵢ)` for the first episode of `heads`.
    pub fn vdn_q(&self, tape: &Tape, heads: &StepHeads, avail: &[Vec<bool>], a: &JointAction) -> Result<f64> {
        Self::check_available(avail, &a.0)?;
        let u = tape.value(heads.utilities.ok_or_else(|| Error::Contract("no utility head".into()))?);
        Ok(a.0.iter().enumerate().map(|(i, &ai)| u.get2(i * heads.m, ai)).sum())
    }

    /// Agent `i`'s own value of `action` for the first episode of `heads`.
    pub fn iql_q(&self, tape: &Tape, heads: &StepHeads, avail: &[Vec<bool>], agent: usize, action: usize) -> Result<f64> {
        if !avail.get(agent).and_then(|r| r.get(action)).copied().unwrap_or(false) {
            return Err(Error::Contract(format!("agent {agent} action {action} is unavailable")));
        }
        let u = tape.value(heads.utilities.ok_or_else(|| Error::Contract("no utility head".into()))?);
        Ok(u.get2(agent * heads.m, action))
    }

    /// `Σ_k Πᵢ f̄ᵏ(aᵢ | hᵢ)` for the first episode of `heads`.
    pub fn lrq_q(&self, tape: &Tape, heads: &StepHeads, a: &JointAction) -> Result<f64> {
        let f = tape.value(heads.factors.ok_or_else(|| Error::Contract("no factor head".into()))?);
        let n = self.cfg.n_agents;
        if a.len() != n || a.0.iter().any(|&x| x >= self.cfg.n_actions) {
            return Err(Error::Argument("joint action does not fit the model".into()));
        }
        let rows: Vec<&[f64]> = (0..n).map(|i| f.row(i * heads.m)).collect();
        Ok(lrq_value(&rows, &a.0, self.cfg.rank))
    }
}

/// `Σ_k Π_i f_i[a_i·K + k]`.
pub fn lrq_value(rows: &[&[f64]], actions: &[usize], k: usize) -> f64 {
    let mut q = 0.0;
    for c in 0..k {
        let mut prod = rows[0][actions[0] * k + c];
        for (row, &ai) in rows.iter().zip(actions).skip(1) {
            prod *= row[ai * k + c];
        }
        q += prod;
    }
    q
}

/// `M[a, b] = Σ_k f̂[a, k]·f̄[b, k]`.
pub fn low_rank_payoff(f_hat: &Tensor, f_bar: &Tensor) -> Result<Tensor> {
    let (a, k) = (f_hat.rows(), f_hat.cols());
    if f_bar.cols() != k || f_hat.shape().len() != 2 || f_bar.shape().len() != 2 {
        return Err(Error::dim(
            "low_rank_payoff",
            format!("{:?} vs {:?}", f_hat.shape(), f_bar.shape()),
        ));
    }
    if k == 0 {
        return Err(Error::Argument("rank must be at least 1".into()));
    }
    let b = f_bar.rows();
    let mut out = vec![0.0; a * b];
    for i in 0..a {
        for j in 0..b {
            out[i * b + j] = (0..k).map(|c| f_hat.get2(i, c) * f_bar.get2(j, c)).sum();
        }
    }
    Tensor::new(vec![a, b], out)
}

/// Exact DCG value of a joint action for evaluated heads of one episode,
/// including the state bias when present.
pub fn dcg_q(model: &Model, tape: &Tape, heads: &StepHeads, ag: &AnnotatedGraph<'_>, a: &JointAction) -> Result<f64> {
    if !model.cfg.algo.uses_graph() {
        return Err(Error::Contract("dcg_q on a model without a graph".into()));
    }
    let bias = match (model.cfg.algo, heads.bias) {
        (Algo::DcgS, Some(b)) => Some(tape.value(b).data()[0]),
        (Algo::DcgS, None) => return Err(Error::Contract("dcg-s needs the global state".into())),
        _ => None,
    };
    maxplus::q_value(ag, a, bias)
}
