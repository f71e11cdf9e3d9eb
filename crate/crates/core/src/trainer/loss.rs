//! Batched unroll over episodes of different lengths, double-Q targets and
//! the masked TD loss.
//!
//! Episodes are sorted by length, longest first, so the episodes still
//! running at step `t` are always a prefix of the batch. Hidden states are
//! compacted to that prefix as episodes finish.

use rand::Rng;

use super::Episode;
use crate::error::{Error, Result};
use crate::models::{Algo, Model, StepHeads};
use crate::numgrad::{Tape, Tensor, Var};

/// A batch of episodes sorted by length, longest first.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    episodes: Vec<&'a Episode>,
}

impl<'a> Batch<'a> {
    pub fn new(mut episodes: Vec<&'a Episode>) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let first = episodes[0];
        for ep in &episodes {
            ep.validate()?;
            if ep.n_agents != first.n_agents || ep.obs_dim != first.obs_dim || ep.state_dim != first.state_dim {
                return Err(Error::Contract("episodes of different shapes in one batch".into()));
            }
        }
        episodes.sort_by(|a, b| b.len.cmp(&a.len));
        Ok(Self { episodes })
    }

    pub fn episodes(&self) -> &[&'a Episode] {
        &self.episodes
    }

    pub fn size(&self) -> usize {
        self.episodes.len()
    }

    pub fn max_len(&self) -> usize {
        self.episodes[0].len
    }

    /// Episodes that have an observation at step `t`.
    pub fn observed(&self, t: usize) -> usize {
        self.episodes.iter().take_while(|e| e.len >= t).count()
    }
}

/// Per-step heads of a batched unroll; `heads[t]` covers `batch.observed(t)`
/// episodes.
#[derive(Debug, Clone)]
pub struct Forward {
    pub heads: Vec<StepHeads>,
}

/// Unrolls the model over every observed step of the batch.
pub fn forward(model: &Model, tape: &mut Tape, batch: &Batch<'_>) -> Result<Forward> {
    let cfg = model.config();
    let (n, width) = (cfg.n_agents, cfg.input_dim());
    if batch.episodes[0].n_agents != n || batch.episodes[0].obs_dim != cfg.obs_dim {
        return Err(Error::dim("forward", "episodes do not match the model"));
    }
    let with_state = cfg.algo == Algo::DcgS;
    if with_state && !batch.episodes.iter().all(|e| e.has_states()) {
        return Err(Error::Contract("dcg-s needs recorded states".into()));
    }
    let mut heads = Vec::with_capacity(batch.max_len() + 1);
    let mut h: Option<(Var, usize)> = None;
    let mut obs_buf = vec![0.0; cfg.obs_dim];
    for t in 0..=batch.max_len() {
        let m = batch.observed(t);
        let h_prev = match h {
            None => tape.constant(Tensor::zeros(&[n * m, cfg.hidden])),
            Some((h, prev_m)) if prev_m == m => h,
            Some((h, prev_m)) => {
                let idx = (0..n).flat_map(|i| (0..m).map(move |x| i * prev_m + x)).collect();
                tape.gather_rows(h, idx)?
            }
        };
        let mut data = vec![0.0; n * m * width];
        for (r, row) in data.chunks_mut(width).enumerate() {
            let (i, x) = (r / m, r % m);
            let ep = batch.episodes[x];
            for (dst, &src) in obs_buf.iter_mut().zip(ep.obs_at(t, i)) {
                *dst = f64::from(src);
            }
            let prev = (t > 0).then(|| ep.action(t - 1, i));
            model.input_row(row, &obs_buf, prev, i);
        }
        let input = tape.constant(Tensor::new(vec![n * m, width], data)?);
        let hn = model.encode_step(tape, h_prev, input, m)?;
        let state = if with_state {
            let sd = batch.episodes[0].state_dim;
            let mut s = Vec::with_capacity(m * sd);
            for ep in &batch.episodes[..m] {
                s.extend(ep.state_at(t).iter().map(|&v| f64::from(v)));
            }
            Some(tape.constant(Tensor::new(vec![m, sd], s)?))
        } else {
            None
        };
        heads.push(model.heads(tape, hn, m, state)?);
        h = Some((hn, m));
    }
    Ok(Forward { heads })
}

/// Maps value row `r` of a step with `m` episodes to its row in a batch of
/// `b` episodes.
fn batch_row(model: &Model, r: usize, m: usize, b: usize) -> usize {
    match model.config().algo {
        Algo::Iql => (r / m) * b + r % m,
        _ => r,
    }
}

/// Q of the executed actions, `[R × T]` with `R = value_rows(B)` and `T` the
/// longest episode. Entries past an episode's end are zero.
pub fn executed_q(model: &Model, tape: &mut Tape, fwd: &Forward, batch: &Batch<'_>) -> Result<Var> {
    let n = model.config().n_agents;
    let b = batch.size();
    let rows = model.value_rows(b);
    let mut cols = Vec::with_capacity(batch.max_len());
    for t in 0..batch.max_len() {
        let heads = &fwd.heads[t];
        let m = heads.m;
        // Episodes ending at t have no action here; any valid index will do
        // since the loss masks that entry.
        let actions: Vec<usize> = (0..n * m)
            .map(|r| {
                let ep = batch.episodes[r % m];
                if t < ep.len {
                    ep.action(t, r / m)
                } else {
                    0
                }
            })
            .collect();
        let q = model.chosen_q(tape, heads, &actions)?;
        let vr = model.value_rows(m);
        let q = if vr == rows {
            q
        } else {
            let idx = (0..vr).map(|r| batch_row(model, r, m, b)).collect();
            tape.scatter_rows(q, idx, rows)?
        };
        cols.push(q);
    }
    tape.concat_cols(&cols)
}

/// Regression targets and loss weights, both `[R × T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub y: Tensor,
    /// `1 / (R · len)` on valid transitions, zero on padding.
    pub weights: Tensor,
}

impl Targets {
    pub fn mask(&self) -> Vec<bool> {
        self.weights.data().iter().map(|&w| w != 0.0).collect()
    }
}

/// Double-Q targets `r + γ·Q_target(o', argmax Q_online(o', ·))`, without
/// bootstrap after a terminal transition. `tape` holds the online unroll
/// `fwd`.
pub fn td_targets(
    model: &Model,
    tape: &Tape,
    fwd: &Forward,
    target: &Model,
    batch: &Batch<'_>,
    gamma: f64,
    rng: &mut impl Rng,
) -> Result<Targets> {
    let n = model.config().n_agents;
    let a = model.config().n_actions;
    let b = batch.size();
    let t_max = batch.max_len();
    let rows = model.value_rows(b);
    let mut y = vec![0.0; rows * t_max];
    let mut w = vec![0.0; rows * t_max];
    for r in 0..rows {
        let ep = batch.episodes[r % b];
        for t in 0..ep.len {
            w[r * t_max + t] = 1.0 / (rows as f64 * ep.len as f64);
        }
    }

    let mut ttape = Tape::new();
    let tfwd = forward(target, &mut ttape, batch)?;
    for t in 1..=t_max {
        let heads = &fwd.heads[t];
        let m = heads.m;
        let mut avail = Vec::with_capacity(n * m);
        for i in 0..n {
            for ep in &batch.episodes[..m] {
                avail.push(ep.avail_at(t, i).to_vec());
            }
        }
        debug_assert!(avail.iter().all(|r| r.len() == a));
        let best = model.greedy(tape, heads, &avail, rng)?;
        let qv = target.chosen_q(&mut ttape, &tfwd.heads[t], &best)?;
        let qv = ttape.value(qv).data().to_vec();
        for (r, &q) in qv.iter().enumerate() {
            let x = r % m;
            let ep = batch.episodes[x];
            let row = batch_row(model, r, m, b);
            let bootstrap = !(t == ep.len && ep.terminal);
            let reward = ep.rewards[t - 1];
            y[row * t_max + t - 1] = if bootstrap { reward + gamma * q } else { reward };
        }
    }
    Ok(Targets {
        y: Tensor::new(vec![rows, t_max], y)?,
        weights: Tensor::new(vec![rows, t_max], w)?,
    })
}

/// `Σ weights·(q − y)²`: the mean over episodes (and agents, for IQL) of the
/// per-episode mean squared TD error. Padded entries are dropped before the
/// arithmetic, so whatever they hold cannot leak into the loss.
pub fn dqn_loss(tape: &mut Tape, q: Var, targets: &Targets) -> Result<Var> {
    let shape = targets.y.shape().to_vec();
    if tape.value(q).shape() != shape.as_slice() || targets.weights.shape() != shape.as_slice() {
        return Err(Error::dim("dqn_loss", "q, targets and weights differ in shape"));
    }
    let keep: Vec<usize> = (0..targets.weights.len()).filter(|&k| targets.weights.data()[k] != 0.0).collect();
    let pick = |t: &Tensor| Tensor::new(vec![keep.len(), 1], keep.iter().map(|&k| t.data()[k]).collect());
    let y = tape.constant(pick(&targets.y)?);
    let w = tape.constant(pick(&targets.weights)?);
    let flat = tape.reshape(q, &[targets.y.len(), 1])?;
    let q = tape.gather_rows(flat, keep)?;
    let d = tape.sub(q, y)?;
    let d2 = tape.square(d);
    let wd = tape.mul(d2, w)?;
    let loss = tape.sum(wd);
    let v = tape.value(loss).data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss is {v}")));
    }
    Ok(loss)
}
