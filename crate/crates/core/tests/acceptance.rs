//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any enforced criterion fails.
//!
//! The desk-scale training check (criterion 9) needs hours of training. By
//! default it only reports on results already present under `target/desk`;
//! pass `--desk` (or `--ignored`) to train or resume those runs and enforce
//! the verdict.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};

use dcg::cli::{
    experiment_dir, parse_config, read_config_file, read_metrics, run_experiment, seed_dir, ExperimentConfig,
    MetricsRow, RunOptions, SeedOutcome, CHECKPOINT_DIR, CONFIG_FILE, METRICS_FILE,
};
use dcg::env::{Corner, Entity, Env, EnvConfig, EnvState, Task, CATCH, N_ACTIONS, STAY};
use dcg::graph::{build_topology, CoordinationGraph, Topology};
use dcg::maxplus::{brute_force, greedy_maxplus, greedy_maxplus_traced, q_value, AnnotatedGraph};
use dcg::models::{Algo, Model, ModelConfig};
use dcg::numgrad::{finite_diff_check, GruVars, ParamStore, RmsProp, Tape, Tensor, Var};
use dcg::trainer::{
    dqn_loss, executed_q, forward, load_learner, save_learner, Batch, Episode, Learner, Targets,
};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `n` masks over `a` actions, each with between `lo` and `a` actions left.
fn random_masks(rng: &mut impl Rng, n: usize, a: usize, lo: usize) -> Vec<Vec<bool>> {
    (0..n)
        .map(|_| {
            let count = rng.gen_range(lo..=a);
            let mut m: Vec<bool> = (0..a).map(|k| k < count).collect();
            m.shuffle(rng);
            m
        })
        .collect()
}

fn random_tree(rng: &mut impl Rng, n: usize) -> (CoordinationGraph, &'static str) {
    match rng.gen_range(0..3) {
        0 => (build_topology(Topology::Line, n).unwrap(), "line"),
        1 => (build_topology(Topology::Star, n).unwrap(), "star"),
        _ => {
            let edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.gen_range(0..i), i)).collect();
            (CoordinationGraph::new(n, edges).unwrap(), "random")
        }
    }
}

/// Joint value written out from the definition.
fn oracle_value(g: &CoordinationGraph, u: &Tensor, p: &Tensor, a: &[usize]) -> f64 {
    let na = u.cols();
    let n = g.n_agents() as f64;
    let mut q: f64 = a.iter().enumerate().map(|(i, &ai)| u.get2(i, ai)).sum::<f64>() / n;
    if g.n_edges() > 0 {
        let pe: f64 = g
            .edges()
            .iter()
            .enumerate()
            .map(|(e, &(i, j))| p.data()[(e * na + a[i]) * na + a[j]])
            .sum();
        q += pe / g.n_edges() as f64;
    }
    q
}

/// Exhaustive search over available joint actions.
fn oracle_max(g: &CoordinationGraph, u: &Tensor, p: &Tensor, avail: &[Vec<bool>]) -> (Vec<usize>, f64) {
    let n = g.n_agents();
    let options: Vec<Vec<usize>> = avail.iter().map(|m| (0..m.len()).filter(|&k| m[k]).collect()).collect();
    let mut idx = vec![0usize; n];
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    loop {
        let a: Vec<usize> = (0..n).map(|i| options[i][idx[i]]).collect();
        let v = oracle_value(g, u, p, &a);
        if v > best.1 {
            best = (a, v);
        }
        let mut i = n;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            idx[i] += 1;
            if idx[i] < options[i].len() {
                break;
            }
            idx[i] = 0;
        }
    }
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut runs, mut kinds) = (0usize, BTreeMap::new());
    for inst in 0..1000 {
        let n = 2 + inst % 5;
        let a = 5;
        let (g, kind) = random_tree(&mut rng, n);
        *kinds.entry(kind).or_insert(0) += 1;
        let u = uniform(&mut rng, &[n, a]);
        let p = uniform(&mut rng, &[g.n_edges(), a, a]);
        let avail = random_masks(&mut rng, n, a, 2);
        let ag = AnnotatedGraph::new(&g, u.clone(), p.clone(), avail.clone()).unwrap();
        let (oa, ov) = oracle_max(&g, &u, &p, &avail);
        let (_, bv) = brute_force(&ag).unwrap();
        for normalize in [true, false] {
            let (ja, v) = greedy_maxplus(&ag, g.diameter() + 1, normalize).unwrap();
            runs += 1;
            if v != bv || ja.0 != oa || (v - ov).abs() > 1e-12 {
                return Err(format!(
                    "instance {inst} ({kind}, n={n}, normalize={normalize}): max-plus {v} {:?}, optimum {ov} {oa:?}",
                    ja.0
                ));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 10.0, format!("{runs} runs on 1000 trees {kinds:?} exact, {secs:.2}s"))
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut improved = 0;
    for inst in 0..1000 {
        let n = 3 + inst % 4;
        let topo = if inst % 2 == 0 { Topology::Full } else { Topology::Cycle };
        let g = build_topology(topo, n).unwrap();
        let a = rng.gen_range(2..=5);
        let u = uniform(&mut rng, &[n, a]);
        let p = uniform(&mut rng, &[g.n_edges(), a, a]);
        let avail = random_masks(&mut rng, n, a, 1);
        let ag = AnnotatedGraph::new(&g, u, p, avail.clone()).unwrap();
        let normalize = inst % 3 != 0;
        let trace = greedy_maxplus_traced(&ag, 8, normalize).unwrap();
        let (best_a, best_v) = trace.best().clone();
        let top = trace.candidates.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
        if best_v != top || best_v < trace.candidates[0].1 {
            return Err(format!("instance {inst}: returned {best_v}, best candidate {top}"));
        }
        let (ja, v) = greedy_maxplus(&ag, 8, normalize).unwrap();
        if ja != best_a || v != best_v {
            return Err(format!("instance {inst}: traced and untraced runs disagree"));
        }
        for (c, cv) in &trace.candidates {
            let recomputed = q_value(&ag, c, None).unwrap();
            if recomputed != *cv || c.0.iter().enumerate().any(|(i, &ai)| !avail[i][ai]) {
                return Err(format!("instance {inst}: candidate {:?} value {cv} vs {recomputed}", c.0));
            }
        }
        if best_v > trace.candidates[0].1 {
            improved += 1;
        }
    }
    Ok(format!("1000 cyclic instances, {improved} improved on the independent argmax"))
}

/// Loss `Σ C ⊙ y` with fixed random `C`, so every output entry matters.
fn contract(tape: &mut Tape, y: Var, c: &Tensor) -> dcg::Result<Var> {
    let y = tape.reshape(y, c.shape())?;
    let c = tape.constant(c.clone());
    let prod = tape.mul(y, c)?;
    Ok(tape.sum(prod))
}

type LayerFn = fn(&mut Tape, &ParamStore) -> dcg::Result<Var>;

fn layer_ops() -> Vec<(&'static str, LayerFn)> {
    fn p(t: &mut Tape, s: &ParamStore, name: &str) -> Var {
        t.param(s, name).unwrap()
    }
    vec![
        ("affine", |t, s| {
            let (x, w, b) = (p(t, s, "X"), p(t, s, "W"), p(t, s, "b"));
            t.affine(x, w, b)
        }),
        ("matmul", |t, s| {
            let (x, w) = (p(t, s, "X"), p(t, s, "W"));
            t.matmul(x, w)
        }),
        ("gru", |t, s| {
            let g: GruVars = t.gru_params(s, "gru")?;
            let (x, h) = (p(t, s, "X"), p(t, s, "H"));
            t.gru(x, h, g)
        }),
        ("relu", |t, s| {
            let x = p(t, s, "X");
            Ok(t.relu(x))
        }),
        ("sigmoid", |t, s| {
            let x = p(t, s, "X");
            Ok(t.sigmoid(x))
        }),
        ("tanh", |t, s| {
            let x = p(t, s, "X");
            Ok(t.tanh(x))
        }),
        ("scale", |t, s| {
            let x = p(t, s, "X");
            Ok(t.scale(x, -1.7))
        }),
        ("square", |t, s| {
            let x = p(t, s, "X");
            Ok(t.square(x))
        }),
        ("add", |t, s| {
            let (x, y) = (p(t, s, "X"), p(t, s, "Y"));
            t.add(x, y)
        }),
        ("sub", |t, s| {
            let (x, y) = (p(t, s, "X"), p(t, s, "Y"));
            t.sub(x, y)
        }),
        ("mul", |t, s| {
            let (x, y) = (p(t, s, "X"), p(t, s, "Y"));
            t.mul(x, y)
        }),
        ("slice_rows", |t, s| {
            let x = p(t, s, "X");
            t.slice_rows(x, 1, 2)
        }),
        ("gather_rows", |t, s| {
            let x = p(t, s, "X");
            t.gather_rows(x, vec![2, 0, 2, 1])
        }),
        ("scatter_rows", |t, s| {
            let x = p(t, s, "X");
            t.scatter_rows(x, vec![4, 0, 2], 5)
        }),
        ("concat_rows", |t, s| {
            let (x, y) = (p(t, s, "X"), p(t, s, "Y"));
            t.concat_rows(&[x, y, x])
        }),
        ("concat_cols", |t, s| {
            let (x, h) = (p(t, s, "X"), p(t, s, "H"));
            t.concat_cols(&[x, h])
        }),
        ("gather_cols", |t, s| {
            let x = p(t, s, "X");
            t.gather_cols(x, vec![3, 3, 0, 1, 2, 0])
        }),
        ("reshape", |t, s| {
            let x = p(t, s, "X");
            let r = t.reshape(x, &[4, 3])?;
            let sq = t.square(r);
            t.reshape(sq, &[6, 2])
        }),
        ("sum_rows", |t, s| {
            let x = p(t, s, "X");
            Ok(t.sum_rows(x))
        }),
        ("sum_cols", |t, s| {
            let x = p(t, s, "X");
            Ok(t.sum_cols(x))
        }),
        ("sum", |t, s| {
            let x = p(t, s, "X");
            let sq = t.square(x);
            Ok(t.sum(sq))
        }),
    ]
}

fn layer_store(rng: &mut ChaCha8Rng) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("X", uniform(rng, &[3, 4]));
    s.insert("Y", uniform(rng, &[3, 4]));
    s.insert("W", uniform(rng, &[4, 5]));
    s.insert("b", uniform(rng, &[5]));
    s.insert("H", uniform(rng, &[3, 5]));
    for g in ["z", "r", "h"] {
        s.insert(format!("gru.W_{g}"), uniform(rng, &[4, 5]));
        s.insert(format!("gru.U_{g}"), uniform(rng, &[5, 5]));
        s.insert(format!("gru.b_{g}"), uniform(rng, &[5]));
    }
    s
}

fn fd_model_cfg(algo: Algo, rank: usize, n_actions: usize) -> ModelConfig {
    ModelConfig {
        algo,
        n_agents: 3,
        n_actions,
        obs_dim: 5,
        state_dim: 6,
        hidden: 8,
        rank,
        topology: Topology::Full,
        shared: true,
        k_passes: 4,
        msg_norm: true,
    }
}

fn random_episode(rng: &mut impl Rng, cfg: &ModelConfig, len: usize) -> Episode {
    let (n, a) = (cfg.n_agents, cfg.n_actions);
    let state_dim = if cfg.algo == Algo::DcgS { cfg.state_dim } else { 0 };
    let mut ep = Episode::new(n, cfg.obs_dim, state_dim);
    for t in 0..=len {
        let obs: Vec<Vec<f64>> = (0..n).map(|_| (0..cfg.obs_dim).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        let avail = random_masks(rng, n, a, 1);
        let state: Vec<f64> = (0..state_dim).map(|_| rng.gen_range(0.0..1.0)).collect();
        ep.push_observation(&obs, &avail, (state_dim > 0).then_some(&state[..]));
        if t < len {
            let acts: Vec<usize> =
                avail.iter().map(|m| *(0..a).filter(|&k| m[k]).collect::<Vec<_>>().choose(rng).unwrap()).collect();
            ep.push_transition(&acts, rng.gen_range(-1.0..1.0));
        }
    }
    ep.terminal = true;
    ep
}

/// Smallest distance of any ReLU input to its kink, over the encoder rows
/// `inputs` and the state rows `states`.
fn relu_margin(model: &Model, inputs: &[Tensor], states: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let p = model.params();
    let mut pre = Vec::new();
    for x in inputs {
        let x = tape.constant(x.clone());
        let w = tape.param(p, "encoder.fc.W").unwrap();
        let b = tape.param(p, "encoder.fc.b").unwrap();
        pre.push(tape.affine(x, w, b).unwrap());
    }
    if model.config().algo == Algo::DcgS {
        for s in states {
            let s = tape.constant(s.clone());
            let w = tape.param(p, "bias.fc1.W").unwrap();
            let b = tape.param(p, "bias.fc1.b").unwrap();
            pre.push(tape.affine(s, w, b).unwrap());
        }
    }
    pre.iter().flat_map(|&v| tape.value(v).data().to_vec()).map(f64::abs).fold(f64::INFINITY, f64::min)
}

/// Encoder inputs and states a batch feeds the model at every step.
fn batch_inputs(model: &Model, eps: &[Episode]) -> (Vec<Tensor>, Vec<Tensor>) {
    let cfg = model.config();
    let (mut xs, mut ss) = (Vec::new(), Vec::new());
    for ep in eps {
        for t in 0..=ep.len {
            let mut row = vec![0.0; cfg.input_dim()];
            for i in 0..cfg.n_agents {
                let obs: Vec<f64> = ep.obs_at(t, i).iter().map(|&v| f64::from(v)).collect();
                model.input_row(&mut row, &obs, (t > 0).then(|| ep.action(t - 1, i)), i);
                xs.push(Tensor::new(vec![1, row.len()], row.clone()).unwrap());
            }
            if ep.has_states() {
                let s: Vec<f64> = ep.state_at(t).iter().map(|&v| f64::from(v)).collect();
                ss.push(Tensor::new(vec![1, s.len()], s).unwrap());
            }
        }
    }
    (xs, ss)
}

/// Squared error of a model unrolled over fixed inputs, as a sum over steps.
struct Unroll {
    inputs: Vec<Tensor>,
    states: Vec<Tensor>,
    actions: Vec<Vec<usize>>,
}

impl Unroll {
    const M: usize = 2;

    fn q_values(&self, md: &Model, t: &mut Tape) -> dcg::Result<Vec<Var>> {
        let cfg = md.config();
        let mut hv = t.constant(Tensor::zeros(&[cfg.n_agents * Self::M, cfg.hidden]));
        let mut out = Vec::new();
        for k in 0..self.inputs.len() {
            let x = t.constant(self.inputs[k].clone());
            hv = md.encode_step(t, hv, x, Self::M)?;
            let st = (cfg.algo == Algo::DcgS).then(|| t.constant(self.states[k].clone()));
            let heads = md.heads(t, hv, Self::M, st)?;
            out.push(md.chosen_q(t, &heads, &self.actions[k])?);
        }
        Ok(out)
    }

    fn loss(&self, md: &Model, t: &mut Tape, y: &[Tensor]) -> dcg::Result<Var> {
        let qs = self.q_values(md, t)?;
        let mut total = None;
        for (q, y) in qs.into_iter().zip(y) {
            let target = t.constant(y.clone());
            let d = t.sub(q, target)?;
            let sq = t.square(d);
            let step = t.sum(sq);
            total = Some(match total {
                None => step,
                Some(acc) => t.add(acc, step)?,
            });
        }
        let count: usize = y.iter().map(Tensor::len).sum();
        Ok(t.scale(total.expect("at least one step"), 1.0 / count as f64))
    }
}

/// Moves every entry by up to ±0.1.
fn jitter(rng: &mut impl Rng, t: &Tensor) -> Tensor {
    let d = t.data().iter().map(|&v| v + rng.gen_range(-0.1..0.1)).collect();
    Tensor::new(t.shape().to_vec(), d).unwrap()
}

// Instances are redrawn until every ReLU input is at least 1e-4 from its kink,
// and regression targets sit within ±0.1 of the initial predictions. With
// targets far from the predictions the loss value is large next to its
// smallest gradient entries and central differences drown in rounding error.
fn criterion_3() -> Verdict {
    let h = 1e-5;
    let margin = 1e-4;
    let mut worst = ("", 0.0f64);
    let mut track = |name: &'static str, err: f64| {
        if err > worst.1 || !err.is_finite() {
            worst = (name, err);
        }
    };
    let mut redrawn = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        for (name, op) in layer_ops() {
            let mut store = layer_store(&mut rng);
            let mut probe = Tape::new();
            let out = op(&mut probe, &store).map_err(|e| format!("{name}: {e}"))?;
            let c = uniform(&mut rng, probe.value(out).shape());
            let err = finite_diff_check(&mut store, h, 64, &mut rng, |t, s| {
                let y = op(t, s)?;
                contract(t, y, &c)
            })
            .map_err(|e| format!("{name}: {e}"))?;
            track(name, err);
        }
        let models = [
            ("dcg", Algo::Dcg, 0),
            ("dcg low-rank", Algo::Dcg, 2),
            ("dcg-s", Algo::DcgS, 0),
            ("vdn", Algo::Vdn, 0),
            ("iql", Algo::Iql, 0),
            ("lrq", Algo::Lrq, 2),
        ];
        for (name, algo, rank) in models {
            // model API on its own: two episodes unrolled for three steps
            let cfg = fd_model_cfg(algo, rank, 4);
            let n = cfg.n_agents;
            let (mut model, unroll) = loop {
                let model = Model::new(cfg.clone(), &mut rng).unwrap();
                let u = Unroll {
                    inputs: (0..3).map(|_| uniform(&mut rng, &[n * Unroll::M, cfg.input_dim()])).collect(),
                    states: (0..3).map(|_| uniform(&mut rng, &[Unroll::M, cfg.state_dim])).collect(),
                    actions: (0..3).map(|_| (0..n * Unroll::M).map(|_| rng.gen_range(0..4)).collect()).collect(),
                };
                if relu_margin(&model, &u.inputs, &u.states) >= margin {
                    break (model, u);
                }
                redrawn += 1;
            };
            let mut tape = Tape::new();
            let q0 = unroll.q_values(&model, &mut tape).unwrap();
            let y: Vec<Tensor> = q0.iter().map(|&q| jitter(&mut rng, tape.value(q))).collect();
            let skeleton = model.clone();
            let err = finite_diff_check(model.params_mut(), h, 8, &mut rng, |t, s| {
                unroll.loss(&skeleton.with_params(s.clone())?, t, &y)
            })
            .map_err(|e| format!("{name}: {e}"))?;
            track(name, err);

            // the same model inside the training loss, on recorded episodes
            let cfg = fd_model_cfg(algo, rank, N_ACTIONS);
            let (mut model, eps) = loop {
                let model = Model::new(cfg.clone(), &mut rng).unwrap();
                let eps = [random_episode(&mut rng, &cfg, 3), random_episode(&mut rng, &cfg, 2)];
                let (xs, ss) = batch_inputs(&model, &eps);
                if relu_margin(&model, &xs, &ss) >= margin {
                    break (model, eps);
                }
                redrawn += 1;
            };
            let batch = Batch::new(eps.iter().collect()).unwrap();
            let rows = model.value_rows(2);
            let mut w = vec![0.0; rows * 3];
            for r in 0..rows {
                let len = batch.episodes()[r % 2].len;
                for t in 0..len {
                    w[r * 3 + t] = 1.0 / (rows * len) as f64;
                }
            }
            let mut tape = Tape::new();
            let fwd = forward(&model, &mut tape, &batch).unwrap();
            let q0 = executed_q(&model, &mut tape, &fwd, &batch).unwrap();
            let targets = Targets {
                y: jitter(&mut rng, tape.value(q0)),
                weights: Tensor::new(vec![rows, 3], w).unwrap(),
            };
            let skeleton = model.clone();
            let err = finite_diff_check(model.params_mut(), h, 8, &mut rng, |t, s| {
                let m = skeleton.with_params(s.clone())?;
                let fwd = forward(&m, t, &batch)?;
                let q = executed_q(&m, t, &fwd, &batch)?;
                dqn_loss(t, q, &targets)
            })
            .map_err(|e| format!("{name} training loss: {e}"))?;
            track(name, err);
        }
    }
    check(
        worst.1 < 1e-4,
        format!(
            "21 layer types, 6 model losses and their training losses over 20 seeds, worst relative error {:.2e} ({}), {redrawn} instances redrawn off a ReLU kink",
            worst.1, worst.0
        ),
    )
}

fn heads_for(model: &Model, tape: &mut Tape, h: &Tensor) -> dcg::models::StepHeads {
    let hv = tape.constant(h.clone());
    model.heads(tape, hv, h.rows() / model.config().n_agents, None).unwrap()
}

fn graph_cfg(algo: Algo, n: usize, a: usize, topology: Topology, rank: usize) -> ModelConfig {
    ModelConfig {
        algo,
        n_agents: n,
        n_actions: a,
        obs_dim: 4,
        state_dim: 4,
        hidden: 16,
        rank,
        topology,
        shared: true,
        k_passes: 8,
        msg_norm: true,
    }
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut model = None;
    for inst in 0..1000 {
        if inst % 50 == 0 {
            let n = 2 + (inst / 50) % 5;
            model = Some(Model::new(graph_cfg(Algo::Dcg, n, N_ACTIONS, Topology::Empty, 0), &mut rng).unwrap());
        }
        let model = model.as_ref().unwrap();
        let n = model.config().n_agents;
        let h = uniform(&mut rng, &[n, 16]);
        let avail = random_masks(&mut rng, n, N_ACTIONS, 1);
        let mut tape = Tape::new();
        let heads = heads_for(model, &mut tape, &h);
        let got = model.greedy(&tape, &heads, &avail, &mut rng).unwrap();
        let u = tape.value(heads.utilities.unwrap());
        for i in 0..n {
            let mut best = None::<(usize, f64)>;
            for k in 0..N_ACTIONS {
                if avail[i][k] && best.map_or(true, |(_, v)| u.get2(i, k) > v) {
                    best = Some((k, u.get2(i, k)));
                }
            }
            if got[i] != best.unwrap().0 {
                return Err(format!("instance {inst}: agent {i} picked {} not {}", got[i], best.unwrap().0));
            }
        }
    }
    Ok("1000 instances match the per-agent masked argmax".into())
}

fn criterion_5() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    for inst in 0..200 {
        let n = 3 + inst % 4;
        let rank = if inst % 2 == 0 { 0 } else { 2 };
        let model = Model::new(graph_cfg(Algo::Dcg, n, N_ACTIONS, Topology::Full, rank), &mut rng).unwrap();
        let h = uniform(&mut rng, &[n, 16]);
        let avail = random_masks(&mut rng, n, N_ACTIONS, 1);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut hp = Vec::with_capacity(n * 16);
        for &src in &perm {
            hp.extend_from_slice(h.row(src));
        }
        let hp = Tensor::new(vec![n, 16], hp).unwrap();
        let avail_p: Vec<Vec<bool>> = perm.iter().map(|&src| avail[src].clone()).collect();

        let mut tape = Tape::new();
        let heads = heads_for(&model, &mut tape, &h);
        let heads_p = heads_for(&model, &mut tape, &hp);
        for _ in 0..5 {
            let a: Vec<usize> = (0..n).map(|_| rng.gen_range(0..N_ACTIONS)).collect();
            let ap: Vec<usize> = perm.iter().map(|&src| a[src]).collect();
            let q = model.chosen_q(&mut tape, &heads, &a).unwrap();
            let qp = model.chosen_q(&mut tape, &heads_p, &ap).unwrap();
            let d = (tape.value(q).data()[0] - tape.value(qp).data()[0]).abs();
            worst = worst.max(d);
            if d > 1e-6 {
                return Err(format!("instance {inst}: Q differs by {d:e} under {perm:?}"));
            }
        }
        let g = model.greedy(&tape, &heads, &avail, &mut rng).unwrap();
        let gp = model.greedy(&tape, &heads_p, &avail_p, &mut rng).unwrap();
        let mapped: Vec<usize> = perm.iter().map(|&src| g[src]).collect();
        if gp != mapped {
            return Err(format!("instance {inst}: greedy {gp:?} on the permuted agents, expected {mapped:?}"));
        }
    }
    Ok(format!("200 instances, worst Q difference {worst:.1e}, greedy actions permute"))
}

const CLIMBING: [[f64; 3]; 3] = [[11.0, -30.0, 0.0], [-30.0, 7.0, 6.0], [0.0, 0.0, 5.0]];

/// Fits `algo` to the climbing matrix with RMSprop and returns the final MSE.
fn fit_climbing(algo: Algo, steps: usize, stop_below: f64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        obs_dim: 1,
        hidden: 32,
        ..graph_cfg(algo, 2, 3, Topology::Full, 0)
    };
    let mut model = Model::new(cfg, &mut rng).unwrap();
    let m = 9;
    let w = model.config().input_dim();
    let mut input = vec![0.0; 2 * m * w];
    for (r, row) in input.chunks_mut(w).enumerate() {
        model.input_row(row, &[0.0], None, r / m);
    }
    let input = Tensor::new(vec![2 * m, w], input).unwrap();
    let actions: Vec<usize> = (0..m).map(|x| x / 3).chain((0..m).map(|x| x % 3)).collect();
    let target = Tensor::new(vec![m, 1], (0..m).map(|x| CLIMBING[x / 3][x % 3]).collect()).unwrap();
    let mut optim = RmsProp::new(model.params(), 5e-3, 0.99, 1e-5);
    let mut mse = f64::INFINITY;
    for step in 0..steps {
        optim.lr = 5e-3 * 0.5f64.powi((step / 2500) as i32);
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let h0 = tape.constant(Tensor::zeros(&[2 * m, 32]));
        let h = model.encode_step(&mut tape, h0, x, m).unwrap();
        let heads = model.heads(&mut tape, h, m, None).unwrap();
        let q = model.chosen_q(&mut tape, &heads, &actions).unwrap();
        let y = tape.constant(target.clone());
        let d = tape.sub(q, y).unwrap();
        let sq = tape.square(d);
        let s = tape.sum(sq);
        let loss = tape.scale(s, 1.0 / m as f64);
        mse = tape.value(loss).data()[0];
        if mse < stop_below {
            break;
        }
        model.params_mut().zero_grad();
        tape.backward(loss, model.params_mut()).unwrap();
        optim.step(model.params_mut()).unwrap();
    }
    mse
}

/// Best MSE any `Q = f₁(a₁) + f₂(a₂)` can reach on the climbing matrix.
fn additive_oracle_mse() -> f64 {
    let r = CLIMBING;
    let grand: f64 = r.iter().flatten().sum::<f64>() / 9.0;
    let row: Vec<f64> = r.iter().map(|x| x.iter().sum::<f64>() / 3.0).collect();
    let col: Vec<f64> = (0..3).map(|j| r.iter().map(|x| x[j]).sum::<f64>() / 3.0).collect();
    let mut s = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            s += (r[i][j] - row[i] - col[j] + grand).powi(2);
        }
    }
    s / 9.0
}

fn criterion_6() -> Verdict {
    let start = Instant::now();
    let dcg = fit_climbing(Algo::Dcg, 20_000, 1e-4, 6);
    let vdn = fit_climbing(Algo::Vdn, 6_000, 0.0, 6);
    let oracle = additive_oracle_mse();
    let secs = start.elapsed().as_secs_f64();
    let gap = (vdn - oracle) / oracle;
    check(
        dcg < 1e-3 && gap.abs() <= 0.05 && secs < 60.0,
        format!("DCG MSE {dcg:.2e}, VDN MSE {vdn:.4} vs additive optimum {oracle:.4} ({:+.2}%), {secs:.1}s", gap * 100.0),
    )
}

fn singular_values(rows: usize, cols: usize, data: &[f64]) -> Vec<f64> {
    let m = DMatrix::from_row_slice(rows, cols, data);
    let mut s: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

fn criterion_7() -> Verdict {
    let a = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for k in 1..=3usize {
        for _ in 0..20 {
            let model = Model::new(graph_cfg(Algo::Dcg, 3, a, Topology::Full, k), &mut rng).unwrap();
            let h = uniform(&mut rng, &[3, 16]);
            let mut tape = Tape::new();
            let heads = heads_for(&model, &mut tape, &h);
            let ag = model.annotate(&tape, &heads, 0, &vec![vec![true; a]; 3], model.graph()).unwrap();
            for e in 0..model.graph().n_edges() {
                let m = &ag.payoffs().data()[e * a * a..(e + 1) * a * a];
                let s = singular_values(a, a, m);
                let tail = s[(2 * k).min(a)..].iter().copied().fold(0.0, f64::max) / s[0];
                worst = worst.max(tail);
                checked += 1;
            }
            // one direction alone has rank at most K
            let f_hat = uniform(&mut rng, &[a, k]);
            let f_bar = uniform(&mut rng, &[a, k]);
            let single = dcg::models::low_rank_payoff(&f_hat, &f_bar).unwrap();
            let s = singular_values(a, a, single.data());
            worst = worst.max(s[k..].iter().copied().fold(0.0, f64::max) / s[0]);
        }
    }
    check(worst < 1e-9, format!("{checked} edge payoffs for K=1..3, largest tail ratio {worst:.1e}"))
}

fn scripted(task: Task, p: f64, agents: &[(usize, usize)], prey: &[(usize, usize)], coin: f64) -> Env {
    let cfg = EnvConfig {
        grid_w: 5,
        grid_h: 5,
        n_agents: agents.len(),
        n_prey: prey.len(),
        punishment: p,
        ..EnvConfig::new(task)
    };
    let state = EnvState {
        agents: agents.iter().map(|&(x, y)| Entity::at(x, y)).collect(),
        prey: prey.iter().map(|&(x, y)| Entity::at(x, y)).collect(),
        t: 0,
        corner: (task == Task::Ghost).then_some(Corner(0)),
        coin,
    };
    Env::from_state(cfg, state).unwrap()
}

fn alive(env: &Env) -> usize {
    let s = env.state();
    s.agents.iter().chain(&s.prey).filter(|e| e.alive).count()
}

fn criterion_8() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut notes = Vec::new();

    // two agents flank the prey at (2, 2); a third agent stays away
    let mut env = scripted(Task::Coop, -2.0, &[(1, 2), (3, 2), (0, 4)], &[(2, 2), (4, 0)], 1.0);
    let before = alive(&env);
    let r = env.step(&[CATCH, CATCH, STAY], &mut rng).unwrap();
    if r.reward != 10.0 || before - alive(&env) != 3 {
        return Err(format!("joint capture gave {} and removed {}", r.reward, before - alive(&env)));
    }
    notes.push("capture +10, 3 removed");

    let mut env = scripted(Task::Coop, -2.0, &[(1, 2), (4, 4)], &[(2, 2)], 1.0);
    let r = env.step(&[CATCH, STAY], &mut rng).unwrap();
    if r.reward != -2.0 || alive(&env) != 3 {
        return Err(format!("lone catch gave {} with {} alive", r.reward, alive(&env)));
    }
    notes.push("lone catch p");

    let (mut env, _) = Env::new(EnvConfig::new(Task::Coop), &mut rng).unwrap();
    let mut steps = 0;
    loop {
        let r = env.step(&vec![STAY; 8], &mut rng).unwrap();
        steps += 1;
        if r.terminal || r.truncated {
            if !r.truncated || steps != 200 {
                return Err(format!("episode ended after {steps} steps (truncated {})", r.truncated));
            }
            break;
        }
    }
    if env.step(&vec![STAY; 8], &mut rng).is_ok() {
        return Err("stepping past the limit was allowed".into());
    }
    notes.push("cap 200");

    for coin in [1.0, -1.0] {
        let mut env = scripted(Task::Ghost, 0.0, &[(1, 2), (4, 4)], &[(2, 2), (0, 4)], coin);
        let r = env.step(&[CATCH, STAY], &mut rng).unwrap();
        if r.reward != coin {
            return Err(format!("ghost capture under coin {coin} gave {}", r.reward));
        }
    }
    let (mut env, _) = Env::new(EnvConfig::new(Task::Ghost), &mut rng).unwrap();
    let mut seen = [false; 2];
    for _ in 0..100 {
        let c = env.state().coin;
        if c != 1.0 && c != -1.0 {
            return Err(format!("coin took value {c}"));
        }
        seen[usize::from(c > 0.0)] = true;
        if env.step(&vec![STAY; 8], &mut rng).unwrap().truncated {
            break;
        }
    }
    if seen != [true, true] {
        return Err("coin never took both values".into());
    }
    notes.push("ghost coin ±1");

    for corner in 0..4 {
        let cfg = EnvConfig::new(Task::Ghost);
        let (w, h) = (cfg.grid_w, cfg.grid_h);
        let state = EnvState {
            agents: (0..8).map(|i| Entity::at(i + 1, 5)).collect(),
            prey: (0..8).map(|i| Entity::at(i + 1, 6)).collect(),
            t: 0,
            corner: Some(Corner(corner)),
            coin: -1.0,
        };
        let env = Env::from_state(cfg, state).unwrap();
        let cells: Vec<(usize, usize)> =
            (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).filter(|&(x, y)| env.in_indicator(x, y)).collect();
        let xs: Vec<usize> = cells.iter().map(|c| c.0).collect();
        let ys: Vec<usize> = cells.iter().map(|c| c.1).collect();
        let spans = |v: &[usize], lim: usize| {
            let (lo, hi) = (*v.iter().min().unwrap(), *v.iter().max().unwrap());
            hi - lo == 2 && (lo == 0 || hi == lim - 1)
        };
        if cells.len() != 9 || !spans(&xs, w) || !spans(&ys, h) {
            return Err(format!("corner {corner} indicator covers {cells:?}"));
        }
    }
    notes.push("indicator 9 cells");

    // the indicator is what makes the coin visible
    let env = scripted(Task::Ghost, 0.0, &[(1, 1), (4, 4)], &[(2, 4)], -1.0);
    let win = env.config().obs_window;
    let obs = env.observe_all();
    if obs[0][2 * win * win] != -1.0 || obs[1][2 * win * win] != 0.0 {
        return Err("coin visibility does not follow the indicator".into());
    }
    Ok(notes.join(", "))
}

fn desk_root() -> PathBuf {
    std::env::var_os("DCG_DESK_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../target/desk"))
}

fn desk_config(algo: Algo, p: f64) -> ExperimentConfig {
    let over = json!({
        "algo": algo.name(), "topology": "full", "p": p, "seeds": [0, 1, 2],
        "total_env_steps": 300000, "grid_w": 7, "grid_h": 7, "n_agents": 4, "n_prey": 4,
        "name": format!("desk-{}-p{}", algo.name(), p), "out": desk_root(),
        "checkpoint_every": 50000, "wall_time": true
    });
    let Value::Object(over) = over else { unreachable!() };
    parse_config(None, &over).unwrap()
}

/// Seed-averaged test return at each evaluation step.
fn seed_mean_curve(cfg: &ExperimentConfig) -> Option<Vec<(u64, f64)>> {
    let curves: Vec<Vec<MetricsRow>> = cfg
        .seeds
        .iter()
        .map(|&s| read_metrics(&seed_dir(cfg, s).join(METRICS_FILE)).ok())
        .collect::<Option<_>>()?;
    let len = curves.iter().map(Vec::len).min()?;
    if len == 0 || curves.iter().any(|c| c.last().unwrap().step < cfg.total_env_steps) {
        return None;
    }
    Some(
        (0..len)
            .map(|k| (curves[0][k].step, curves.iter().map(|c| c[k].mean_test_return).sum::<f64>() / curves.len() as f64))
            .collect(),
    )
}

fn criterion_9(train: bool) -> Verdict {
    let mut curves = BTreeMap::new();
    for (algo, p) in [(Algo::Dcg, 0.0), (Algo::Vdn, 0.0), (Algo::Dcg, -2.0), (Algo::Vdn, -2.0)] {
        let cfg = desk_config(algo, p);
        if train {
            let opts = RunOptions { resume: true, halt_after_checkpoint: None };
            for o in run_experiment(&cfg, opts).map_err(|e| e.to_string())? {
                if let SeedOutcome::Failed { seed, error } = o {
                    return Err(format!("{} seed {seed} failed: {error}", cfg.name));
                }
            }
        }
        let c = seed_mean_curve(&cfg).ok_or_else(|| format!("no finished runs under {}", experiment_dir(&cfg).display()))?;
        curves.insert((algo.name(), p as i64), c);
    }
    let reach = |k: (&str, i64)| curves[&k].iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let last5 = |k: (&str, i64)| {
        let c = &curves[&k];
        c[c.len() - 5..].iter().map(|c| c.1).sum::<f64>() / 5.0
    };
    let quartiles = |k: (&str, i64)| {
        let c = &curves[&k];
        let q = c.len() / 4;
        let mean = |s: &[(u64, f64)]| s.iter().map(|c| c.1).sum::<f64>() / s.len() as f64;
        (mean(&c[..q]), mean(&c[c.len() - q..]))
    };
    let (dcg0, vdn0) = (reach(("dcg", 0)), reach(("vdn", 0)));
    let (dcg2, vdn2) = (last5(("dcg", -2)), last5(("vdn", -2)));
    let (vq1, vq4) = quartiles(("vdn", 0));
    let ceiling = desk_config(Algo::Dcg, 0.0).env_config().max_return();
    let a = dcg0 >= 30.0 && vdn0 >= 30.0;
    let b = vdn2 <= 2.0 && dcg2 >= 20.0;
    let smoke = vq4 > vq1;
    check(
        a && b && smoke,
        format!(
            "p=0 reach DCG {dcg0:.2} VDN {vdn0:.2} (need ≥30, attainable max {ceiling}) [{}]; \
             p=-2 final DCG {dcg2:.2} (need ≥20) VDN {vdn2:.2} (need ≤2) [{}]; \
             VDN quartiles {vq1:.2} → {vq4:.2} [{}]",
            verdict(a),
            verdict(b),
            verdict(smoke)
        ),
    )
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "fail"
    }
}

fn small_job(out: &Path) -> ExperimentConfig {
    let over = json!({
        "name": "det", "out": out, "seeds": [7], "grid_w": 5, "grid_h": 5, "n_agents": 3, "n_prey": 2,
        "obs_window": 3, "episode_limit": 50, "hidden": 16, "batch_size": 8, "buffer_size": 64,
        "eval_interval_steps": 500, "eval_episodes": 4, "total_env_steps": 5000, "checkpoint_every": 2500,
        "eps_anneal_steps": 2000, "target_update_episodes": 10
    });
    let Value::Object(over) = over else { unreachable!() };
    parse_config(None, &over).unwrap()
}

fn run_and_read(cfg: &ExperimentConfig, opts: RunOptions) -> Result<(Vec<u8>, Vec<u8>), String> {
    let outcomes = run_experiment(cfg, opts).map_err(|e| e.to_string())?;
    if let Some(SeedOutcome::Failed { error, .. }) = outcomes.iter().find(|o| o.is_failure()) {
        return Err(error.to_string());
    }
    let d = seed_dir(cfg, cfg.seeds[0]);
    let metrics = fs::read(d.join(METRICS_FILE)).map_err(|e| e.to_string())?;
    let params = fs::read(d.join(CHECKPOINT_DIR).join("params.bin")).map_err(|e| e.to_string())?;
    Ok((metrics, params))
}

fn probe_q(learner: &Learner) -> Vec<f64> {
    let eps: Vec<&Episode> = learner.buffer.iter().take(4).collect();
    let batch = Batch::new(eps).unwrap();
    let mut tape = Tape::new();
    let fwd = forward(&learner.model, &mut tape, &batch).unwrap();
    let q = executed_q(&learner.model, &mut tape, &fwd, &batch).unwrap();
    tape.value(q).data().to_vec()
}

fn criterion_10() -> Verdict {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mk = |sub: &str| {
        let mut c = small_job(&root.path().join(sub));
        c.out = root.path().join(sub);
        c
    };
    let first = run_and_read(&mk("a"), RunOptions::default())?;
    let second = run_and_read(&mk("b"), RunOptions::default())?;
    if first != second {
        return Err("two runs of the same config differ".into());
    }
    let n_rows = String::from_utf8_lossy(&first.0).lines().count() - 1;

    let echoed = read_config_file(&experiment_dir(&mk("a")).join(CONFIG_FILE)).map_err(|e| e.to_string())?;
    let mut over = Map::new();
    over.insert("out".into(), json!(root.path().join("c")));
    let replay = parse_config(Some(&echoed), &over).map_err(|e| e.to_string())?;
    if run_and_read(&replay, RunOptions::default())? != first {
        return Err("re-running the echoed config.json gave different results".into());
    }

    let halted = mk("d");
    let outcomes = run_experiment(&halted, RunOptions { resume: false, halt_after_checkpoint: Some(2500) })
        .map_err(|e| e.to_string())?;
    match outcomes.first() {
        Some(SeedOutcome::Halted { at_step, .. }) if *at_step >= 2500 && *at_step < 5000 => {}
        other => return Err(format!("expected a halt after the 2500-step checkpoint, got {other:?}")),
    }
    let resumed = run_and_read(&halted, RunOptions { resume: true, halt_after_checkpoint: None })?;
    if resumed != first {
        return Err("halting at 2500 and resuming changed metrics or parameters".into());
    }

    let cfg = mk("e");
    let mut learner = Learner::new(cfg.model_config(), cfg.env_config(), cfg.train_config(), 3).map_err(|e| e.to_string())?;
    while learner.updates < 5 {
        learner.train_iteration().map_err(|e| e.to_string())?;
    }
    let dir = root.path().join("probe");
    save_learner(&learner, &dir, &[]).map_err(|e| e.to_string())?;
    let loaded = load_learner(&dir, cfg.model_config(), cfg.env_config()).map_err(|e| e.to_string())?;
    let (q0, q1) = (probe_q(&learner), probe_q(&loaded));
    if q0 != q1 {
        return Err("checkpoint round trip changed q-values".into());
    }
    Ok(format!(
        "{n_rows} eval rows byte-identical across reruns, echoed config and halt+resume; {} probe q-values identical",
        q0.len()
    ))
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let desk = args.iter().any(|a| a == "--desk" || a == "--ignored" || a == "--include-ignored");
    // cargo's harness flags (--list, --nocapture, filters) are accepted and ignored
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }

    let criteria: Vec<(&str, fn() -> Verdict)> = vec![
        ("1 max-plus is exact on trees", criterion_1),
        ("2 anytime max-plus on cyclic graphs", criterion_2),
        ("3 gradients match finite differences", criterion_3),
        ("4 edgeless DCG acts like independent argmax", criterion_4),
        ("5 shared-parameter DCG is permutation invariant", criterion_5),
        ("6 climbing-matrix fit", criterion_6),
        ("7 low-rank payoff rank bound", criterion_7),
        ("8 scripted environment rules", criterion_8),
        ("10 determinism and resume", criterion_10),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match v {
            Ok(d) => println!("criterion {name}: PASS ({d}) [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {name}: FAIL ({d}) [{secs:.1}s]");
            }
        }
    }

    let name = "9 desk-scale training thresholds";
    let v = catch_unwind(AssertUnwindSafe(|| criterion_9(desk))).unwrap_or_else(|_| Err("panicked".into()));
    let mode = if desk { "enforced" } else { "report only, enforce with --desk" };
    match v {
        Ok(d) => println!("criterion {name}: PASS ({d}) [{mode}]"),
        Err(d) => {
            if desk {
                failed += 1;
            }
            println!("criterion {name}: FAIL ({d}) [{mode}]");
        }
    }

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
