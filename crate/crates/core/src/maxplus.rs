//! Maximisation of factored Q-functions over coordination graphs.
//!
//! The joint value of an [`AnnotatedGraph`] is
//! `(1/|V|)·Σᵢ f_v[i, aᵢ] + (1/|E|)·Σ₍ᵢ,ⱼ₎ f_e[e, aᵢ, aⱼ]`. Greedy selection runs
//! synchronous max-plus message passing and keeps the best joint action seen
//! after every pass, so the result never gets worse with more passes.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::CoordinationGraph;
use crate::numgrad::Tensor;

/// Utility assigned to unavailable actions. Finite so that message
/// arithmetic never evaluates `−∞ − (−∞)`.
pub const NEG_LARGE: f64 = -1e10;

pub const DEFAULT_PASSES: usize = 8;

pub const DEFAULT_ENUMERATION_CAP: u128 = 1_000_000;

/// One action index per agent.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct JointAction(pub Vec<usize>);

impl JointAction {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<usize>> for JointAction {
    fn from(v: Vec<usize>) -> Self {
        JointAction(v)
    }
}

/// Utility and payoff tensors for one coordination graph and timestep.
#[derive(Debug, Clone)]
pub struct AnnotatedGraph<'g> {
    graph: &'g CoordinationGraph,
    n_actions: usize,
    /// `[n × A]`, unavailable entries hold [`NEG_LARGE`].
    utilities: Tensor,
    /// `[|E| × A × A]`, rows indexed by the lower-index agent's action.
    payoffs: Tensor,
    avail: Vec<Vec<bool>>,
}

impl<'g> AnnotatedGraph<'g> {
    /// Checks shapes and overwrites unavailable utilities with [`NEG_LARGE`].
    pub fn new(
        graph: &'g CoordinationGraph,
        mut utilities: Tensor,
        payoffs: Tensor,
        avail: Vec<Vec<bool>>,
    ) -> Result<Self> {
        let n = graph.n_agents();
        let a = utilities.cols();
        if utilities.rows() != n || utilities.shape().len() != 2 {
            return Err(Error::dim(
                "annotated graph",
                format!("utilities {:?} for {n} agents", utilities.shape()),
            ));
        }
        if payoffs.shape() != [graph.n_edges(), a, a] {
            return Err(Error::dim(
                "annotated graph",
                format!("payoffs {:?}, expected [{}, {a}, {a}]", payoffs.shape(), graph.n_edges()),
            ));
        }
        if avail.len() != n || avail.iter().any(|m| m.len() != a) {
            return Err(Error::dim("annotated graph", "availability mask shape"));
        }
        for (i, mask) in avail.iter().enumerate() {
            for (act, &ok) in mask.iter().enumerate() {
                if !ok {
                    utilities.set2(i, act, NEG_LARGE);
                }
            }
        }
        Ok(Self {
            graph,
            n_actions: a,
            utilities,
            payoffs,
            avail,
        })
    }

    pub fn graph(&self) -> &CoordinationGraph {
        self.graph
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn utilities(&self) -> &Tensor {
        &self.utilities
    }

    pub fn payoffs(&self) -> &Tensor {
        &self.payoffs
    }

    pub fn avail(&self) -> &[Vec<bool>] {
        &self.avail
    }

    fn check_feasible(&self) -> Result<()> {
        match self.avail.iter().position(|m| !m.iter().any(|&b| b)) {
            Some(agent) => Err(Error::Infeasible { agent }),
            None => Ok(()),
        }
    }

    /// Joint value without bounds checks.
    fn value_of(&self, a: &[usize]) -> f64 {
        let na = self.n_actions;
        let fv = self.utilities.data();
        let n = self.graph.n_agents();
        let mut u = 0.0;
        for (i, &ai) in a.iter().enumerate() {
            u += fv[i * na + ai];
        }
        let mut q = u * (1.0 / n as f64);
        let ne = self.graph.n_edges();
        if ne > 0 {
            let fe = self.payoffs.data();
            let mut p = 0.0;
            for (e, &(i, j)) in self.graph.edges().iter().enumerate() {
                p += fe[(e * na + a[i]) * na + a[j]];
            }
            q += p * (1.0 / ne as f64);
        }
        q
    }
}

/// Value of joint action `a`, plus an optional action-independent bias.
///
/// Graphs without edges contribute no payoff term.
pub fn q_value(ag: &AnnotatedGraph<'_>, a: &JointAction, bias: Option<f64>) -> Result<f64> {
    let n = ag.graph.n_agents();
    if a.len() != n {
        return Err(Error::Argument(format!("joint action has {} entries for {n} agents", a.len())));
    }
    if let Some(&bad) = a.0.iter().find(|&&x| x >= ag.n_actions) {
        return Err(Error::Argument(format!("action {bad} out of range 0..{}", ag.n_actions)));
    }
    Ok(ag.value_of(&a.0) + bias.unwrap_or(0.0))
}

/// Lowest-index maximiser of `values` over the entries allowed by `mask`.
pub(crate) fn masked_argmax(values: &[f64], mask: &[bool]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, (&v, &ok)) in values.iter().zip(mask).enumerate() {
        if ok && best.map_or(true, |(_, bv)| v > bv) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// Every candidate evaluated during greedy selection, in order; index 0 is
/// the message-free (independent argmax) candidate.
#[derive(Debug, Clone)]
pub struct MaxPlusTrace {
    pub candidates: Vec<(JointAction, f64)>,
    pub best: usize,
}

impl MaxPlusTrace {
    pub fn best(&self) -> &(JointAction, f64) {
        &self.candidates[self.best]
    }
}

/// Greedy joint action after `k` passes of max-plus message passing.
pub fn greedy_maxplus(ag: &AnnotatedGraph<'_>, k: usize, normalize: bool) -> Result<(JointAction, f64)> {
    run_maxplus(ag, k, normalize, None)
}

/// Like [`greedy_maxplus`] but also returns every candidate it evaluated.
pub fn greedy_maxplus_traced(ag: &AnnotatedGraph<'_>, k: usize, normalize: bool) -> Result<MaxPlusTrace> {
    let mut candidates = Vec::with_capacity(k + 1);
    let best = run_maxplus(ag, k, normalize, Some(&mut candidates))?;
    let best = candidates
        .iter()
        .position(|c| *c == best)
        .expect("best candidate was recorded");
    Ok(MaxPlusTrace { candidates, best })
}

fn run_maxplus(
    ag: &AnnotatedGraph<'_>,
    k: usize,
    normalize: bool,
    mut trace: Option<&mut Vec<(JointAction, f64)>>,
) -> Result<(JointAction, f64)> {
    if k == 0 {
        return Err(Error::Argument("max-plus needs at least one pass".into()));
    }
    ag.check_feasible()?;
    let n = ag.graph.n_agents();
    let na = ag.n_actions;
    let edges = ag.graph.edges();
    let ne = edges.len();
    let fv = ag.utilities.data();
    let fe = ag.payoffs.data();
    let inv_v = 1.0 / n as f64;
    let inv_e = if ne > 0 { 1.0 / ne as f64 } else { 0.0 };

    let mut q: Vec<f64> = fv.iter().map(|&u| u * inv_v).collect();
    let mut actions: Vec<usize> = (0..n)
        .map(|i| masked_argmax(&q[i * na..(i + 1) * na], &ag.avail[i]).expect("feasible"))
        .collect();
    let mut best_val = ag.value_of(&actions);
    let mut best = actions.clone();
    if let Some(t) = trace.as_deref_mut() {
        t.push((JointAction(actions.clone()), best_val));
    }

    let mut mu = vec![0.0; ne * na];
    let mut mu_bar = vec![0.0; ne * na];
    let mut next_mu = vec![0.0; ne * na];
    let mut next_bar = vec![0.0; ne * na];

    for _ in 0..k {
        for (e, &(i, j)) in edges.iter().enumerate() {
            let pay = &fe[e * na * na..(e + 1) * na * na];
            let (avail_i, avail_j) = (&ag.avail[i], &ag.avail[j]);
            // forward: sender i maximises, receiver j indexes the message
            for aj in 0..na {
                let mut m = f64::NEG_INFINITY;
                for ai in 0..na {
                    if avail_i[ai] {
                        let v = (q[i * na + ai] - mu_bar[e * na + ai]) + inv_e * pay[ai * na + aj];
                        if v > m {
                            m = v;
                        }
                    }
                }
                next_mu[e * na + aj] = m;
            }
            // backward: sender j maximises, receiver i indexes the message
            for ai in 0..na {
                let mut m = f64::NEG_INFINITY;
                for aj in 0..na {
                    if avail_j[aj] {
                        let v = (q[j * na + aj] - mu[e * na + aj]) + inv_e * pay[ai * na + aj];
                        if v > m {
                            m = v;
                        }
                    }
                }
                next_bar[e * na + ai] = m;
            }
            if normalize {
                center(&mut next_mu[e * na..(e + 1) * na], avail_j);
                center(&mut next_bar[e * na..(e + 1) * na], avail_i);
            }
        }
        std::mem::swap(&mut mu, &mut next_mu);
        std::mem::swap(&mut mu_bar, &mut next_bar);

        for (qv, &u) in q.iter_mut().zip(fv) {
            *qv = u * inv_v;
        }
        for (e, &(i, j)) in edges.iter().enumerate() {
            for a in 0..na {
                q[j * na + a] += mu[e * na + a];
                q[i * na + a] += mu_bar[e * na + a];
            }
        }
        for (i, act) in actions.iter_mut().enumerate() {
            *act = masked_argmax(&q[i * na..(i + 1) * na], &ag.avail[i]).expect("feasible");
        }
        let val = ag.value_of(&actions);
        if let Some(t) = trace.as_deref_mut() {
            t.push((JointAction(actions.clone()), val));
        }
        if val > best_val {
            best_val = val;
            best.copy_from_slice(&actions);
        }
    }
    Ok((JointAction(best), best_val))
}

/// Subtracts the mean over the receiver's available actions.
fn center(msg: &mut [f64], avail: &[bool]) {
    let (sum, count) = msg
        .iter()
        .zip(avail)
        .filter(|(_, &ok)| ok)
        .fold((0.0, 0usize), |(s, c), (&m, _)| (s + m, c + 1));
    if count > 0 {
        let mean = sum / count as f64;
        msg.iter_mut().for_each(|m| *m -= mean);
    }
}

/// Exhaustive maximisation with the default enumeration cap.
pub fn brute_force(ag: &AnnotatedGraph<'_>) -> Result<(JointAction, f64)> {
    brute_force_capped(ag, DEFAULT_ENUMERATION_CAP)
}

/// Enumerates all available joint actions in lexicographic order and returns
/// the first maximiser.
pub fn brute_force_capped(ag: &AnnotatedGraph<'_>, cap: u128) -> Result<(JointAction, f64)> {
    ag.check_feasible()?;
    let options: Vec<Vec<usize>> = ag
        .avail
        .iter()
        .map(|m| m.iter().enumerate().filter(|(_, &ok)| ok).map(|(a, _)| a).collect())
        .collect();
    let size = options.iter().map(|o| o.len() as u128).product::<u128>();
    if size > cap {
        return Err(Error::Size { size, cap });
    }
    let n = options.len();
    let mut digits = vec![0usize; n];
    let mut current: Vec<usize> = options.iter().map(|o| o[0]).collect();
    let mut best = current.clone();
    let mut best_val = ag.value_of(&current);
    loop {
        let mut pos = n;
        loop {
            if pos == 0 {
                return Ok((JointAction(best), best_val));
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < options[pos].len() {
                current[pos] = options[pos][digits[pos]];
                break;
            }
            digits[pos] = 0;
            current[pos] = options[pos][0];
        }
        let v = ag.value_of(&current);
        if v > best_val {
            best_val = v;
            best.copy_from_slice(&current);
        }
    }
}

/// Coordinate ascent from a uniformly random available joint action.
///
/// Each sweep replaces every agent's action, in index order, by its best
/// response to the others. Stops after a sweep without improvement or after
/// `max_iters` sweeps and returns the best joint action visited.
pub fn coordinate_ascent<F, R>(
    mut value_fn: F,
    avail: &[Vec<bool>],
    max_iters: usize,
    rng: &mut R,
) -> Result<(JointAction, f64)>
where
    F: FnMut(&[usize]) -> f64,
    R: Rng + ?Sized,
{
    let options: Vec<Vec<usize>> = avail
        .iter()
        .map(|m| m.iter().enumerate().filter(|(_, &ok)| ok).map(|(a, _)| a).collect())
        .collect();
    if let Some(agent) = options.iter().position(Vec::is_empty) {
        return Err(Error::Infeasible { agent });
    }
    let mut current: Vec<usize> = options.iter().map(|o| o[rng.gen_range(0..o.len())]).collect();
    let mut value = value_fn(&current);
    let mut best = current.clone();
    let mut best_val = value;
    for _ in 0..max_iters.max(1) {
        let start = value;
        for (i, opts) in options.iter().enumerate() {
            let mut arg = current[i];
            let mut top = f64::NEG_INFINITY;
            for &a in opts {
                current[i] = a;
                let v = value_fn(&current);
                if v > top {
                    top = v;
                    arg = a;
                }
            }
            current[i] = arg;
            value = top;
        }
        if value > best_val {
            best_val = value;
            best.copy_from_slice(&current);
        }
        if value <= start {
            break;
        }
    }
    Ok((JointAction(best), best_val))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_topology, Topology};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn all_avail(n: usize, a: usize) -> Vec<Vec<bool>> {
        vec![vec![true; a]; n]
    }

    fn identity_instance(g: &CoordinationGraph) -> AnnotatedGraph<'_> {
        let fe = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        AnnotatedGraph::new(g, Tensor::zeros(&[2, 2]), fe, all_avail(2, 2)).unwrap()
    }

    #[test]
    fn q_value_two_agents() {
        let g = build_topology(Topology::Line, 2).unwrap();
        let fe = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let ag = AnnotatedGraph::new(&g, t2(&[&[1.0, 2.0], &[3.0, 4.0]]), fe, all_avail(2, 2)).unwrap();
        assert_eq!(q_value(&ag, &JointAction(vec![1, 0]), None).unwrap(), 4.5);
        assert_eq!(q_value(&ag, &JointAction(vec![1, 0]), Some(0.5)).unwrap(), 5.0);
        assert!(matches!(q_value(&ag, &JointAction(vec![2, 0]), None), Err(Error::Argument(_))));
    }

    #[test]
    fn q_value_without_edges() {
        let g = build_topology(Topology::Empty, 1).unwrap();
        let ag = AnnotatedGraph::new(&g, t2(&[&[3.0, 1.0]]), Tensor::zeros(&[0, 2, 2]), all_avail(1, 2)).unwrap();
        assert_eq!(q_value(&ag, &JointAction(vec![0]), None).unwrap(), 3.0);
    }

    #[test]
    fn q_value_matches_enumeration_on_two_agents() {
        let g = build_topology(Topology::Line, 2).unwrap();
        let fe = Tensor::new(vec![1, 2, 2], vec![0.3, -1.0, 2.5, 0.7]).unwrap();
        let fv = t2(&[&[0.2, -0.4], &[1.1, 0.9]]);
        let ag = AnnotatedGraph::new(&g, fv, fe, all_avail(2, 2)).unwrap();
        let (arg, val) = brute_force(&ag).unwrap();
        for a0 in 0..2 {
            for a1 in 0..2 {
                let q = q_value(&ag, &JointAction(vec![a0, a1]), None).unwrap();
                let manual = (ag.utilities().get2(0, a0) + ag.utilities().get2(1, a1)) / 2.0
                    + ag.payoffs().data()[a0 * 2 + a1];
                assert!((q - manual).abs() < 1e-15);
                assert!(q <= val);
            }
        }
        assert_eq!(q_value(&ag, &arg, None).unwrap(), val);
    }

    #[test]
    fn greedy_identity_payoff_breaks_ties_low() {
        let g = build_topology(Topology::Line, 2).unwrap();
        let ag = identity_instance(&g);
        let (a, v) = greedy_maxplus(&ag, 2, true).unwrap();
        assert_eq!(a.0, vec![0, 0]);
        assert_eq!(v, 1.0);
        let (a, v) = brute_force(&ag).unwrap();
        assert_eq!((a.0, v), (vec![0, 0], 1.0));
    }

    #[test]
    fn greedy_without_edges_is_independent_argmax() {
        let g = build_topology(Topology::Empty, 2).unwrap();
        let ag = AnnotatedGraph::new(&g, t2(&[&[0.0, 5.0], &[2.0, 1.0]]), Tensor::zeros(&[0, 2, 2]), all_avail(2, 2))
            .unwrap();
        let (a, v) = greedy_maxplus(&ag, 1, true).unwrap();
        assert_eq!(a.0, vec![1, 0]);
        assert_eq!(v, 3.5);
    }

    #[test]
    fn greedy_rejects_zero_passes_and_infeasible_agents() {
        let g = build_topology(Topology::Line, 2).unwrap();
        let ag = identity_instance(&g);
        assert!(matches!(greedy_maxplus(&ag, 0, true), Err(Error::Argument(_))));
        let fe = Tensor::zeros(&[1, 2, 2]);
        let ag = AnnotatedGraph::new(&g, Tensor::zeros(&[2, 2]), fe, vec![vec![true, true], vec![false, false]])
            .unwrap();
        assert!(matches!(greedy_maxplus(&ag, 3, true), Err(Error::Infeasible { agent: 1 })));
        assert!(matches!(brute_force(&ag), Err(Error::Infeasible { agent: 1 })));
    }

    #[test]
    fn masking_writes_sentinel() {
        let g = build_topology(Topology::Empty, 1).unwrap();
        let ag = AnnotatedGraph::new(
            &g,
            t2(&[&[0.5, 9.0, 0.1]]),
            Tensor::zeros(&[0, 3, 3]),
            vec![vec![true, false, true]],
        )
        .unwrap();
        assert_eq!(ag.utilities().get2(0, 1), NEG_LARGE);
        assert_eq!(greedy_maxplus(&ag, 1, false).unwrap().0 .0, vec![0]);
    }

    #[test]
    fn brute_force_single_agent_and_constant() {
        let g = build_topology(Topology::Empty, 1).unwrap();
        let ag = AnnotatedGraph::new(&g, t2(&[&[3.0, 1.0]]), Tensor::zeros(&[0, 2, 2]), all_avail(1, 2)).unwrap();
        assert_eq!(brute_force(&ag).unwrap(), (JointAction(vec![0]), 3.0));

        let g = build_topology(Topology::Full, 3).unwrap();
        let c = 0.75;
        let avail = vec![vec![false, true, true], vec![true; 3], vec![false, false, true]];
        let ag = AnnotatedGraph::new(&g, Tensor::full(&[3, 3], c), Tensor::full(&[3, 3, 3], c), avail).unwrap();
        let (a, v) = brute_force(&ag).unwrap();
        assert_eq!(a.0, vec![1, 0, 2]);
        assert_eq!(v, q_value(&ag, &a, None).unwrap());
        assert_eq!(v, 2.0 * c);
    }

    #[test]
    fn brute_force_cap() {
        let g = build_topology(Topology::Empty, 3).unwrap();
        let ag = AnnotatedGraph::new(&g, Tensor::zeros(&[3, 4]), Tensor::zeros(&[0, 4, 4]), all_avail(3, 4)).unwrap();
        assert!(matches!(brute_force_capped(&ag, 63), Err(Error::Size { size: 64, cap: 63 })));
        assert!(brute_force_capped(&ag, 64).is_ok());
    }

    #[test]
    fn coordinate_ascent_single_agent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vals = [0.2, 1.5, -3.0, 1.4];
        let (a, v) = coordinate_ascent(|a| vals[a[0]], &all_avail(1, 4), 1, &mut rng).unwrap();
        assert_eq!((a.0, v), (vec![1], 1.5));
    }

    #[test]
    fn coordinate_ascent_separable_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = build_topology(Topology::Empty, 3).unwrap();
        for _ in 0..50 {
            let fv: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fv_t = Tensor::new(vec![3, 4], fv.clone()).unwrap();
            let mut avail = all_avail(3, 4);
            avail[1][0] = false;
            let ag = AnnotatedGraph::new(&g, fv_t, Tensor::zeros(&[0, 4, 4]), avail.clone()).unwrap();
            let (bf, bv) = brute_force(&ag).unwrap();
            let f = |a: &[usize]| a.iter().enumerate().map(|(i, &x)| fv[i * 4 + x]).sum::<f64>();
            let (ca, cv) = coordinate_ascent(f, &avail, 1, &mut rng).unwrap();
            assert_eq!(ca, bf);
            assert!((cv - bv * 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn coordinate_ascent_reaches_unique_maximum() {
        // 2×2 payoff with strict maximum at (1,1) reachable from every start
        let m = [[0.0, 1.0], [1.0, 3.0]];
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, v) = coordinate_ascent(|a| m[a[0]][a[1]], &all_avail(2, 2), 8, &mut rng).unwrap();
            assert_eq!((a.0, v), (vec![1, 1], 3.0));
        }
    }

    #[test]
    fn coordinate_ascent_infeasible() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = coordinate_ascent(|_| 0.0, &[vec![true], vec![false]], 8, &mut rng);
        assert!(matches!(r, Err(Error::Infeasible { agent: 1 })));
    }

    fn random_instance<'g>(
        g: &'g CoordinationGraph,
        na: usize,
        mask_bits: &[bool],
        vals: &[f64],
    ) -> AnnotatedGraph<'g> {
        let n = g.n_agents();
        let ne = g.n_edges();
        let mut it = vals.iter().cycle().copied();
        let fv = Tensor::new(vec![n, na], (0..n * na).map(|_| it.next().unwrap()).collect()).unwrap();
        let fe = Tensor::new(vec![ne, na, na], (0..ne * na * na).map(|_| it.next().unwrap()).collect()).unwrap();
        let mut bits = mask_bits.iter().cycle().copied();
        let avail = (0..n)
            .map(|_| {
                let mut m: Vec<bool> = (0..na).map(|_| bits.next().unwrap()).collect();
                if !m.iter().any(|&b| b) {
                    m[0] = true;
                }
                m
            })
            .collect();
        AnnotatedGraph::new(g, fv, fe, avail).unwrap()
    }

    fn random_tree(n: usize, parents: &[usize]) -> CoordinationGraph {
        CoordinationGraph::new(n, (1..n).map(|i| (parents[i - 1] % i, i))).unwrap()
    }

    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest, Strategy};

    fn vals() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, 97)
    }

    fn bits() -> impl Strategy<Value = Vec<bool>> {
        prop::collection::vec(prop::bool::weighted(0.8), 31)
    }

    proptest! {
        #[test]
        fn tree_exactness(
            n in 1usize..=6,
            na in 1usize..=5,
            parents in prop::collection::vec(0usize..1000, 5),
            v in vals(),
            m in bits(),
            normalize in any::<bool>(),
        ) {
            let g = random_tree(n, &parents);
            prop_assert!(g.is_acyclic());
            let ag = random_instance(&g, na, &m, &v);
            let (_, best) = brute_force(&ag).unwrap();
            let (a, got) = greedy_maxplus(&ag, g.diameter() + 1, normalize).unwrap();
            prop_assert_eq!(got, best);
            prop_assert_eq!(q_value(&ag, &a, None).unwrap(), best);
        }

        #[test]
        fn anytime_dominance(
            n in 2usize..=6,
            na in 1usize..=4,
            full in any::<bool>(),
            k in 1usize..10,
            v in vals(),
            m in bits(),
            normalize in any::<bool>(),
        ) {
            let kind = if full || n < 3 { Topology::Full } else { Topology::Cycle };
            let g = build_topology(kind, n).unwrap();
            let ag = random_instance(&g, na, &m, &v);
            let trace = greedy_maxplus_traced(&ag, k, normalize).unwrap();
            prop_assert_eq!(trace.candidates.len(), k + 1);
            let max = trace.candidates.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
            let (a, val) = greedy_maxplus(&ag, k, normalize).unwrap();
            prop_assert_eq!(val, max);
            prop_assert_eq!(&a, &trace.best().0);
            prop_assert!(val >= trace.candidates[0].1);
            for (cand, cv) in &trace.candidates {
                prop_assert_eq!(q_value(&ag, cand, None).unwrap(), *cv);
            }
        }

        #[test]
        fn empty_graph_is_independent_argmax(
            n in 1usize..=6,
            na in 1usize..=5,
            k in 1usize..6,
            v in vals(),
            m in bits(),
        ) {
            let g = build_topology(Topology::Empty, n).unwrap();
            let ag = random_instance(&g, na, &m, &v);
            let (a, _) = greedy_maxplus(&ag, k, true).unwrap();
            for i in 0..n {
                let row = ag.utilities().row(i);
                let mut arg = None;
                for act in 0..na {
                    if ag.avail()[i][act] && arg.map_or(true, |b: usize| row[act] > row[b]) {
                        arg = Some(act);
                    }
                }
                prop_assert_eq!(a.0[i], arg.unwrap());
            }
        }

        #[test]
        fn utility_shift_covariance(
            n in 2usize..=5,
            na in 2usize..=4,
            agent in 0usize..5,
            c in -3.0f64..3.0,
            v in vals(),
            m in bits(),
        ) {
            let agent = agent % n;
            let g = build_topology(Topology::Full, n).unwrap();
            let ag = random_instance(&g, na, &m, &v);
            let mut shifted_fv = ag.utilities().clone();
            for act in 0..na {
                if ag.avail()[agent][act] {
                    let x = shifted_fv.get2(agent, act);
                    shifted_fv.set2(agent, act, x + c);
                }
            }
            let shifted = AnnotatedGraph::new(&g, shifted_fv, ag.payoffs().clone(), ag.avail().to_vec()).unwrap();
            let (base_arg, _) = brute_force(&ag).unwrap();
            let (shift_arg, _) = brute_force(&shifted).unwrap();
            prop_assert_eq!(&base_arg, &shift_arg);
            let q0 = q_value(&ag, &base_arg, None).unwrap();
            let q1 = q_value(&shifted, &base_arg, None).unwrap();
            prop_assert!((q1 - q0 - c / n as f64).abs() < 1e-9);
            prop_assert_eq!(greedy_maxplus(&ag, 4, true).unwrap().0, greedy_maxplus(&shifted, 4, true).unwrap().0);
        }

        #[test]
        fn masked_actions_never_chosen(
            n in 1usize..=6,
            na in 1usize..=5,
            k in 1usize..6,
            v in vals(),
            m in bits(),
            normalize in any::<bool>(),
        ) {
            let kind = if n >= 3 { Topology::Cycle } else { Topology::Full };
            let g = build_topology(kind, n).unwrap();
            let ag = random_instance(&g, na, &m, &v);
            let (a, _) = greedy_maxplus(&ag, k, normalize).unwrap();
            let (b, _) = brute_force(&ag).unwrap();
            for i in 0..n {
                prop_assert!(ag.avail()[i][a.0[i]]);
                prop_assert!(ag.avail()[i][b.0[i]]);
            }
        }
    }
}
