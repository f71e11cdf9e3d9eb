//! Coordination-graph topologies.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Full,
    Cycle,
    Line,
    Star,
    Empty,
}

impl Topology {
    pub const ALL: [Topology; 5] = [
        Topology::Full,
        Topology::Cycle,
        Topology::Line,
        Topology::Star,
        Topology::Empty,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Topology::Full => "full",
            Topology::Cycle => "cycle",
            Topology::Line => "line",
            Topology::Star => "star",
            Topology::Empty => "empty",
        }
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Topology::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config("topology", format!("unknown topology `{s}`")))
    }
}

/// Undirected graph over agents `0..n_agents`.
///
/// Edges are stored as `(i, j)` with `i < j`, sorted, without duplicates.
/// Messages flow "forward" from `i` to `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoordinationGraph {
    n_agents: usize,
    edges: Vec<(usize, usize)>,
}

impl CoordinationGraph {
    /// Validates and canonicalises an edge list.
    pub fn new(n_agents: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n_agents == 0 {
            return Err(Error::Argument("a coordination graph needs at least one agent".into()));
        }
        let mut canon = Vec::new();
        for (a, b) in edges {
            if a == b {
                return Err(Error::Topology(format!("self-loop on agent {a}")));
            }
            if a >= n_agents || b >= n_agents {
                return Err(Error::Topology(format!("edge ({a},{b}) outside {n_agents} agents")));
            }
            canon.push((a.min(b), a.max(b)));
        }
        canon.sort_unstable();
        if let Some(w) = canon.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Topology(format!("duplicate edge {:?}", w[0])));
        }
        Ok(Self {
            n_agents,
            edges: canon,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_agents];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    /// Re-checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_agents;
        if n == 0 {
            return Err(Error::Argument("empty graph".into()));
        }
        if self.edges.len() > n * (n - 1) / 2 {
            return Err(Error::Topology("too many edges".into()));
        }
        for w in self.edges.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Topology("edges not strictly sorted".into()));
            }
        }
        for &(i, j) in &self.edges {
            if i >= j || j >= n {
                return Err(Error::Topology(format!("bad edge ({i},{j})")));
            }
        }
        Ok(())
    }

    pub fn is_acyclic(&self) -> bool {
        let mut parent: Vec<usize> = (0..self.n_agents).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for &(i, j) in &self.edges {
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri == rj {
                return false;
            }
            parent[ri] = rj;
        }
        true
    }

    pub fn is_connected(&self) -> bool {
        let dist = self.bfs(0);
        dist.iter().all(Option::is_some)
    }

    /// Longest shortest path between any two connected agents; 0 without edges.
    /// Disconnected components are measured separately.
    pub fn diameter(&self) -> usize {
        (0..self.n_agents)
            .flat_map(|s| self.bfs(s).into_iter().flatten())
            .max()
            .unwrap_or(0)
    }

    fn bfs(&self, source: usize) -> Vec<Option<usize>> {
        let adj = self.adjacency();
        let mut dist = vec![None; self.n_agents];
        dist[source] = Some(0);
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            let du = dist[u].expect("visited");
            for &v in &adj[u] {
                if dist[v].is_none() {
                    dist[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}

/// Builds one of the named topologies over `n` agents.
pub fn build_topology(kind: Topology, n: usize) -> Result<CoordinationGraph> {
    if n == 0 {
        return Err(Error::Argument("topology needs n ≥ 1".into()));
    }
    let edges: Vec<(usize, usize)> = match kind {
        Topology::Full => (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect(),
        Topology::Cycle => {
            if n < 3 {
                return Err(Error::Topology(format!("cycle needs at least 3 agents, got {n}")));
            }
            (0..n).map(|i| (i, (i + 1) % n)).collect()
        }
        Topology::Line => (0..n.saturating_sub(1)).map(|i| (i, i + 1)).collect(),
        Topology::Star => (1..n).map(|i| (0, i)).collect(),
        Topology::Empty => Vec::new(),
    };
    CoordinationGraph::new(n, edges)
}
