//! Stochastic graph augmentations producing correlated views.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::graph::Graph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AugmentKind {
    NodeDrop,
    EdgePerturb,
    AttrMask,
    Subgraph,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 4] = [
        AugmentKind::NodeDrop,
        AugmentKind::EdgePerturb,
        AugmentKind::AttrMask,
        AugmentKind::Subgraph,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::NodeDrop => "node-drop",
            AugmentKind::EdgePerturb => "edge-perturb",
            AugmentKind::AttrMask => "attr-mask",
            AugmentKind::Subgraph => "subgraph",
        }
    }
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AugmentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown augmentation `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    pub ratio: f64,
}

impl AugmentSpec {
    pub fn new(kind: AugmentKind, ratio: f64) -> Result<Self, String> {
        if !(0.0..=1.0).contains(&ratio) {
            return Err(format!("augmentation ratio {ratio} outside [0, 1]"));
        }
        Ok(Self { kind, ratio })
    }
}

fn round_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64).round() as usize
}

/// Number of nodes kept by node-drop.
pub fn node_drop_kept(ratio: f64, n: usize) -> usize {
    n - round_count(ratio, n).min(n.saturating_sub(1))
}

/// Number of distinct nodes collected by the subgraph walk.
pub fn subgraph_kept(ratio: f64, n: usize) -> usize {
    (((1.0 - ratio) * n as f64).ceil() as usize).clamp(1, n)
}

/// Applies one augmentation to `g`.
pub fn sample_view<R: Rng + ?Sized>(g: &Graph, spec: AugmentSpec, rng: &mut R) -> Graph {
    let n = g.num_nodes();
    match spec.kind {
        AugmentKind::NodeDrop => {
            let keep = node_drop_kept(spec.ratio, n);
            if keep == n {
                return g.clone();
            }
            let mut nodes = index::sample(rng, n, keep).into_vec();
            nodes.sort_unstable();
            g.induced(&nodes)
        }
        AugmentKind::EdgePerturb => edge_perturb(g, spec.ratio, rng),
        AugmentKind::AttrMask => {
            let k = round_count(spec.ratio, n).min(n);
            if k == 0 {
                return g.clone();
            }
            let mut features = g.features().clone();
            let f = g.feature_dim();
            for node in index::sample(rng, n, k) {
                features.data_mut()[node * f..(node + 1) * f].fill(0.0);
            }
            g.with_parts(g.edges().to_vec(), features)
        }
        AugmentKind::Subgraph => {
            let target = subgraph_kept(spec.ratio, n);
            if target == n {
                return g.clone();
            }
            let nodes = random_walk(g, target, rng);
            g.induced(&nodes)
        }
    }
}

fn edge_perturb<R: Rng + ?Sized>(g: &Graph, ratio: f64, rng: &mut R) -> Graph {
    let n = g.num_nodes();
    let m = g.num_edges();
    let k = round_count(ratio, m).min(m);
    if k == 0 {
        return g.clone();
    }
    let existing: BTreeSet<(usize, usize)> = g.edges().iter().copied().collect();
    let removed: BTreeSet<usize> = index::sample(rng, m, k).into_iter().collect();
    let mut edges: Vec<(usize, usize)> = g
        .edges()
        .iter()
        .enumerate()
        .filter(|(i, _)| !removed.contains(i))
        .map(|(_, &e)| e)
        .collect();

    let pairs = n * (n - 1) / 2;
    let free = pairs - m;
    let add = k.min(free);
    if add > 0 {
        // Dense complements are enumerated; sparse ones use rejection sampling.
        if free <= 4 * add || pairs <= 4096 {
            let complement: Vec<(usize, usize)> = (0..n)
                .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
                .filter(|e| !existing.contains(e))
                .collect();
            edges.extend(index::sample(rng, complement.len(), add).into_iter().map(|i| complement[i]));
        } else {
            let mut added = BTreeSet::new();
            while added.len() < add {
                let u = rng.gen_range(0..n);
                let v = rng.gen_range(0..n);
                let e = (u.min(v), u.max(v));
                if u != v && !existing.contains(&e) {
                    added.insert(e);
                }
            }
            edges.extend(added);
        }
    }
    g.with_parts(edges, g.features().clone())
}

/// Collects `target` distinct nodes by a uniform random walk, jumping to an
/// unvisited node when the walk is stuck.
fn random_walk<R: Rng + ?Sized>(g: &Graph, target: usize, rng: &mut R) -> Vec<usize> {
    let n = g.num_nodes();
    let adj = g.adjacency();
    let mut visited = vec![false; n];
    let mut count = 0;
    let mut current = rng.gen_range(0..n);
    visited[current] = true;
    count += 1;
    let patience = 4 * n;
    let mut stale = 0;
    while count < target {
        if adj[current].is_empty() || stale >= patience {
            let unvisited: Vec<usize> = (0..n).filter(|&v| !visited[v]).collect();
            current = unvisited[rng.gen_range(0..unvisited.len())];
            stale = 0;
        } else {
            current = adj[current][rng.gen_range(0..adj[current].len())];
            stale += 1;
        }
        if !visited[current] {
            visited[current] = true;
            count += 1;
            stale = 0;
        }
    }
    (0..n).filter(|&v| visited[v]).collect()
}

/// Two views of one graph under independently drawn augmentation kinds.
#[derive(Clone, Debug)]
pub struct ViewPair {
    pub kinds: (AugmentKind, AugmentKind),
    pub first: Graph,
    pub second: Graph,
}

pub fn sample_pair<R: Rng + ?Sized>(g: &Graph, ratio: f64, rng: &mut R) -> ViewPair {
    let k1 = AugmentKind::ALL[rng.gen_range(0..4)];
    let k2 = AugmentKind::ALL[rng.gen_range(0..4)];
    let first = sample_view(g, AugmentSpec { kind: k1, ratio }, rng);
    let second = sample_view(g, AugmentSpec { kind: k2, ratio }, rng);
    ViewPair {
        kinds: (k1, k2),
        first,
        second,
    }
}
