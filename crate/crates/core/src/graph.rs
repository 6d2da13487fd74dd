//! Graphs, datasets, the TU plain-text format and block-diagonal batches.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::rc::Rc;

use drgcl_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::DataError;

/// Cap on the degree one-hot width for label-free corpora.
pub const MAX_DEGREE_FEATURE: usize = 1000;

/// An undirected graph with dense node features and a class label.
///
/// Edges are stored once each as `(u, v)` with `u < v`, sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    features: Tensor,
    label: usize,
}

impl Graph {
    /// Builds a graph, canonicalizing edge orientation and rejecting
    /// out-of-range endpoints, self-loops and duplicates.
    pub fn new(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        features: Tensor,
        label: usize,
    ) -> Result<Self, DataError> {
        if features.rank() != 2 || features.rows() != num_nodes {
            return Err(DataError::InvalidGraph(format!(
                "feature matrix {:?} does not have {num_nodes} rows",
                features.shape()
            )));
        }
        let mut canon = Vec::with_capacity(edges.len());
        for (u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(DataError::InvalidGraph(format!(
                    "edge ({u}, {v}) outside {num_nodes} nodes"
                )));
            }
            if u == v {
                return Err(DataError::InvalidGraph(format!("self-loop on node {u}")));
            }
            canon.push((u.min(v), u.max(v)));
        }
        canon.sort_unstable();
        let before = canon.len();
        canon.dedup();
        if canon.len() != before {
            return Err(DataError::InvalidGraph("duplicate edge".into()));
        }
        Ok(Self {
            num_nodes,
            edges: canon,
            features,
            label,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, DataError> {
        let n = self.num_nodes;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(DataError::InvalidGraph("not a permutation".into()));
        }
        let f = self.feature_dim();
        let mut data = vec![0.0; n * f];
        for (old, &new) in perm.iter().enumerate() {
            data[new * f..(new + 1) * f].copy_from_slice(self.features.row(old));
        }
        let edges = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        let features = Tensor::matrix(n, f, data).expect("shape preserved");
        Self::new(n, edges, features, self.label)
    }

    /// Induced subgraph on `keep` (sorted, distinct), with compacted indices.
    pub(crate) fn induced(&self, keep: &[usize]) -> Self {
        let mut map = vec![usize::MAX; self.num_nodes];
        for (new, &old) in keep.iter().enumerate() {
            map[old] = new;
        }
        let f = self.feature_dim();
        let mut data = Vec::with_capacity(keep.len() * f);
        for &old in keep {
            data.extend_from_slice(self.features.row(old));
        }
        let edges = self
            .edges
            .iter()
            .filter(|&&(u, v)| map[u] != usize::MAX && map[v] != usize::MAX)
            .map(|&(u, v)| (map[u], map[v]))
            .collect();
        Self {
            num_nodes: keep.len(),
            edges,
            features: Tensor::matrix(keep.len(), f, data).expect("shape preserved"),
            label: self.label,
        }
    }

    /// Same topology and label with replaced edges (already canonical) or features.
    pub(crate) fn with_parts(&self, edges: Vec<(usize, usize)>, features: Tensor) -> Self {
        let mut edges = edges;
        edges.sort_unstable();
        Self {
            num_nodes: self.num_nodes,
            edges,
            features,
            label: self.label,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    NodeLabelOneHot,
    DegreeOneHot,
}

/// Counts of input irregularities repaired while loading.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadWarnings {
    pub self_loops: usize,
    pub duplicate_edges: usize,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub feature_kind: FeatureKind,
    /// Original label value for each contiguous class id.
    pub class_values: Vec<i64>,
    /// Original node label value for each one-hot column (node-label features only).
    pub node_label_values: Vec<i64>,
    pub warnings: LoadWarnings,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.graphs.iter().map(Graph::label).collect()
    }
}

fn read_lines(dir: &Path, file: &str) -> Result<Vec<(usize, String)>, DataError> {
    let path = dir.join(file);
    if !path.is_file() {
        return Err(DataError::MissingFile(path));
    }
    let text = fs::read_to_string(&path)?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim().to_string()))
        .filter(|(_, l)| !l.is_empty())
        .collect())
}

fn parse_int<T: std::str::FromStr>(file: &str, line: usize, s: &str) -> Result<T, DataError> {
    s.trim().parse().map_err(|_| DataError::Parse {
        file: file.to_string(),
        line,
        detail: format!("expected an integer, found `{s}`"),
    })
}

fn contiguous(values: &[i64]) -> (Vec<usize>, Vec<i64>) {
    let distinct: Vec<i64> = values.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let index: BTreeMap<i64, usize> = distinct.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    (values.iter().map(|v| index[v]).collect(), distinct)
}

/// Reads a TU-format corpus `<dir>/<name>_*.txt`.
pub fn load_tu_dataset(dir: &Path, name: &str) -> Result<Dataset, DataError> {
    let a_file = format!("{name}_A.txt");
    let ind_file = format!("{name}_graph_indicator.txt");
    let gl_file = format!("{name}_graph_labels.txt");
    let nl_file = format!("{name}_node_labels.txt");

    let indicator_lines = read_lines(dir, &ind_file)?;
    let label_lines = read_lines(dir, &gl_file)?;
    let edge_lines = read_lines(dir, &a_file)?;

    let graph_values: Vec<i64> = label_lines
        .iter()
        .map(|(ln, s)| parse_int(&gl_file, *ln, s))
        .collect::<Result<_, _>>()?;
    let num_graphs = graph_values.len();

    let total_nodes = indicator_lines.len();
    let mut node_graph = Vec::with_capacity(total_nodes);
    for (ln, s) in &indicator_lines {
        let g: usize = parse_int(&ind_file, *ln, s)?;
        if g == 0 || g > num_graphs {
            return Err(DataError::Parse {
                file: ind_file.clone(),
                line: *ln,
                detail: format!("graph id {g} outside 1..={num_graphs}"),
            });
        }
        node_graph.push(g - 1);
    }

    // Nodes of each graph in global id order; local index = rank within its graph.
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_graphs];
    let mut local = vec![0usize; total_nodes];
    for (node, &g) in node_graph.iter().enumerate() {
        local[node] = members[g].len();
        members[g].push(node);
    }
    if let Some(g) = members.iter().position(Vec::is_empty) {
        return Err(DataError::EmptyGraph(g + 1));
    }

    let mut warnings = LoadWarnings::default();
    let mut edge_sets: Vec<BTreeSet<(usize, usize)>> = vec![BTreeSet::new(); num_graphs];
    let mut directed = BTreeSet::new();
    for (ln, s) in &edge_lines {
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 2 {
            return Err(DataError::Parse {
                file: a_file.clone(),
                line: *ln,
                detail: format!("expected `i, j`, found `{s}`"),
            });
        }
        let mut ends = [0usize; 2];
        for (slot, p) in ends.iter_mut().zip(&parts) {
            let v: usize = parse_int(&a_file, *ln, p)?;
            if v == 0 || v > total_nodes {
                return Err(DataError::NodeOutOfRange {
                    file: a_file.clone(),
                    line: *ln,
                    node: v,
                    max: total_nodes,
                });
            }
            *slot = v - 1;
        }
        let [u, v] = ends;
        if node_graph[u] != node_graph[v] {
            return Err(DataError::CrossGraphEdge(u + 1, v + 1));
        }
        if u == v {
            warnings.self_loops += 1;
            continue;
        }
        // Both directions of an undirected edge are expected; only a repeated
        // directed pair counts as a duplicate.
        if !directed.insert((u, v)) {
            warnings.duplicate_edges += 1;
        }
        let (lu, lv) = (local[u], local[v]);
        edge_sets[node_graph[u]].insert((lu.min(lv), lu.max(lv)));
    }

    let node_labels = if dir.join(&nl_file).is_file() {
        let lines = read_lines(dir, &nl_file)?;
        if lines.len() != total_nodes {
            return Err(DataError::Parse {
                file: nl_file,
                line: lines.len(),
                detail: format!("{} node labels for {total_nodes} nodes", lines.len()),
            });
        }
        let values: Vec<i64> = lines
            .iter()
            .map(|(ln, s)| parse_int(&nl_file, *ln, s))
            .collect::<Result<_, _>>()?;
        Some(values)
    } else {
        None
    };

    let (class_ids, class_values) = contiguous(&graph_values);
    let edge_lists: Vec<Vec<(usize, usize)>> =
        edge_sets.into_iter().map(|s| s.into_iter().collect()).collect();

    let (feature_kind, feature_dim, node_feature, node_label_values) = match node_labels {
        Some(values) => {
            let (ids, distinct) = contiguous(&values);
            (FeatureKind::NodeLabelOneHot, distinct.len(), ids, distinct)
        }
        None => {
            let mut deg = vec![0usize; total_nodes];
            for (g, edges) in edge_lists.iter().enumerate() {
                for &(u, v) in edges {
                    deg[members[g][u]] += 1;
                    deg[members[g][v]] += 1;
                }
            }
            let cap = deg.iter().copied().max().unwrap_or(0).min(MAX_DEGREE_FEATURE);
            let ids = deg.into_iter().map(|d| d.min(cap)).collect();
            (FeatureKind::DegreeOneHot, cap + 1, ids, Vec::new())
        }
    };

    let graphs = members
        .iter()
        .zip(edge_lists)
        .zip(&class_ids)
        .map(|((nodes, edges), &label)| {
            let mut data = vec![0.0; nodes.len() * feature_dim];
            for (i, &node) in nodes.iter().enumerate() {
                data[i * feature_dim + node_feature[node]] = 1.0;
            }
            let features = Tensor::matrix(nodes.len(), feature_dim, data).expect("sized above");
            Graph::new(nodes.len(), edges, features, label)
        })
        .collect::<Result<Vec<_>, _>>()?;

    Ok(Dataset {
        name: name.to_string(),
        graphs,
        num_classes: class_values.len(),
        feature_dim,
        feature_kind,
        class_values,
        node_label_values,
        warnings,
    })
}

/// Writes `ds` as a TU corpus; node labels are written for node-label features.
pub fn write_tu_dataset(ds: &Dataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    let open = |suffix: &str| -> Result<std::io::BufWriter<fs::File>, DataError> {
        Ok(std::io::BufWriter::new(fs::File::create(
            dir.join(format!("{}_{suffix}.txt", ds.name)),
        )?))
    };
    let mut a = open("A")?;
    let mut ind = open("graph_indicator")?;
    let mut gl = open("graph_labels")?;
    let mut nl = match ds.feature_kind {
        FeatureKind::NodeLabelOneHot => Some(open("node_labels")?),
        FeatureKind::DegreeOneHot => None,
    };
    let mut offset = 1;
    for (gi, g) in ds.graphs.iter().enumerate() {
        let value = ds.class_values.get(g.label()).copied().unwrap_or(g.label() as i64);
        writeln!(gl, "{value}")?;
        for node in 0..g.num_nodes() {
            writeln!(ind, "{}", gi + 1)?;
            if let Some(nl) = nl.as_mut() {
                let row = g.features().row(node);
                let col = row.iter().position(|&x| x != 0.0).unwrap_or(0);
                let value = ds.node_label_values.get(col).copied().unwrap_or(col as i64);
                writeln!(nl, "{value}")?;
            }
        }
        for &(u, v) in g.edges() {
            writeln!(a, "{}, {}", u + offset, v + offset)?;
            writeln!(a, "{}, {}", v + offset, u + offset)?;
        }
        offset += g.num_nodes();
    }
    for w in [&mut a, &mut ind, &mut gl] {
        w.flush()?;
    }
    if let Some(mut nl) = nl {
        nl.flush()?;
    }
    Ok(())
}

/// A block-diagonal minibatch.
///
/// `src`/`dst` list every undirected edge in both directions with batch-level
/// node indices, so that a scatter over `dst` of rows gathered at `src` sums
/// each node's neighbours.
#[derive(Clone, Debug)]
pub struct Batch {
    pub features: Tensor,
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
    pub segments: Rc<[usize]>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_graphs<'a, I>(graphs: I) -> Result<Self, DataError>
    where
        I: IntoIterator<Item = &'a Graph>,
    {
        let graphs: Vec<&Graph> = graphs.into_iter().collect();
        let f = graphs.first().map_or(0, |g| g.feature_dim());
        let total: usize = graphs.iter().map(|g| g.num_nodes()).sum();
        let mut data = Vec::with_capacity(total * f);
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut segments = Vec::with_capacity(total);
        let mut offset = 0;
        for (gi, g) in graphs.iter().enumerate() {
            if g.feature_dim() != f {
                return Err(DataError::InvalidGraph(format!(
                    "feature width {} differs from {f}",
                    g.feature_dim()
                )));
            }
            data.extend_from_slice(g.features().data());
            for &(u, v) in g.edges() {
                src.extend([u + offset, v + offset]);
                dst.extend([v + offset, u + offset]);
            }
            segments.extend(std::iter::repeat_n(gi, g.num_nodes()));
            offset += g.num_nodes();
        }
        Ok(Self {
            features: Tensor::matrix(total, f, data).expect("sized above"),
            src: src.into(),
            dst: dst.into(),
            segments: segments.into(),
            labels: graphs.iter().map(|g| g.label()).collect(),
        })
    }

    pub fn num_graphs(&self) -> usize {
        self.labels.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.segments.len()
    }
}

/// Partitions `0..n` into batches of `batch_size`; a trailing batch of one
/// element is merged into its predecessor.
pub fn batch_indices<R: Rng + ?Sized>(
    n: usize,
    batch_size: usize,
    rng: &mut R,
    shuffle: bool,
) -> Result<Vec<Vec<usize>>, DataError> {
    if batch_size < 2 {
        return Err(DataError::BatchTooSmall(batch_size));
    }
    if n < 2 {
        return Err(DataError::TooFewGraphs(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(rng);
    }
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(tail);
    }
    Ok(batches)
}

pub fn make_batches<R: Rng + ?Sized>(
    dataset: &Dataset,
    batch_size: usize,
    rng: &mut R,
    shuffle: bool,
) -> Result<Vec<Batch>, DataError> {
    batch_indices(dataset.len(), batch_size, rng, shuffle)?
        .iter()
        .map(|idx| Batch::from_graphs(idx.iter().map(|&i| &dataset.graphs[i])))
        .collect()
}
