//! Exact cosine k-NN, pivot-centered subgraph construction, union-find
//! connected components, and the iterative threshold clustering that turns
//! a linkage graph into pseudo-labels.
//!
//! Everything here is deterministic: ties break toward the lower row id,
//! node order is discovery order, and cluster ids are assigned by smallest
//! member. Brute-force neighbor search is intentional; the data sizes this
//! crate targets never justify an approximate index.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Neighborhood sizes for pivot graph construction: `k1` one-hop neighbors
/// of the pivot, `k2` two-hop extensions per one-hop node, `k3` linked
/// neighbors per node.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnParams {
    pub k1: usize,
    pub k2: usize,
    pub k3: usize,
}

impl Default for KnnParams {
    fn default() -> Self {
        // k1 above the default samples_per_class so a pivot's one-hop
        // neighborhood always reaches past its own class: training graphs
        // with no negative node teach the link predictor nothing
        KnnParams { k1: 32, k2: 3, k3: 3 }
    }
}

impl KnnParams {
    pub fn validate(&self) -> Result<()> {
        if self.k1 < 1 || self.k3 < 1 {
            return Err(Error::Config(format!(
                "k1 and k3 must be at least 1, got k1={} k3={}",
                self.k1, self.k3
            )));
        }
        Ok(())
    }

    pub fn max_k(&self) -> usize {
        self.k1.max(self.k2).max(self.k3)
    }
}

/// Brute-force top-k cosine neighbors for every row. Ties break toward the
/// lower row id. With `exclude_self` the row itself never appears in its
/// own list (and then `k <= N-1` is required).
pub fn knn_search(
    features: &Matrix,
    k: usize,
    exclude_self: bool,
) -> Result<Vec<Vec<(usize, f64)>>> {
    let n = features.rows();
    let cap = if exclude_self { n.saturating_sub(1) } else { n };
    if k > cap {
        return Err(Error::Config(format!(
            "k={k} exceeds the {cap} candidates available per row"
        )));
    }
    let unit = normalized_or_err(features)?;
    let mut out = Vec::with_capacity(n);
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(n);
    for i in 0..n {
        scored.clear();
        for j in 0..n {
            if exclude_self && j == i {
                continue;
            }
            scored.push((j, crate::numerics::dot(unit.row(i), unit.row(j))));
        }
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        out.push(scored[..k].to_vec());
    }
    Ok(out)
}

fn normalized_or_err(features: &Matrix) -> Result<Matrix> {
    for i in 0..features.rows() {
        if crate::numerics::norm(features.row(i)) <= 1e-12 {
            return Err(Error::Degenerate(format!("row {i} has zero norm")));
        }
    }
    Ok(features.l2_normalize_rows())
}

/// The neighborhood subgraph around one pivot row.
///
/// `nodes` lists member row ids in discovery order, pivot excluded.
/// `node_features` holds the pivot-subtracted, re-normalized feature of
/// each node; `adjacency` is the Gram matrix of those rows. Entries of
/// `linked_neighbors` are indices into `nodes` (local), kept symmetric and
/// sorted. `node_labels[v] = 1` marks nodes sharing the pivot's class when
/// labels were supplied.
#[derive(Clone, Debug)]
pub struct PivotGraph {
    pub pivot: usize,
    pub nodes: Vec<usize>,
    pub node_features: Matrix,
    pub adjacency: Matrix,
    pub linked_neighbors: Vec<Vec<usize>>,
    pub node_labels: Option<Vec<u8>>,
}

impl PivotGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Builds the pivot graph for one row, running its own neighbor search.
/// Prefer [`build_pivot_graph_from_knn`] when constructing graphs for many
/// pivots over the same data.
pub fn build_pivot_graph(
    pivot: usize,
    features: &Matrix,
    kp: &KnnParams,
    labels: Option<&[i64]>,
) -> Result<PivotGraph> {
    kp.validate()?;
    let k = kp.max_k().min(features.rows().saturating_sub(1));
    let knn = knn_search(features, k, true)?;
    build_pivot_graph_from_knn(pivot, features, kp, &knn, labels)
}

/// Same as [`build_pivot_graph`] but reuses precomputed per-row neighbor
/// lists (each at least `min(max_k, N-1)` long).
pub fn build_pivot_graph_from_knn(
    pivot: usize,
    features: &Matrix,
    kp: &KnnParams,
    knn: &[Vec<(usize, f64)>],
    labels: Option<&[i64]>,
) -> Result<PivotGraph> {
    kp.validate()?;
    let n = features.rows();
    if pivot >= n {
        return Err(Error::Index(format!("pivot {pivot} out of range for {n} rows")));
    }
    if knn.len() != n {
        return Err(Error::Dim(format!("{} knn lists for {} rows", knn.len(), n)));
    }
    let need = kp.max_k().min(n.saturating_sub(1));
    if let Some(short) = knn.iter().position(|l| l.len() < need) {
        return Err(Error::Config(format!(
            "knn list for row {short} has {} entries, need {need}",
            knn[short].len()
        )));
    }
    if let Some(ls) = labels {
        if ls.len() != n {
            return Err(Error::Dim(format!("{} labels for {n} rows", ls.len())));
        }
    }

    // discovery order: pivot's k1 nearest, then each one-hop's k2 nearest
    let take = |row: usize, k: usize| knn[row].iter().take(k).map(|&(id, _)| id);
    let mut nodes: Vec<usize> = Vec::new();
    let mut seen = vec![false; n];
    seen[pivot] = true;
    for id in take(pivot, kp.k1) {
        if !seen[id] {
            seen[id] = true;
            nodes.push(id);
        }
    }
    let one_hop = nodes.clone();
    for &u in &one_hop {
        for id in take(u, kp.k2) {
            if !seen[id] {
                seen[id] = true;
                nodes.push(id);
            }
        }
    }
    if nodes.is_empty() {
        return Err(Error::Degenerate(format!("pivot {pivot} has an empty neighbor pool")));
    }

    let k = nodes.len();
    let d = features.cols();
    let mut diffs = Matrix::zeros(k, d);
    let pv = features.row(pivot);
    for (local, &v) in nodes.iter().enumerate() {
        let row = diffs.row_mut(local);
        for (x, (&fv, &fp)) in row.iter_mut().zip(features.row(v).iter().zip(pv)) {
            *x = fv - fp;
        }
    }
    // the adjacency compares offset directions only, but the stored node
    // features keep their magnitudes: how far a node sits from the pivot
    // is the one linkage cue that looks the same in every domain
    let directions = diffs.l2_normalize_rows();
    let adjacency = directions.matmul(&directions.transpose())?;
    let node_features = diffs;

    let mut local_of = HashMap::with_capacity(k);
    for (local, &v) in nodes.iter().enumerate() {
        local_of.insert(v, local);
    }
    let mut linked: Vec<HashSet<usize>> = vec![HashSet::new(); k];
    for (local, &v) in nodes.iter().enumerate() {
        for id in take(v, kp.k3) {
            if let Some(&other) = local_of.get(&id) {
                if other != local {
                    linked[local].insert(other);
                    linked[other].insert(local);
                }
            }
        }
    }
    let linked_neighbors: Vec<Vec<usize>> = linked
        .into_iter()
        .map(|s| {
            let mut v: Vec<usize> = s.into_iter().collect();
            v.sort_unstable();
            v
        })
        .collect();

    let node_labels = labels.map(|ls| {
        nodes.iter().map(|&v| u8::from(ls[v] == ls[pivot])).collect()
    });

    Ok(PivotGraph { pivot, nodes, node_features, adjacency, linked_neighbors, node_labels })
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), size: vec![1; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
    }
}

/// Union-find connected components over the edges with weight `>= eta`.
/// Every node appears in exactly one component; members are sorted and the
/// components ordered by smallest member.
pub fn connected_components(
    n: usize,
    edges: &[(usize, usize, f64)],
    eta: f64,
) -> Result<Vec<Vec<usize>>> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::Config(format!("threshold {eta} outside [0, 1]")));
    }
    let mut uf = UnionFind::new(n);
    for &(i, j, p) in edges {
        if i >= n || j >= n {
            return Err(Error::Index(format!("edge ({i}, {j}) out of range for {n} nodes")));
        }
        if p >= eta {
            uf.union(i, j);
        }
    }
    let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
    for v in 0..n {
        groups.entry(uf.find(v)).or_default().push(v);
    }
    let mut comps: Vec<Vec<usize>> = groups.into_values().collect();
    // membership was collected in id order, so each component is sorted
    comps.sort_by_key(|c| c[0]);
    Ok(comps)
}

/// Weighted undirected graph of linkage likelihoods, the handoff between
/// link prediction and clustering. Edges are canonicalized to `i < j`,
/// sorted, and unique, with weights in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct LinkageGraph {
    n_nodes: usize,
    edges: Vec<(usize, usize, f64)>,
}

impl LinkageGraph {
    pub fn new(n_nodes: usize, edges: Vec<(usize, usize, f64)>) -> Result<LinkageGraph> {
        let mut canon = Vec::with_capacity(edges.len());
        for (i, j, p) in edges {
            if i >= n_nodes || j >= n_nodes {
                return Err(Error::Index(format!(
                    "edge ({i}, {j}) out of range for {n_nodes} nodes"
                )));
            }
            if i == j {
                return Err(Error::Config(format!("self edge at node {i}")));
            }
            if !p.is_finite() || !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "edge ({i}, {j}) weight {p} outside [0, 1]"
                )));
            }
            canon.push(if i < j { (i, j, p) } else { (j, i, p) });
        }
        canon.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        if let Some(w) = canon.windows(2).find(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return Err(Error::Config(format!("duplicate edge ({}, {})", w[0].0, w[0].1)));
        }
        Ok(LinkageGraph { n_nodes, edges: canon })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    /// Text form: a `#nodes N` header then one `i j p` line per edge.
    pub fn to_text(&self) -> String {
        let mut s = format!("#nodes {}\n", self.n_nodes);
        for &(i, j, p) in &self.edges {
            s.push_str(&format!("{i} {j} {p}\n"));
        }
        s
    }

    /// Parses the [`to_text`](Self::to_text) form. Format errors report the
    /// 1-based line number as the offset.
    pub fn from_text(text: &str) -> Result<LinkageGraph> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Format { offset: 1, msg: "empty linkage file".into() })?;
        let n_nodes: usize = header
            .strip_prefix("#nodes ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Format {
                offset: 1,
                msg: format!("line 1: expected '#nodes N' header, got {header:?}"),
            })?;
        let mut edges = Vec::new();
        for (idx, line) in lines {
            let lineno = (idx + 1) as u64;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let parse = |tok: Option<&str>, what: &str| -> Result<f64> {
                tok.and_then(|t| t.parse::<f64>().ok()).ok_or_else(|| Error::Format {
                    offset: lineno,
                    msg: format!("line {lineno}: bad or missing {what} in {line:?}"),
                })
            };
            let i = parse(it.next(), "source index")?;
            let j = parse(it.next(), "target index")?;
            let p = parse(it.next(), "weight")?;
            if it.next().is_some() {
                return Err(Error::Format {
                    offset: lineno,
                    msg: format!("line {lineno}: trailing tokens in {line:?}"),
                });
            }
            if i.fract() != 0.0 || j.fract() != 0.0 || i < 0.0 || j < 0.0 {
                return Err(Error::Format {
                    offset: lineno,
                    msg: format!("line {lineno}: indices must be non-negative integers"),
                });
            }
            edges.push((i as usize, j as usize, p));
        }
        LinkageGraph::new(n_nodes, edges)
    }
}

/// Per-row cluster labels: ids in `[0, n_clusters)` or -1 for unassigned.
/// Every non-negative label has at least two members.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AssignmentWire")]
pub struct ClusterAssignment {
    labels: Vec<i64>,
    n_clusters: usize,
}

#[derive(Deserialize)]
struct AssignmentWire {
    labels: Vec<i64>,
    n_clusters: usize,
}

impl TryFrom<AssignmentWire> for ClusterAssignment {
    type Error = Error;

    fn try_from(w: AssignmentWire) -> Result<ClusterAssignment> {
        let a = ClusterAssignment::new(w.labels)?;
        if a.n_clusters != w.n_clusters {
            return Err(Error::Config(format!(
                "assignment declares {} clusters but labels imply {}",
                w.n_clusters, a.n_clusters
            )));
        }
        Ok(a)
    }
}

impl ClusterAssignment {
    /// Validates that labels are -1 or a contiguous range starting at 0 and
    /// that every cluster has at least two members.
    pub fn new(labels: Vec<i64>) -> Result<ClusterAssignment> {
        let n_clusters = labels.iter().copied().max().unwrap_or(-1) + 1;
        let n_clusters = usize::try_from(n_clusters).unwrap_or(0);
        let mut sizes = vec![0usize; n_clusters];
        for &l in &labels {
            if l < -1 {
                return Err(Error::Config(format!("label {l} below -1")));
            }
            if l >= 0 {
                sizes[l as usize] += 1;
            }
        }
        if let Some(c) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::Config(format!("cluster {c} has no members")));
        }
        if let Some(c) = sizes.iter().position(|&s| s == 1) {
            return Err(Error::Config(format!("cluster {c} is a labeled singleton")));
        }
        Ok(ClusterAssignment { labels, n_clusters })
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fraction of rows carrying a non-negative label.
    pub fn labeled_ratio(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|&&l| l >= 0).count() as f64 / self.labels.len() as f64
    }
}

/// The threshold ladder: `start, start+step, ...` ending at exactly 1.0.
pub fn eta_schedule(start: f64, step: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0.. {
        let eta = start + i as f64 * step;
        if eta >= 1.0 - 1e-9 || i > 10_000 {
            out.push(1.0);
            break;
        }
        out.push(eta);
    }
    out
}

/// Clusters a linkage graph by repeatedly cutting edges below a rising
/// threshold. Components sized `[2, max_size]` become final clusters;
/// singletons become -1; oversized components are re-cut at the next
/// threshold, and those still oversized at 1.0 are accepted. Cluster ids
/// are ordered by smallest member.
pub fn iterative_threshold_clustering(
    g: &LinkageGraph,
    eta_start: f64,
    eta_step: f64,
    max_size: usize,
) -> Result<ClusterAssignment> {
    if max_size < 2 {
        return Err(Error::Config(format!("max cluster size must be >= 2, got {max_size}")));
    }
    if !(eta_start > 0.0 && eta_start <= 1.0) || !eta_step.is_finite() || eta_step < 1e-6 {
        return Err(Error::Config(format!(
            "bad threshold schedule: start {eta_start}, step {eta_step}"
        )));
    }
    let etas = eta_schedule(eta_start, eta_step);
    let n = g.n_nodes();
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    // each pending entry carries the nodes plus the edges still inside them
    let mut pending: Vec<(Vec<usize>, Vec<(usize, usize, f64)>)> =
        vec![((0..n).collect(), g.edges().to_vec())];
    // the final rung does not cut: whatever is still oversized when the
    // threshold reaches 1.0 is accepted whole instead of shattering
    for &eta in &etas[..etas.len() - 1] {
        let mut next = Vec::new();
        for (nodes, edges) in pending {
            let local_of: HashMap<usize, usize> =
                nodes.iter().enumerate().map(|(l, &v)| (v, l)).collect();
            let mut uf = UnionFind::new(nodes.len());
            let kept: Vec<(usize, usize, f64)> =
                edges.into_iter().filter(|&(_, _, p)| p >= eta).collect();
            for &(i, j, _) in &kept {
                uf.union(local_of[&i], local_of[&j]);
            }
            let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
            for (local, &v) in nodes.iter().enumerate() {
                groups.entry(uf.find(local)).or_default().push(v);
            }
            for comp in groups.into_values() {
                if comp.len() < 2 {
                    continue; // stays unassigned
                }
                if comp.len() <= max_size {
                    clusters.push(comp);
                } else {
                    let inside: HashSet<usize> = comp.iter().copied().collect();
                    let sub: Vec<(usize, usize, f64)> = kept
                        .iter()
                        .filter(|&&(i, j, _)| inside.contains(&i) && inside.contains(&j))
                        .copied()
                        .collect();
                    next.push((comp, sub));
                }
            }
        }
        pending = next;
        if pending.is_empty() {
            break;
        }
    }
    clusters.extend(pending.into_iter().map(|(nodes, _)| nodes));
    clusters.sort_by_key(|c| c[0]);
    let mut labels = vec![-1i64; n];
    for (cid, comp) in clusters.iter().enumerate() {
        for &v in comp {
            labels[v] = cid as i64;
        }
    }
    ClusterAssignment::new(labels)
}
