//! Directed acyclic graphs and d-separation queries.
//!
//! A [`Dag`] is validated at construction: labels are unique and printable,
//! edges are in range, self-loop free, duplicate free, and acyclic. Queries
//! run in linear time via active-trail reachability; [`oracle`] holds an
//! independent moralization-based implementation used as the reference in
//! tests.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A d-separation query: is `x` separated from `y` given `cond_set`?
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DsepQuery {
    pub x: usize,
    pub y: usize,
    pub cond_set: Vec<usize>,
}

impl DsepQuery {
    pub fn new(x: usize, y: usize, cond_set: impl Into<Vec<usize>>) -> Self {
        Self { x, y, cond_set: cond_set.into() }
    }
}

/// Immutable labelled DAG with cached adjacency and topological order.
#[derive(Debug, Clone)]
pub struct Dag {
    labels: Vec<String>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    edges: BTreeSet<(usize, usize)>,
    topo: Vec<usize>,
}

impl PartialEq for Dag {
    fn eq(&self, other: &Self) -> bool {
        self.labels == other.labels && self.edges == other.edges
    }
}
impl Eq for Dag {}

/// Topological order of `node_count` nodes under `edges`, ties broken by
/// ascending node index. Fails with `CycleDetected` on cyclic input.
pub fn topological_order(node_count: usize, edges: &[(usize, usize)]) -> Result<Vec<usize>> {
    let mut indegree = vec![0usize; node_count];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); node_count];
    for &(p, c) in edges {
        for &v in &[p, c] {
            if v >= node_count {
                return Err(Error::IndexOutOfRange { index: v, node_count });
            }
        }
        indegree[c] += 1;
        children[p].push(c);
    }
    let mut ready: BTreeSet<usize> =
        (0..node_count).filter(|&v| indegree[v] == 0).collect();
    let mut order = Vec::with_capacity(node_count);
    while let Some(&v) = ready.iter().next() {
        ready.remove(&v);
        order.push(v);
        for &c in &children[v] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() != node_count {
        return Err(Error::CycleDetected);
    }
    Ok(order)
}

impl Dag {
    /// Builds a DAG, validating labels, edge indices, and acyclicity.
    pub fn new(labels: Vec<String>, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let n = labels.len();
        let mut seen = BTreeSet::new();
        for label in &labels {
            if label.is_empty() || label.contains(',') || label.contains('\n') {
                return Err(Error::Parse(format!("invalid node label {label:?}")));
            }
            if !seen.insert(label.as_str()) {
                return Err(Error::Parse(format!("duplicate node label {label:?}")));
            }
        }
        let mut edge_set = BTreeSet::new();
        for (p, c) in edges {
            for &v in &[p, c] {
                if v >= n {
                    return Err(Error::IndexOutOfRange { index: v, node_count: n });
                }
            }
            if p == c {
                return Err(Error::CycleDetected);
            }
            if !edge_set.insert((p, c)) {
                return Err(Error::Parse(format!("duplicate edge ({p}, {c})")));
            }
        }
        let edge_vec: Vec<(usize, usize)> = edge_set.iter().copied().collect();
        let topo = topological_order(n, &edge_vec)?;
        let mut parents: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(p, c) in &edge_set {
            parents[c].push(p);
            children[p].push(c);
        }
        // BTreeSet iteration gives (p, c) sorted, so children are sorted; sort parents.
        for list in &mut parents {
            list.sort_unstable();
        }
        Ok(Self { labels, parents, children, edges: edge_set, topo })
    }

    /// Builds a DAG with labels `X1..Xn`.
    pub fn with_default_labels(node_count: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let labels = (1..=node_count).map(|i| format!("X{i}")).collect();
        Self::new(labels, edges)
    }

    pub fn node_count(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, parent: usize, child: usize) -> bool {
        self.edges.contains(&(parent, child))
    }

    pub fn parents(&self, v: usize) -> &[usize] {
        &self.parents[v]
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    /// Undirected degree (parents + children).
    pub fn degree(&self, v: usize) -> usize {
        self.parents[v].len() + self.children[v].len()
    }

    /// Cached topological order, ties broken by ascending node index.
    pub fn topological_order(&self) -> &[usize] {
        &self.topo
    }

    fn check_index(&self, v: usize) -> Result<()> {
        if v >= self.node_count() {
            return Err(Error::IndexOutOfRange { index: v, node_count: self.node_count() });
        }
        Ok(())
    }

    /// Nodes in the conditioning set or with a descendant in it.
    fn ancestors_of_set(&self, set: &[bool]) -> Vec<bool> {
        let n = self.node_count();
        let mut marked = vec![false; n];
        let mut stack: Vec<usize> = (0..n).filter(|&v| set[v]).collect();
        for &v in &stack {
            marked[v] = true;
        }
        while let Some(v) = stack.pop() {
            for &p in &self.parents[v] {
                if !marked[p] {
                    marked[p] = true;
                    stack.push(p);
                }
            }
        }
        marked
    }

    /// Whether `query.x` and `query.y` are d-separated given `query.cond_set`.
    ///
    /// Linear-time active-trail reachability: a breadth-first search over
    /// (node, arrival direction) states, where arrival through an incoming
    /// edge may continue to parents only at a collider activated by the
    /// conditioning set's ancestral closure.
    pub fn d_separated(&self, query: &DsepQuery) -> Result<bool> {
        let n = self.node_count();
        self.check_index(query.x)?;
        self.check_index(query.y)?;
        if query.x == query.y {
            return Err(Error::InvalidConditioningSet);
        }
        let mut in_z = vec![false; n];
        for &z in &query.cond_set {
            self.check_index(z)?;
            if z == query.x || z == query.y {
                return Err(Error::InvalidConditioningSet);
            }
            in_z[z] = true;
        }
        let anc_z = self.ancestors_of_set(&in_z);

        const VIA_OUT: usize = 0; // arrived through an edge leaving the node
        const VIA_IN: usize = 1; // arrived through an edge entering the node
        let mut visited = vec![[false; 2]; n];
        let mut stack = vec![(query.x, VIA_OUT)];
        while let Some((v, arr)) = stack.pop() {
            if v == query.y {
                return Ok(false);
            }
            if visited[v][arr] {
                continue;
            }
            visited[v][arr] = true;
            if arr == VIA_OUT {
                if !in_z[v] {
                    for &p in &self.parents[v] {
                        stack.push((p, VIA_OUT));
                    }
                    for &c in &self.children[v] {
                        stack.push((c, VIA_IN));
                    }
                }
            } else {
                if !in_z[v] {
                    for &c in &self.children[v] {
                        stack.push((c, VIA_IN));
                    }
                }
                if anc_z[v] {
                    for &p in &self.parents[v] {
                        stack.push((p, VIA_OUT));
                    }
                }
            }
        }
        Ok(true)
    }
}

/// How [`dsep_share`] enumerates (feature, conditioning set) pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DsepShareMode {
    /// Enumerate every pair; refused above `cap` queries.
    Exact { cap: u64 },
    /// Sample `n_mc` pairs from the uniform-subset scheme.
    MonteCarlo { n_mc: usize, seed: u64 },
}

/// Default query cap for exact share enumeration.
pub const DEFAULT_EXACT_CAP: u64 = 100_000;

impl Default for DsepShareMode {
    fn default() -> Self {
        DsepShareMode::Exact { cap: DEFAULT_EXACT_CAP }
    }
}

/// Draws one (feature position, conditioning positions) pair for a problem
/// with `n_features` features: the feature uniformly, the set size from
/// #{success among n_features-1 fair coin flips}, then the members without
/// replacement. Positions index the feature list, not graph nodes.
pub fn sample_conditioning_query<R: Rng>(rng: &mut R, n_features: usize) -> (usize, Vec<usize>) {
    assert!(n_features >= 1, "need at least one feature");
    let j = rng.gen_range(0..n_features);
    let mut size = 0usize;
    for _ in 0..n_features.saturating_sub(1) {
        if rng.gen::<bool>() {
            size += 1;
        }
    }
    let mut candidates: Vec<usize> = (0..n_features).filter(|&k| k != j).collect();
    for i in 0..size {
        let k = rng.gen_range(i..candidates.len());
        candidates.swap(i, k);
    }
    let mut cond: Vec<usize> = candidates[..size].to_vec();
    cond.sort_unstable();
    (j, cond)
}

/// Number of (feature, conditioning set) queries for a graph with
/// `node_count` nodes and one target.
pub fn exact_query_count(node_count: usize) -> u128 {
    let f = node_count as u128 - 1;
    if f == 0 {
        return 0;
    }
    f * (1u128 << (f - 1))
}

/// Fraction of (feature j, conditioning set S) pairs with j d-separated from
/// `target` given S, where S ranges over subsets of the remaining features.
pub fn dsep_share(dag: &Dag, target: usize, mode: DsepShareMode) -> Result<f64> {
    let n = dag.node_count();
    if target >= n {
        return Err(Error::IndexOutOfRange { index: target, node_count: n });
    }
    if n < 2 {
        return Err(Error::InvalidConfig("share needs at least one feature".into()));
    }
    let features: Vec<usize> = (0..n).filter(|&v| v != target).collect();
    let f = features.len();
    match mode {
        DsepShareMode::Exact { cap } => {
            let required = exact_query_count(n);
            if required > u128::from(cap) {
                return Err(Error::TooLargeForExact { required, cap: u128::from(cap) });
            }
            let mut separated = 0u64;
            let mut total = 0u64;
            for (ji, &j) in features.iter().enumerate() {
                let others: Vec<usize> =
                    features.iter().copied().filter(|&v| v != j).collect();
                for mask in 0u64..(1u64 << (f - 1)) {
                    let cond: Vec<usize> = others
                        .iter()
                        .enumerate()
                        .filter(|(bit, _)| mask >> bit & 1 == 1)
                        .map(|(_, &v)| v)
                        .collect();
                    total += 1;
                    if dag.d_separated(&DsepQuery::new(j, target, cond))? {
                        separated += 1;
                    }
                }
                let _ = ji;
            }
            Ok(separated as f64 / total as f64)
        }
        DsepShareMode::MonteCarlo { n_mc, seed } => {
            if n_mc == 0 {
                return Err(Error::InvalidConfig("n_mc must be >= 1".into()));
            }
            let mut rng = crate::seed::stream_rng(seed, 0);
            let mut separated = 0u64;
            for _ in 0..n_mc {
                let (jpos, cond_pos) = sample_conditioning_query(&mut rng, f);
                let cond: Vec<usize> = cond_pos.iter().map(|&p| features[p]).collect();
                let q = DsepQuery::new(features[jpos], target, cond);
                if dag.d_separated(&q)? {
                    separated += 1;
                }
            }
            Ok(separated as f64 / n_mc as f64)
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DagFile {
    nodes: Vec<String>,
    edges: Vec<(usize, usize)>,
}

impl Dag {
    /// Edge-list text: a `# nodes:` header followed by one
    /// `parent_label,child_label` line per edge.
    pub fn to_edge_list_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# nodes: {}", self.labels.join(","));
        for (p, c) in self.edges() {
            let _ = writeln!(out, "{},{}", self.labels[p], self.labels[c]);
        }
        out
    }

    pub fn from_edge_list_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty graph file".into()))?;
        let labels_part = header
            .strip_prefix("# nodes:")
            .ok_or_else(|| Error::Parse("missing '# nodes:' header".into()))?
            .trim();
        if labels_part.is_empty() {
            return Err(Error::Parse("empty node list".into()));
        }
        let labels: Vec<String> = labels_part.split(',').map(str::to_string).collect();
        let mut edges = Vec::new();
        for line in lines {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let (p, c) = line
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("bad edge line {line:?}")))?;
            let pi = labels
                .iter()
                .position(|l| l == p)
                .ok_or_else(|| Error::Parse(format!("unknown node label {p:?}")))?;
            let ci = labels
                .iter()
                .position(|l| l == c)
                .ok_or_else(|| Error::Parse(format!("unknown node label {c:?}")))?;
            edges.push((pi, ci));
        }
        Self::new(labels, edges)
    }

    /// JSON form: `{"nodes": [...], "edges": [[parent, child], ...]}`.
    pub fn to_json_string(&self) -> Result<String> {
        let file = DagFile { nodes: self.labels.clone(), edges: self.edges().collect() };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: DagFile = serde_json::from_str(text)?;
        Self::new(file.nodes, file.edges)
    }
}

pub mod oracle {
    //! Reference d-separation via moralization, kept independent of the
    //! reachability implementation: it rebuilds adjacency from the raw edge
    //! list and answers by undirected search on the moralized ancestral
    //! subgraph.

    use super::{Dag, DsepQuery};
    use crate::error::{Error, Result};

    /// Moralization-based d-separation; same contract as [`Dag::d_separated`].
    pub fn d_separated_moral(dag: &Dag, query: &DsepQuery) -> Result<bool> {
        let n = dag.node_count();
        for &v in [query.x, query.y].iter().chain(query.cond_set.iter()) {
            if v >= n {
                return Err(Error::IndexOutOfRange { index: v, node_count: n });
            }
        }
        if query.x == query.y
            || query.cond_set.iter().any(|&z| z == query.x || z == query.y)
        {
            return Err(Error::InvalidConditioningSet);
        }
        let edges: Vec<(usize, usize)> = dag.edges().collect();
        let mut parents: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(p, c) in &edges {
            parents[c].push(p);
        }

        // Ancestral closure of {x, y} + conditioning set.
        let mut in_closure = vec![false; n];
        let mut stack = vec![query.x, query.y];
        stack.extend_from_slice(&query.cond_set);
        for &v in &stack {
            in_closure[v] = true;
        }
        while let Some(v) = stack.pop() {
            for &p in &parents[v] {
                if !in_closure[p] {
                    in_closure[p] = true;
                    stack.push(p);
                }
            }
        }

        // Moral graph on the closure: directed edges undirected, plus a link
        // between every pair of co-parents of a node in the closure.
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        let link = |a: usize, b: usize, adj: &mut Vec<Vec<usize>>| {
            adj[a].push(b);
            adj[b].push(a);
        };
        for &(p, c) in &edges {
            if in_closure[p] && in_closure[c] {
                link(p, c, &mut adj);
            }
        }
        for v in 0..n {
            if !in_closure[v] {
                continue;
            }
            let ps = &parents[v];
            for i in 0..ps.len() {
                for k in (i + 1)..ps.len() {
                    if in_closure[ps[i]] && in_closure[ps[k]] {
                        link(ps[i], ps[k], &mut adj);
                    }
                }
            }
        }

        // Undirected reachability avoiding conditioned nodes.
        let mut blocked = vec![false; n];
        for &z in &query.cond_set {
            blocked[z] = true;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![query.x];
        seen[query.x] = true;
        while let Some(v) = stack.pop() {
            if v == query.y {
                return Ok(false);
            }
            for &w in &adj[v] {
                if !seen[w] && !blocked[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        Ok(true)
    }
}
