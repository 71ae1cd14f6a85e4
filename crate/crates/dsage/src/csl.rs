//! Score-based structure search over continuous data.
//!
//! The learner greedily edits a DAG — single-edge additions, deletions, and
//! reversals — to maximize a decomposable Gaussian BIC score, starting from
//! the empty graph. Two drivers share the machinery: plain hill-climbing
//! stops at the first local optimum, while tabu search keeps walking past it
//! (best non-tabu move of any sign, FIFO memory of recently visited
//! structures) and returns the best structure seen. Local scores come from a
//! Gram matrix accumulated once per dataset, so search cost after that pass
//! is independent of the row count.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dag::Dag;
use crate::error::{Error, Result};
use crate::scm::Dataset;

/// Residual variances are floored here before entering the log-likelihood,
/// so perfectly predictable nodes still score finitely.
pub const RESIDUAL_VAR_FLOOR: f64 = 1e-12;

/// Score deltas at or below this threshold do not count as improvements;
/// keeps float noise from driving the climb.
const MIN_IMPROVEMENT: f64 = 1e-9;

/// A Cholesky pivot whose square falls below this fraction of the original
/// diagonal marks the design as rank-deficient; round-off alone can leave
/// exactly collinear columns with a tiny positive pivot.
const SINGULAR_PIVOT_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchAlgorithm {
    HillClimb,
    Tabu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub algorithm: SearchAlgorithm,
    /// FIFO capacity for recently visited structures (tabu search only).
    pub tabu_list_size: usize,
    /// Iterations past the last best-score improvement before tabu search
    /// gives up; defaults to `10 * tabu_list_size`.
    pub max_nonimproving: Option<usize>,
    pub max_iterations: Option<usize>,
    pub max_in_degree: Option<usize>,
    /// Reserved for randomized restarts; the greedy walk itself is
    /// deterministic and never draws from it.
    pub seed: Option<u64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            algorithm: SearchAlgorithm::HillClimb,
            tabu_list_size: 10,
            max_nonimproving: None,
            max_iterations: None,
            max_in_degree: None,
            seed: None,
        }
    }
}

impl SearchConfig {
    pub fn hill_climb() -> Self {
        Self::default()
    }

    pub fn tabu() -> Self {
        Self { algorithm: SearchAlgorithm::Tabu, ..Self::default() }
    }

    fn effective_max_nonimproving(&self) -> usize {
        self.max_nonimproving.unwrap_or(10 * self.tabu_list_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.algorithm == SearchAlgorithm::Tabu && self.tabu_list_size == 0 {
            return Err(Error::InvalidConfig(
                "tabu_list_size must be at least 1 for tabu search".into(),
            ));
        }
        Ok(())
    }
}

/// Memo of local scores keyed by (node, sorted parent set), safe for
/// concurrent readers with serialized inserts.
#[derive(Debug, Default)]
pub struct ScoreCache {
    map: RwLock<HashMap<(usize, Vec<usize>), f64>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl ScoreCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn get(&self, node: usize, parents: &[usize]) -> Option<f64> {
        let found = self
            .map
            .read()
            .expect("score cache lock")
            .get(&(node, parents.to_vec()))
            .copied();
        match found {
            Some(v) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                Some(v)
            }
            None => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                None
            }
        }
    }

    fn insert(&self, node: usize, parents: &[usize], score: f64) {
        self.map
            .write()
            .expect("score cache lock")
            .insert((node, parents.to_vec()), score);
    }

    /// (hits, misses) observed so far.
    pub fn stats(&self) -> (u64, u64) {
        (self.hits.load(Ordering::Relaxed), self.misses.load(Ordering::Relaxed))
    }

    /// Snapshot of every cached entry, for spot-checking against direct
    /// recomputation.
    pub fn entries(&self) -> Vec<((usize, Vec<usize>), f64)> {
        self.map
            .read()
            .expect("score cache lock")
            .iter()
            .map(|(k, v)| (k.clone(), *v))
            .collect()
    }
}

/// Local-score engine over one dataset: a `(d+1) x (d+1)` Gram matrix of the
/// intercept-augmented columns, plus an optional memo cache.
pub struct Scorer<'a> {
    data: &'a Dataset,
    gram: DMatrix<f64>,
    cache: Option<ScoreCache>,
}

impl<'a> Scorer<'a> {
    pub fn new(data: &'a Dataset) -> Result<Self> {
        Ok(Self { data, gram: augmented_gram(data), cache: Some(ScoreCache::new()) })
    }

    /// Same scorer without memoization; searches must return identical
    /// graphs either way.
    pub fn without_cache(data: &'a Dataset) -> Result<Self> {
        Ok(Self { data, gram: augmented_gram(data), cache: None })
    }

    pub fn cache(&self) -> Option<&ScoreCache> {
        self.cache.as_ref()
    }

    pub fn cache_stats(&self) -> (u64, u64) {
        self.cache.as_ref().map_or((0, 0), ScoreCache::stats)
    }

    /// BIC local score of `node` given sorted `parents`.
    pub fn local_score(&self, node: usize, parents: &[usize]) -> Result<f64> {
        if let Some(cache) = &self.cache {
            if let Some(v) = cache.get(node, parents) {
                return Ok(v);
            }
        }
        let score = score_from_gram(&self.gram, self.data.n_rows(), node, parents)?;
        if let Some(cache) = &self.cache {
            cache.insert(node, parents, score);
        }
        Ok(score)
    }

    /// Sum of local scores over a DAG's node/parent decomposition.
    pub fn total_score(&self, dag: &Dag) -> Result<f64> {
        let mut total = 0.0;
        for node in 0..dag.node_count() {
            total += self.local_score(node, dag.parents(node))?;
        }
        Ok(total)
    }
}

/// Gram matrix of `[1 | X]`: entry `(i, j)` is the inner product of
/// augmented columns `i` and `j`, accumulated per entry in row order.
fn augmented_gram(data: &Dataset) -> DMatrix<f64> {
    let d = data.n_cols();
    let n = data.n_rows();
    let mut gram = DMatrix::<f64>::zeros(d + 1, d + 1);
    let mut design = vec![0.0; d + 1];
    for r in 0..n {
        design[0] = 1.0;
        design[1..].copy_from_slice(data.row(r));
        for i in 0..=d {
            let di = design[i];
            for j in i..=d {
                gram[(i, j)] += di * design[j];
            }
        }
    }
    for i in 0..=d {
        for j in (i + 1)..=d {
            gram[(j, i)] = gram[(i, j)];
        }
    }
    gram
}

/// Shared core: OLS of `node` on `parents` (with intercept) read off the
/// Gram matrix; returns the BIC score.
fn score_from_gram(
    gram: &DMatrix<f64>,
    n: usize,
    node: usize,
    parents: &[usize],
) -> Result<f64> {
    let d = gram.nrows() - 1;
    if node >= d {
        return Err(Error::IndexOutOfRange { index: node, node_count: d });
    }
    for w in parents.windows(2) {
        if w[0] >= w[1] {
            return Err(Error::InvalidConfig("parents must be sorted and distinct".into()));
        }
    }
    for &p in parents {
        if p >= d {
            return Err(Error::IndexOutOfRange { index: p, node_count: d });
        }
        if p == node {
            return Err(Error::InvalidConfig("a node cannot be its own parent".into()));
        }
    }
    if n <= parents.len() + 2 {
        return Err(Error::InsufficientRows { required: parents.len() + 3, actual: n });
    }
    let k = parents.len() + 1; // intercept first
    let mut ids = Vec::with_capacity(k);
    ids.push(0usize);
    ids.extend(parents.iter().map(|&p| p + 1));
    let mut a = DMatrix::<f64>::zeros(k, k);
    let mut b = DVector::<f64>::zeros(k);
    for (i, &gi) in ids.iter().enumerate() {
        b[i] = gram[(gi, node + 1)];
        for (j, &gj) in ids.iter().enumerate() {
            a[(i, j)] = gram[(gi, gj)];
        }
    }
    let diag: Vec<f64> = (0..k).map(|i| a[(i, i)]).collect();
    let chol = nalgebra::Cholesky::new(a).ok_or(Error::SingularDesign { node })?;
    let l = chol.l_dirty();
    for (i, &aii) in diag.iter().enumerate() {
        if l[(i, i)] * l[(i, i)] <= SINGULAR_PIVOT_RTOL * aii {
            return Err(Error::SingularDesign { node });
        }
    }
    let beta = chol.solve(&b);
    let yty = gram[(node + 1, node + 1)];
    let rss = yty - beta.dot(&b);
    let nf = n as f64;
    let sigma2 = (rss / nf).max(RESIDUAL_VAR_FLOOR);
    let loglik = -(nf / 2.0) * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0);
    let penalty = ((parents.len() + 2) as f64 / 2.0) * nf.ln();
    Ok(loglik - penalty)
}

/// BIC local score of `node` regressed (with intercept) on `parents`,
/// recomputed from the raw columns. Higher is better. Matches
/// [`Scorer::local_score`] bit for bit on the same inputs, so cached values
/// can be audited against it.
pub fn bic_local(data: &Dataset, node: usize, parents: &[usize]) -> Result<f64> {
    let d = data.n_cols();
    if node >= d {
        return Err(Error::IndexOutOfRange { index: node, node_count: d });
    }
    for &p in parents {
        if p >= d {
            return Err(Error::IndexOutOfRange { index: p, node_count: d });
        }
    }
    let n = data.n_rows();
    // Mini Gram over [1 | parents | node], accumulated per entry in row
    // order exactly like the full Gram so the two routes agree bitwise.
    let k = parents.len() + 2;
    let mut cols = Vec::with_capacity(k);
    cols.push(None); // intercept
    cols.extend(parents.iter().map(|&p| Some(p)));
    cols.push(Some(node));
    let mut mini = DMatrix::<f64>::zeros(k, k);
    for r in 0..n {
        let row = data.row(r);
        for i in 0..k {
            let di = cols[i].map_or(1.0, |c| row[c]);
            for j in i..k {
                let dj = cols[j].map_or(1.0, |c| row[c]);
                mini[(i, j)] += di * dj;
            }
        }
    }
    for i in 0..k {
        for j in (i + 1)..k {
            mini[(j, i)] = mini[(i, j)];
        }
    }
    // Re-dispatch through the shared solve with a relabeled Gram: columns
    // 0..parents.len() are the parents, the last column is the node.
    let sorted_check: Vec<usize> = (0..parents.len()).collect();
    score_from_gram(&mini, n, parents.len(), &sorted_check)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeOp {
    Add,
    Delete,
    Reverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoveRecord {
    pub operation: EdgeOp,
    pub parent: usize,
    pub child: usize,
    pub delta: f64,
    pub score_after: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchReport {
    pub algorithm: SearchAlgorithm,
    pub node_count: usize,
    /// Accepted moves.
    pub iterations: usize,
    pub initial_score: f64,
    /// Score of the returned (best visited) structure.
    pub final_score: f64,
    pub wall_time_s: f64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub moves: Vec<MoveRecord>,
}

impl SearchReport {
    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone)]
pub struct LearnedStructure {
    pub dag: Dag,
    pub report: SearchReport,
}

/// Dispatch on `config.algorithm`.
pub fn learn_structure(data: &Dataset, config: &SearchConfig) -> Result<LearnedStructure> {
    let scorer = Scorer::new(data)?;
    learn_structure_with_scorer(data, config, &scorer)
}

/// Hill-climbing: repeatedly apply the best strictly improving edge edit.
pub fn hill_climb(data: &Dataset, config: &SearchConfig) -> Result<LearnedStructure> {
    let mut cfg = config.clone();
    cfg.algorithm = SearchAlgorithm::HillClimb;
    learn_structure(data, &cfg)
}

/// Tabu search: hill-climb, then keep taking the best non-tabu move of any
/// sign; returns the best structure visited.
pub fn tabu_search(data: &Dataset, config: &SearchConfig) -> Result<LearnedStructure> {
    let mut cfg = config.clone();
    cfg.algorithm = SearchAlgorithm::Tabu;
    learn_structure(data, &cfg)
}

/// Search loop shared by both algorithms, generic over the scorer so the
/// cache-transparency property can be exercised directly.
pub fn learn_structure_with_scorer(
    data: &Dataset,
    config: &SearchConfig,
    scorer: &Scorer,
) -> Result<LearnedStructure> {
    config.validate()?;
    let d = data.n_cols();
    if d < 2 {
        return Err(Error::InvalidConfig("structure search needs at least 2 columns".into()));
    }
    let started = Instant::now();
    let mut state = GraphState::empty(d);
    let mut local = Vec::with_capacity(d);
    for node in 0..d {
        local.push(scorer.local_score(node, &[])?);
    }
    let total = |local: &[f64]| local.iter().sum::<f64>();
    let mut current_score = total(&local);
    let initial_score = current_score;
    let mut best_edges = state.edges.clone();
    let mut best_score = current_score;
    let mut tabu: VecDeque<Vec<(usize, usize)>> = VecDeque::new();
    let tabu_enabled = config.algorithm == SearchAlgorithm::Tabu;
    if tabu_enabled {
        push_tabu(&mut tabu, config.tabu_list_size, state.edge_list());
    }
    let mut escape = false;
    let mut nonimproving = 0usize;
    let mut moves = Vec::new();

    loop {
        if let Some(cap) = config.max_iterations {
            if moves.len() >= cap {
                break;
            }
        }
        let candidates = enumerate_moves(&state, scorer, &local, config, &tabu);
        let require_positive = !escape;
        let chosen = pick_move(&candidates, require_positive);
        let chosen = match chosen {
            Some(m) => m,
            None => {
                if !tabu_enabled {
                    break; // local optimum
                }
                if !escape {
                    escape = true;
                    match pick_move(&candidates, false) {
                        Some(m) => m,
                        None => break, // every move tabu or illegal
                    }
                } else {
                    break;
                }
            }
        };
        state.apply(chosen.op, chosen.parent, chosen.child);
        match chosen.op {
            EdgeOp::Add | EdgeOp::Delete => {
                local[chosen.child] = chosen.child_score;
            }
            EdgeOp::Reverse => {
                local[chosen.child] = chosen.child_score;
                local[chosen.parent] = chosen.parent_score;
            }
        }
        current_score = total(&local);
        moves.push(MoveRecord {
            operation: chosen.op,
            parent: chosen.parent,
            child: chosen.child,
            delta: chosen.delta,
            score_after: current_score,
        });
        if tabu_enabled {
            push_tabu(&mut tabu, config.tabu_list_size, state.edge_list());
        }
        if current_score > best_score + MIN_IMPROVEMENT {
            best_score = current_score;
            best_edges = state.edges.clone();
            nonimproving = 0;
        } else if escape {
            nonimproving += 1;
            if nonimproving >= config.effective_max_nonimproving() {
                break;
            }
        }
    }

    let (hits, misses) = scorer.cache_stats();
    let dag = Dag::new(data.labels().to_vec(), best_edges.iter().copied())?;
    Ok(LearnedStructure {
        dag,
        report: SearchReport {
            algorithm: config.algorithm,
            node_count: d,
            iterations: moves.len(),
            initial_score,
            final_score: best_score,
            wall_time_s: started.elapsed().as_secs_f64(),
            cache_hits: hits,
            cache_misses: misses,
            moves,
        },
    })
}

struct GraphState {
    d: usize,
    edges: BTreeSet<(usize, usize)>,
    parents: Vec<Vec<usize>>,
    children: Vec<BTreeSet<usize>>,
}

impl GraphState {
    fn empty(d: usize) -> Self {
        Self {
            d,
            edges: BTreeSet::new(),
            parents: vec![Vec::new(); d],
            children: vec![BTreeSet::new(); d],
        }
    }

    fn edge_list(&self) -> Vec<(usize, usize)> {
        self.edges.iter().copied().collect()
    }

    /// Directed path from `from` to `to`, optionally pretending one edge is
    /// absent (used when checking reversals).
    fn has_path(&self, from: usize, to: usize, skip: Option<(usize, usize)>) -> bool {
        if from == to {
            return true;
        }
        let mut seen = vec![false; self.d];
        let mut stack = vec![from];
        seen[from] = true;
        while let Some(u) = stack.pop() {
            for &v in &self.children[u] {
                if skip == Some((u, v)) {
                    continue;
                }
                if v == to {
                    return true;
                }
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        false
    }

    fn apply(&mut self, op: EdgeOp, parent: usize, child: usize) {
        match op {
            EdgeOp::Add => {
                self.edges.insert((parent, child));
                insert_sorted(&mut self.parents[child], parent);
                self.children[parent].insert(child);
            }
            EdgeOp::Delete => {
                self.edges.remove(&(parent, child));
                self.parents[child].retain(|&p| p != parent);
                self.children[parent].remove(&child);
            }
            EdgeOp::Reverse => {
                self.apply(EdgeOp::Delete, parent, child);
                self.apply(EdgeOp::Add, child, parent);
            }
        }
    }
}

fn insert_sorted(v: &mut Vec<usize>, x: usize) {
    let pos = v.partition_point(|&e| e < x);
    v.insert(pos, x);
}

fn with_parent(parents: &[usize], extra: usize) -> Vec<usize> {
    let mut out = parents.to_vec();
    insert_sorted(&mut out, extra);
    out
}

fn without_parent(parents: &[usize], drop: usize) -> Vec<usize> {
    parents.iter().copied().filter(|&p| p != drop).collect()
}

#[derive(Debug, Clone, Copy)]
struct CandidateMove {
    op: EdgeOp,
    parent: usize,
    child: usize,
    delta: f64,
    /// New local score of the edited child.
    child_score: f64,
    /// New local score of the old parent (reversals only; else unused).
    parent_score: f64,
}

fn op_rank(op: EdgeOp) -> u8 {
    match op {
        EdgeOp::Add => 0,
        EdgeOp::Delete => 1,
        EdgeOp::Reverse => 2,
    }
}

/// All legal, non-tabu single-edge edits with their score deltas. Moves
/// whose scoring fails (singular designs, too few rows) are dropped.
fn enumerate_moves(
    state: &GraphState,
    scorer: &Scorer,
    local: &[f64],
    config: &SearchConfig,
    tabu: &VecDeque<Vec<(usize, usize)>>,
) -> Vec<CandidateMove> {
    let d = state.d;
    let in_cap = config.max_in_degree.unwrap_or(usize::MAX);
    let mut out = Vec::new();
    let is_tabu = |edges: &BTreeSet<(usize, usize)>| {
        if tabu.is_empty() {
            return false;
        }
        let listed: Vec<(usize, usize)> = edges.iter().copied().collect();
        tabu.iter().any(|t| *t == listed)
    };
    let mut consider = |op: EdgeOp, parent: usize, child: usize| {
        let mut edited = state.edges.clone();
        match op {
            EdgeOp::Add => {
                edited.insert((parent, child));
            }
            EdgeOp::Delete => {
                edited.remove(&(parent, child));
            }
            EdgeOp::Reverse => {
                edited.remove(&(parent, child));
                edited.insert((child, parent));
            }
        }
        if is_tabu(&edited) {
            return;
        }
        match op {
            EdgeOp::Add => {
                let pa = with_parent(&state.parents[child], parent);
                if let Ok(s) = scorer.local_score(child, &pa) {
                    out.push(CandidateMove {
                        op,
                        parent,
                        child,
                        delta: s - local[child],
                        child_score: s,
                        parent_score: f64::NAN,
                    });
                }
            }
            EdgeOp::Delete => {
                let pa = without_parent(&state.parents[child], parent);
                if let Ok(s) = scorer.local_score(child, &pa) {
                    out.push(CandidateMove {
                        op,
                        parent,
                        child,
                        delta: s - local[child],
                        child_score: s,
                        parent_score: f64::NAN,
                    });
                }
            }
            EdgeOp::Reverse => {
                let pa_child = without_parent(&state.parents[child], parent);
                let pa_parent = with_parent(&state.parents[parent], child);
                if let (Ok(sc), Ok(sp)) = (
                    scorer.local_score(child, &pa_child),
                    scorer.local_score(parent, &pa_parent),
                ) {
                    out.push(CandidateMove {
                        op,
                        parent,
                        child,
                        delta: (sc - local[child]) + (sp - local[parent]),
                        child_score: sc,
                        parent_score: sp,
                    });
                }
            }
        }
    };
    for u in 0..d {
        for v in 0..d {
            if u == v || state.edges.contains(&(u, v)) {
                continue;
            }
            if state.parents[v].len() >= in_cap {
                continue;
            }
            // u -> v is acyclic iff no existing path v => u.
            if state.has_path(v, u, None) {
                continue;
            }
            consider(EdgeOp::Add, u, v);
        }
    }
    for &(u, v) in &state.edges {
        consider(EdgeOp::Delete, u, v);
    }
    for &(u, v) in &state.edges {
        if state.parents[u].len() >= in_cap {
            continue;
        }
        // Reversal is acyclic iff no alternative path u => v remains.
        if state.has_path(u, v, Some((u, v))) {
            continue;
        }
        consider(EdgeOp::Reverse, u, v);
    }
    out
}

/// Largest delta wins; exact ties resolve by ascending (operation, parent,
/// child). `require_positive` restricts to strict improvements.
fn pick_move(candidates: &[CandidateMove], require_positive: bool) -> Option<CandidateMove> {
    let mut best: Option<&CandidateMove> = None;
    for c in candidates {
        if require_positive && c.delta <= MIN_IMPROVEMENT {
            continue;
        }
        best = match best {
            None => Some(c),
            Some(b) => {
                let better = c.delta > b.delta
                    || (c.delta == b.delta
                        && (op_rank(c.op), c.parent, c.child)
                            < (op_rank(b.op), b.parent, b.child));
                if better {
                    Some(c)
                } else {
                    Some(b)
                }
            }
        };
    }
    best.copied()
}

fn push_tabu(tabu: &mut VecDeque<Vec<(usize, usize)>>, cap: usize, edges: Vec<(usize, usize)>) {
    if tabu.iter().any(|t| *t == edges) {
        return;
    }
    tabu.push_back(edges);
    while tabu.len() > cap {
        tabu.pop_front();
    }
}
