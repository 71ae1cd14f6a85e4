//! Permutation-sampling global feature-importance estimation, with an
//! optional graph-certified skip rule.
//!
//! The estimator samples feature permutations; at each position it measures
//! the surplus contribution of the next feature — the drop in expected
//! squared-error loss when that feature joins the conditioning prefix — as
//! a dataset mean over marginalized predictions. Averaging per-feature
//! surpluses across permutations yields the importance values. When a DAG
//! over features and target is supplied, positions whose feature the graph
//! d-separates from the target given the prefix are recorded as exact zeros
//! and never evaluated; with the same seed the skipping and non-skipping
//! estimators walk identical permutation sequences and draw identical
//! completions at every evaluated position, because every (permutation,
//! position, row) triple owns its own RNG stream.
//!
//! A closed-form oracle for linear models under a joint Gaussian evaluates
//! the same quantity by full subset enumeration, for small feature counts.

use std::collections::HashSet;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dag::{Dag, DsepQuery};
use crate::error::{Error, Result};
use crate::gaussian::{ConditionalMap, GaussianModel};
use crate::model::{marginalized_mean_with_map, marginalized_predict, PredictBuffers, Predictor};
use crate::scm::Dataset;
use crate::seed::{eval_stream, stream_rng, MAX_FEATURES, MAX_PERMUTATIONS, MAX_ROWS, PERMUTATION_STREAM};

pub const DEFAULT_MIN_PERMUTATIONS: usize = 20;
pub const DEFAULT_CONVERGENCE_THRESHOLD: f64 = 0.025;
pub const DEFAULT_CONDITIONAL_DRAWS: usize = 10;
/// Feature-count cap for the exact enumeration oracle (2^f subsets).
pub const DEFAULT_EXACT_CAP: usize = 8;
/// Value ranges below this floor are treated as this wide by the
/// convergence check, so all-zero estimates still converge.
pub const RANGE_FLOOR: f64 = 1e-6;

/// Whether surplus evaluations may be skipped, and on whose authority.
#[derive(Debug, Clone, Default)]
pub enum SkipMode {
    /// Evaluate every position.
    #[default]
    None,
    /// Skip positions certified zero by d-separation in this graph (nodes
    /// must cover every feature plus the target).
    Graph(Dag),
}

#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    pub n_permutations_max: usize,
    pub min_permutations: usize,
    /// Convergence threshold `t`: every feature's SE must fall to `t` times
    /// the spread of the current estimates.
    pub convergence_threshold: f64,
    /// Conditional completions averaged per marginalized prediction.
    pub m_conditional_draws: usize,
    pub seed: u64,
    pub skip_mode: SkipMode,
}

impl EstimatorConfig {
    pub fn new(n_permutations_max: usize, seed: u64) -> Self {
        Self {
            n_permutations_max,
            min_permutations: DEFAULT_MIN_PERMUTATIONS,
            convergence_threshold: DEFAULT_CONVERGENCE_THRESHOLD,
            m_conditional_draws: DEFAULT_CONDITIONAL_DRAWS,
            seed,
            skip_mode: SkipMode::None,
        }
    }

    /// Same run parameters but exactly `n` permutations, convergence checks
    /// disabled in effect (threshold kept valid, minimum pinned to `n`).
    pub fn fixed_permutations(n: usize, seed: u64) -> Self {
        Self { min_permutations: n, ..Self::new(n, seed) }
    }

    pub fn with_graph(mut self, dag: Dag) -> Self {
        self.skip_mode = SkipMode::Graph(dag);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_permutations == 0 || self.n_permutations_max < self.min_permutations {
            return Err(Error::InvalidConfig(format!(
                "permutation bounds {}..{} are empty",
                self.min_permutations, self.n_permutations_max
            )));
        }
        if self.n_permutations_max > MAX_PERMUTATIONS {
            return Err(Error::InvalidConfig(format!(
                "n_permutations_max {} exceeds stream capacity {}",
                self.n_permutations_max, MAX_PERMUTATIONS
            )));
        }
        let t = self.convergence_threshold;
        if !(0.0 < t && t < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "convergence threshold {t} out of (0, 1)"
            )));
        }
        if self.m_conditional_draws == 0 {
            return Err(Error::InvalidConfig("m_conditional_draws must be >= 1".into()));
        }
        Ok(())
    }
}

/// One position the skip rule fired on. `cond_set` holds sorted feature
/// indices (dataset feature order, not graph node ids).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipEntry {
    pub permutation: usize,
    pub feature: usize,
    pub cond_set: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SageResult {
    pub feature_labels: Vec<String>,
    /// Estimated importance per feature: mean of its surplus entries over
    /// all permutations used (skipped entries count as zero).
    pub phi: Vec<f64>,
    /// Standard error of each phi entry.
    pub delta_se: Vec<f64>,
    /// Per feature, the surplus recorded at each permutation.
    pub delta_history: Vec<Vec<f64>>,
    /// Feature orderings actually walked, by permutation index.
    pub permutations: Vec<Vec<usize>>,
    pub skip_log: Vec<SkipEntry>,
    pub n_permutations_used: usize,
    pub converged: bool,
    /// Positions walked: permutations used times feature count.
    pub evaluations_total: usize,
    pub evaluations_skipped: usize,
    pub wall_time_s: f64,
    pub seed: u64,
    /// Conditioning maps that needed diagonal jitter.
    pub jitter_events: usize,
}

impl SageResult {
    pub fn skip_fraction(&self) -> f64 {
        if self.evaluations_total == 0 {
            0.0
        } else {
            self.evaluations_skipped as f64 / self.evaluations_total as f64
        }
    }

    /// Compact JSON: estimates, counts, and timing (histories omitted).
    pub fn summary_json_string(&self) -> Result<String> {
        let value = serde_json::json!({
            "feature_labels": self.feature_labels,
            "phi": self.phi,
            "delta_se": self.delta_se,
            "n_permutations_used": self.n_permutations_used,
            "converged": self.converged,
            "evaluations_total": self.evaluations_total,
            "evaluations_skipped": self.evaluations_skipped,
            "skip_fraction": self.skip_fraction(),
            "wall_time_s": self.wall_time_s,
            "seed": self.seed,
            "jitter_events": self.jitter_events,
        });
        Ok(serde_json::to_string_pretty(&value)?)
    }

    /// Long-format CSV of every walked position:
    /// `permutation,feature,s_size,delta,skipped`.
    pub fn deltas_csv_string(&self) -> Result<String> {
        let skipped: HashSet<(usize, usize)> = self
            .skip_log
            .iter()
            .map(|e| (e.permutation, e.feature))
            .collect();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["permutation", "feature", "s_size", "delta", "skipped"])
            .map_err(|e| Error::Parse(e.to_string()))?;
        for (p, perm) in self.permutations.iter().enumerate() {
            for (pos, &j) in perm.iter().enumerate() {
                w.write_record([
                    p.to_string(),
                    self.feature_labels[j].clone(),
                    pos.to_string(),
                    format!("{:e}", self.delta_history[j][p]),
                    skipped.contains(&(p, j)).to_string(),
                ])
                .map_err(|e| Error::Parse(e.to_string()))?;
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// The feature ordering walked at `index` under `seed` — pure, so any run
/// can be recounted after the fact.
pub fn permutation_for(seed: u64, index: usize, n_features: usize) -> Vec<usize> {
    let mut rng = stream_rng(seed, PERMUTATION_STREAM | index as u64);
    let mut order: Vec<usize> = (0..n_features).collect();
    // Fisher-Yates, draws fixed by the (seed, index) stream alone.
    for i in (1..n_features).rev() {
        let k = rand::Rng::gen_range(&mut rng, 0..=i);
        order.swap(i, k);
    }
    order
}

/// Surplus contribution of feature `j` beyond conditioning set `s` for one
/// instance: squared-error loss of the marginalized prediction under `s`
/// minus the loss under `s ∪ {j}`.
pub fn surplus_delta(
    x: &[f64],
    y: f64,
    model: &dyn Predictor,
    gm: &GaussianModel,
    j: usize,
    s: &[usize],
    m: usize,
    seed: u64,
) -> Result<f64> {
    if s.contains(&j) {
        return Err(Error::InvalidConditioningSet);
    }
    let mut s_sorted = s.to_vec();
    s_sorted.sort_unstable();
    let mut with_j = s_sorted.clone();
    with_j.push(j);
    with_j.sort_unstable();
    let gather = |ids: &[usize]| ids.iter().map(|&i| x[i]).collect::<Vec<f64>>();
    let p1 = marginalized_predict(model, gm, &s_sorted, &gather(&s_sorted), m, seed)?;
    let p2 = marginalized_predict(model, gm, &with_j, &gather(&with_j), m, seed.wrapping_add(1))?;
    Ok((p1 - y) * (p1 - y) - (p2 - y) * (p2 - y))
}

/// True once every feature's surplus-mean standard error falls to `t` times
/// the spread of the current estimates (spread floored at [`RANGE_FLOOR`]).
pub fn check_convergence(delta_history: &[Vec<f64>], t: f64) -> bool {
    if delta_history.is_empty() {
        return false;
    }
    let n = delta_history[0].len();
    if n < 2 || delta_history.iter().any(|h| h.len() != n) {
        return false;
    }
    let nf = n as f64;
    let means: Vec<f64> = delta_history.iter().map(|h| h.iter().sum::<f64>() / nf).collect();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &m in &means {
        lo = lo.min(m);
        hi = hi.max(m);
    }
    let range = (hi - lo).max(RANGE_FLOOR);
    for (h, &mean) in delta_history.iter().zip(means.iter()) {
        let var = h.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nf - 1.0);
        let se = (var / nf).sqrt();
        if se > t * range {
            return false;
        }
    }
    true
}

/// Permutation-sampling estimate with every position evaluated.
pub fn sage_estimate(
    data: &Dataset,
    model: &dyn Predictor,
    gm: &GaussianModel,
    config: &EstimatorConfig,
) -> Result<SageResult> {
    if matches!(config.skip_mode, SkipMode::Graph(_)) {
        return Err(Error::InvalidConfig(
            "sage_estimate runs without a skip graph; use dsage_estimate".into(),
        ));
    }
    run_estimator(data, model, gm, config)
}

/// Permutation-sampling estimate with graph-certified zero positions
/// skipped.
pub fn dsage_estimate(
    data: &Dataset,
    model: &dyn Predictor,
    gm: &GaussianModel,
    config: &EstimatorConfig,
) -> Result<SageResult> {
    if !matches!(config.skip_mode, SkipMode::Graph(_)) {
        return Err(Error::InvalidConfig(
            "dsage_estimate needs skip_mode with a graph".into(),
        ));
    }
    run_estimator(data, model, gm, config)
}

struct SkipOracle {
    dag: Dag,
    /// Graph node id of each feature, in dataset feature order.
    feature_nodes: Vec<usize>,
    target_node: usize,
}

impl SkipOracle {
    fn new(dag: &Dag, feature_labels: &[String], target_label: &str) -> Result<Self> {
        let mut feature_nodes = Vec::with_capacity(feature_labels.len());
        for l in feature_labels {
            let idx = dag
                .label_index(l)
                .ok_or_else(|| Error::GraphMismatch { missing: l.clone() })?;
            feature_nodes.push(idx);
        }
        let target_node = dag
            .label_index(target_label)
            .ok_or_else(|| Error::GraphMismatch { missing: target_label.to_string() })?;
        Ok(Self { dag: dag.clone(), feature_nodes, target_node })
    }

    fn separated(&self, j: usize, cond: &[usize]) -> Result<bool> {
        let cond_nodes: Vec<usize> = cond.iter().map(|&c| self.feature_nodes[c]).collect();
        self.dag.d_separated(&DsepQuery::new(
            self.feature_nodes[j],
            self.target_node,
            cond_nodes,
        ))
    }
}

fn run_estimator(
    data: &Dataset,
    model: &dyn Predictor,
    gm: &GaussianModel,
    config: &EstimatorConfig,
) -> Result<SageResult> {
    config.validate()?;
    let started = Instant::now();
    let target_label = data
        .target_label()
        .ok_or_else(|| Error::InvalidConfig("dataset has no designated target".into()))?
        .to_string();
    let fidx = data.feature_indices()?;
    let d = fidx.len();
    let n = data.n_rows();
    if d == 0 {
        return Err(Error::InvalidConfig("no feature columns".into()));
    }
    if d > MAX_FEATURES {
        return Err(Error::InvalidConfig(format!(
            "{d} features exceed stream capacity {MAX_FEATURES}"
        )));
    }
    if n == 0 {
        return Err(Error::InsufficientRows { required: 1, actual: 0 });
    }
    if n > MAX_ROWS {
        return Err(Error::InvalidConfig(format!(
            "{n} rows exceed stream capacity {MAX_ROWS}"
        )));
    }
    let feature_labels: Vec<String> =
        fidx.iter().map(|&c| data.labels()[c].clone()).collect();
    if model.feature_labels() != feature_labels.as_slice() {
        return Err(Error::LabelMismatch {
            detail: format!(
                "model features {:?} do not match data features {:?}",
                model.feature_labels(),
                feature_labels
            ),
        });
    }
    if gm.labels() != feature_labels.as_slice() {
        return Err(Error::LabelMismatch {
            detail: format!(
                "gaussian labels {:?} do not match data features {:?}",
                gm.labels(),
                feature_labels
            ),
        });
    }
    let skip_oracle = match &config.skip_mode {
        SkipMode::None => None,
        SkipMode::Graph(dag) => Some(SkipOracle::new(dag, &feature_labels, &target_label)?),
    };

    // Feature matrix (row-major) and target vector, extracted once.
    let ti = data.column_index(&target_label).expect("validated");
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    for r in 0..n {
        let row = data.row(r);
        xs.extend(fidx.iter().map(|&c| row[c]));
        ys.push(row[ti]);
    }

    let m = config.m_conditional_draws;
    let seed = config.seed;
    let mut history: Vec<Vec<f64>> = vec![Vec::new(); d];
    let mut permutations: Vec<Vec<usize>> = Vec::new();
    let mut skip_log: Vec<SkipEntry> = Vec::new();
    let mut jitter_events = 0usize;
    let mut converged = false;

    for perm_idx in 0..config.n_permutations_max {
        let perm = permutation_for(seed, perm_idx, d);
        let mut prefix: Vec<usize> = Vec::with_capacity(d);
        for (pos, &j) in perm.iter().enumerate() {
            let mut cond = prefix.clone();
            cond.sort_unstable();
            let skip = match &skip_oracle {
                Some(oracle) => oracle.separated(j, &cond)?,
                None => false,
            };
            if skip {
                skip_log.push(SkipEntry { permutation: perm_idx, feature: j, cond_set: cond });
                history[j].push(0.0);
                prefix.push(j);
                continue;
            }
            let map_s = gm.conditional_map(&cond)?;
            let mut with_j = cond.clone();
            with_j.push(j);
            with_j.sort_unstable();
            // The final position conditions on every feature: the
            // marginalized prediction degenerates to a plain predict.
            let map_sj = if with_j.len() == d {
                None
            } else {
                Some(gm.conditional_map(&with_j)?)
            };
            if map_s.jitter_used() > 0.0
                || map_sj.as_ref().is_some_and(|m| m.jitter_used() > 0.0)
            {
                jitter_events += 1;
            }
            let delta = mean_surplus_over_rows(
                model, &xs, &ys, n, d, &cond, &with_j, &map_s, map_sj.as_ref(), m, seed,
                perm_idx, pos,
            );
            history[j].push(delta);
            prefix.push(j);
        }
        permutations.push(perm);
        let used = perm_idx + 1;
        if used >= config.min_permutations
            && check_convergence(&history, config.convergence_threshold)
        {
            converged = true;
            break;
        }
    }

    let used = permutations.len();
    let uf = used as f64;
    let phi: Vec<f64> = history.iter().map(|h| h.iter().sum::<f64>() / uf).collect();
    let delta_se: Vec<f64> = history
        .iter()
        .zip(phi.iter())
        .map(|(h, &mean)| {
            if used < 2 {
                f64::INFINITY
            } else {
                let var =
                    h.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (uf - 1.0);
                (var / uf).sqrt()
            }
        })
        .collect();
    let evaluations_skipped = skip_log.len();
    Ok(SageResult {
        feature_labels,
        phi,
        delta_se,
        delta_history: history,
        permutations,
        skip_log,
        n_permutations_used: used,
        converged,
        evaluations_total: used * d,
        evaluations_skipped,
        wall_time_s: started.elapsed().as_secs_f64(),
        seed,
        jitter_events,
    })
}

/// Per-row surpluses at one walk position of a run, recomputed from
/// scratch. Because every (permutation, position, row) triple owns its RNG
/// stream, the values — and their mean — reproduce what [`sage_estimate`]
/// recorded at that position bit for bit, which makes after-the-fact audits
/// of skipped positions possible without storing per-row data.
pub fn position_surpluses(
    data: &Dataset,
    model: &dyn Predictor,
    gm: &GaussianModel,
    perm_index: usize,
    feature: usize,
    cond: &[usize],
    m: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if m == 0 {
        return Err(Error::InvalidConfig("m must be >= 1".into()));
    }
    let fidx = data.feature_indices()?;
    let d = fidx.len();
    if feature >= d {
        return Err(Error::IndexOutOfRange { index: feature, node_count: d });
    }
    let mut cond_sorted = cond.to_vec();
    cond_sorted.sort_unstable();
    cond_sorted.dedup();
    if cond_sorted.len() != cond.len()
        || cond_sorted.contains(&feature)
        || cond_sorted.iter().any(|&c| c >= d)
    {
        return Err(Error::InvalidConditioningSet);
    }
    let target_label = data
        .target_label()
        .ok_or_else(|| Error::InvalidConfig("dataset has no designated target".into()))?
        .to_string();
    let feature_labels: Vec<String> =
        fidx.iter().map(|&c| data.labels()[c].clone()).collect();
    if model.feature_labels() != feature_labels.as_slice()
        || gm.labels() != feature_labels.as_slice()
    {
        return Err(Error::LabelMismatch {
            detail: "model, gaussian, and data feature labels must agree".into(),
        });
    }
    let n = data.n_rows();
    let ti = data.column_index(&target_label).expect("validated");
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    for r in 0..n {
        let row = data.row(r);
        xs.extend(fidx.iter().map(|&c| row[c]));
        ys.push(row[ti]);
    }
    let map_s = gm.conditional_map(&cond_sorted)?;
    let mut with_j = cond_sorted.clone();
    with_j.push(feature);
    with_j.sort_unstable();
    let map_sj = if with_j.len() == d { None } else { Some(gm.conditional_map(&with_j)?) };
    // The walk always conditions on the position-long prefix.
    let pos = cond_sorted.len();
    Ok(surpluses_over_rows(
        model, &xs, &ys, n, d, &cond_sorted, &with_j, &map_s, map_sj.as_ref(), m, seed,
        perm_index, pos,
    ))
}

/// Dataset-mean surplus at one walk position. Row work runs in parallel;
/// every row's draws come from its own (permutation, position, row) stream
/// and the sum is taken serially in row order, so the result is identical
/// for any worker count.
#[allow(clippy::too_many_arguments)]
fn mean_surplus_over_rows(
    model: &dyn Predictor,
    xs: &[f64],
    ys: &[f64],
    n: usize,
    d: usize,
    cond: &[usize],
    with_j: &[usize],
    map_s: &ConditionalMap,
    map_sj: Option<&ConditionalMap>,
    m: usize,
    seed: u64,
    perm_idx: usize,
    pos: usize,
) -> f64 {
    let per_row = surpluses_over_rows(
        model, xs, ys, n, d, cond, with_j, map_s, map_sj, m, seed, perm_idx, pos,
    );
    per_row.iter().sum::<f64>() / n as f64
}

#[allow(clippy::too_many_arguments)]
fn surpluses_over_rows(
    model: &dyn Predictor,
    xs: &[f64],
    ys: &[f64],
    n: usize,
    d: usize,
    cond: &[usize],
    with_j: &[usize],
    map_s: &ConditionalMap,
    map_sj: Option<&ConditionalMap>,
    m: usize,
    seed: u64,
    perm_idx: usize,
    pos: usize,
) -> Vec<f64> {
    (0..n)
        .into_par_iter()
        .map_init(
            || (PredictBuffers::new(d), vec![0.0; d]),
            |(buf, gather), r| {
                let row = &xs[r * d..(r + 1) * d];
                let y = ys[r];
                let mut rng = stream_rng(seed, eval_stream(perm_idx, pos, r));
                for (k, &c) in cond.iter().enumerate() {
                    gather[k] = row[c];
                }
                let p1 = marginalized_mean_with_map(
                    model,
                    map_s,
                    &gather[..cond.len()],
                    m,
                    &mut rng,
                    buf,
                );
                let p2 = match map_sj {
                    Some(map) => {
                        for (k, &c) in with_j.iter().enumerate() {
                            gather[k] = row[c];
                        }
                        marginalized_mean_with_map(
                            model,
                            map,
                            &gather[..with_j.len()],
                            m,
                            &mut rng,
                            buf,
                        )
                    }
                    None => model.predict(row),
                };
                (p1 - y) * (p1 - y) - (p2 - y) * (p2 - y)
            },
        )
        .collect()
}

/// Closed-form importance values for a linear model under a joint Gaussian
/// with squared-error loss, by full subset enumeration with exact Shapley
/// weights. `gm` must cover the features and the target jointly.
pub fn exact_sage(
    gm: &GaussianModel,
    model: &crate::model::LinearModel,
    target_label: &str,
    cap: usize,
) -> Result<Vec<f64>> {
    let ctx = ExactContext::new(gm, model, target_label)?;
    let f = ctx.features.len();
    if f > cap {
        return Err(Error::TooLargeForExact { required: f as u128, cap: cap as u128 });
    }
    let masks = 1usize << f;
    let mut risk = vec![0.0; masks];
    for (mask, r) in risk.iter_mut().enumerate() {
        *r = ctx.risk_of_mask(mask)?;
    }
    // Shapley weights over subset sizes: s!(f-1-s)!/f!.
    let mut fact = vec![1.0; f + 1];
    for i in 1..=f {
        fact[i] = fact[i - 1] * i as f64;
    }
    let weight = |s: usize| fact[s] * fact[f - 1 - s] / fact[f];
    let mut phi = vec![0.0; f];
    for (j, p) in phi.iter_mut().enumerate() {
        let bit = 1usize << j;
        for mask in 0..masks {
            if mask & bit != 0 {
                continue;
            }
            let s = mask.count_ones() as usize;
            // Surplus value of adding j: v(S∪j) − v(S) = R(S) − R(S∪j).
            *p += weight(s) * (risk[mask] - risk[mask | bit]);
        }
    }
    Ok(phi)
}

/// Closed-form value `v(S) = R(∅) − R(S)` of a feature subset (indices in
/// feature order) under the same setting as [`exact_sage`].
pub fn exact_value_function(
    gm: &GaussianModel,
    model: &crate::model::LinearModel,
    target_label: &str,
    subset: &[usize],
) -> Result<f64> {
    let ctx = ExactContext::new(gm, model, target_label)?;
    let f = ctx.features.len();
    let mut mask = 0usize;
    for &j in subset {
        if j >= f {
            return Err(Error::IndexOutOfRange { index: j, node_count: f });
        }
        let bit = 1usize << j;
        if mask & bit != 0 {
            return Err(Error::InvalidConditioningSet);
        }
        mask |= bit;
    }
    Ok(ctx.risk_of_mask(0)? - ctx.risk_of_mask(mask)?)
}

struct ExactContext<'a> {
    gm: &'a GaussianModel,
    /// Gaussian coordinate of each feature, in model feature order.
    features: Vec<usize>,
    target: usize,
    /// Model coefficients aligned with `features`.
    w: Vec<f64>,
    alpha: f64,
}

impl<'a> ExactContext<'a> {
    fn new(
        gm: &'a GaussianModel,
        model: &crate::model::LinearModel,
        target_label: &str,
    ) -> Result<Self> {
        let labels = gm.labels();
        let target = labels
            .iter()
            .position(|l| l == target_label)
            .ok_or_else(|| Error::LabelMismatch {
                detail: format!("target {target_label:?} not among gaussian labels"),
            })?;
        let feature_labels: Vec<&String> =
            labels.iter().enumerate().filter(|&(i, _)| i != target).map(|(_, l)| l).collect();
        if model.feature_labels.len() != feature_labels.len()
            || !model
                .feature_labels
                .iter()
                .zip(feature_labels.iter())
                .all(|(a, b)| a == *b)
        {
            return Err(Error::LabelMismatch {
                detail: format!(
                    "model features {:?} do not match gaussian non-target labels {:?}",
                    model.feature_labels, feature_labels
                ),
            });
        }
        let features: Vec<usize> = (0..labels.len()).filter(|&i| i != target).collect();
        Ok(Self { gm, features, target, w: model.coefficients.clone(), alpha: model.intercept })
    }

    /// Expected squared-error risk of the marginalized predictor that
    /// conditions on the feature subset encoded by `mask`.
    fn risk_of_mask(&self, mask: usize) -> Result<f64> {
        let cov = self.gm.cov();
        let mu = self.gm.mean();
        let f = self.features.len();
        let mut s_feats = Vec::new(); // feature-order positions in S
        let mut o_feats = Vec::new(); // and outside S
        for j in 0..f {
            if mask & (1 << j) != 0 {
                s_feats.push(j);
            } else {
                o_feats.push(j);
            }
        }
        let gi = |j: usize| self.features[j]; // gaussian coordinate
        let mu_y = mu[self.target];
        let var_y = cov[(self.target, self.target)];

        if s_feats.is_empty() {
            // Fully marginalized: constant prediction alpha + w . mu_X.
            let mut a = self.alpha;
            for j in 0..f {
                a += self.w[j] * mu[gi(j)];
            }
            let me = a - mu_y;
            return Ok(me * me + var_y);
        }

        let ns = s_feats.len();
        let mut sig_ss = DMatrix::<f64>::zeros(ns, ns);
        for (a, &ja) in s_feats.iter().enumerate() {
            for (b, &jb) in s_feats.iter().enumerate() {
                sig_ss[(a, b)] = cov[(gi(ja), gi(jb))];
            }
        }
        let chol = nalgebra::Cholesky::new(sig_ss.clone())
            .ok_or(Error::NumericallySingular { max_jitter: 0.0 })?;

        // Effective affine predictor f_S(x) = a + b . x_S with
        // b = w_S + K^T w_out, K = Sig_out,S Sig_SS^{-1}.
        let mut b = DVector::<f64>::zeros(ns);
        for (a, &ja) in s_feats.iter().enumerate() {
            b[a] = self.w[ja];
        }
        let mut a_const = self.alpha;
        if !o_feats.is_empty() {
            let no = o_feats.len();
            let mut sig_os = DMatrix::<f64>::zeros(no, ns);
            for (r, &jo) in o_feats.iter().enumerate() {
                for (c, &js) in s_feats.iter().enumerate() {
                    sig_os[(r, c)] = cov[(gi(jo), gi(js))];
                }
            }
            let mut w_out = DVector::<f64>::zeros(no);
            let mut mu_out_dot = 0.0;
            for (r, &jo) in o_feats.iter().enumerate() {
                w_out[r] = self.w[jo];
                mu_out_dot += self.w[jo] * mu[gi(jo)];
            }
            // K^T w_out = Sig_SS^{-1} (Sig_os^T w_out).
            let kt_w = chol.solve(&(sig_os.transpose() * &w_out));
            let mut mu_s = DVector::<f64>::zeros(ns);
            for (a, &js) in s_feats.iter().enumerate() {
                mu_s[a] = mu[gi(js)];
            }
            a_const += mu_out_dot - kt_w.dot(&mu_s);
            b += kt_w;
        }

        let mut mu_s = DVector::<f64>::zeros(ns);
        let mut c_sy = DVector::<f64>::zeros(ns);
        for (a, &js) in s_feats.iter().enumerate() {
            mu_s[a] = mu[gi(js)];
            c_sy[a] = cov[(gi(js), self.target)];
        }
        let mean_err = a_const + b.dot(&mu_s) - mu_y;
        let quad = (&sig_ss * &b).dot(&b);
        Ok(mean_err * mean_err + quad - 2.0 * b.dot(&c_sy) + var_y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{fit_ols, LinearModel};
    use crate::scm::LinearGaussianScm;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use std::collections::BTreeMap;

    /// y = x1 exactly, one feature.
    fn identity_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let x: f64 = rng.sample(StandardNormal);
            values.extend_from_slice(&[x, x]);
        }
        Dataset::new(vec!["x1".into(), "y".into()], values, n)
            .unwrap()
            .with_target("y")
            .unwrap()
    }

    fn unit_gaussian(labels: Vec<String>) -> GaussianModel {
        let d = labels.len();
        GaussianModel::from_moments(labels, DVector::zeros(d), DMatrix::identity(d, d))
            .unwrap()
    }

    #[test]
    fn single_feature_surplus_recovers_target_variance() {
        let n = 20_000;
        let data = identity_dataset(n, 1);
        let gm = unit_gaussian(vec!["x1".into()]);
        let model = LinearModel {
            intercept: 0.0,
            coefficients: vec![1.0],
            feature_labels: vec!["x1".into()],
        };
        let mut acc = 0.0;
        for r in 0..n {
            let row = data.row(r);
            acc += surplus_delta(&row[..1], row[1], &model, &gm, 0, &[], 200, r as u64)
                .unwrap();
        }
        let mean = acc / n as f64;
        assert!((mean - 1.0).abs() <= 0.05, "mean surplus {mean}");
    }

    /// Features (x1 relevant, x2 pure noise), y = x1 + 0.3 e.
    fn relevant_plus_dummy(n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(3 * n);
        for _ in 0..n {
            let x1: f64 = rng.sample(StandardNormal);
            let x2: f64 = rng.sample(StandardNormal);
            let e: f64 = rng.sample(StandardNormal);
            values.extend_from_slice(&[x1, x2, x1 + 0.3 * e]);
        }
        Dataset::new(vec!["x1".into(), "x2".into(), "y".into()], values, n)
            .unwrap()
            .with_target("y")
            .unwrap()
    }

    #[test]
    fn dummy_feature_surplus_is_statistically_zero() {
        let n = 4_000;
        let data = relevant_plus_dummy(n, 2);
        let gm = unit_gaussian(vec!["x1".into(), "x2".into()]);
        let model = LinearModel {
            intercept: 0.0,
            coefficients: vec![1.0, 0.0],
            feature_labels: vec!["x1".into(), "x2".into()],
        };
        for s in [vec![], vec![0usize]] {
            let mut deltas = Vec::with_capacity(n);
            for r in 0..n {
                let row = data.row(r);
                deltas.push(
                    surplus_delta(&row[..2], row[2], &model, &gm, 1, &s, 30, r as u64)
                        .unwrap(),
                );
            }
            let mean = deltas.iter().sum::<f64>() / n as f64;
            let var = deltas.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (n as f64 - 1.0);
            let se = (var / n as f64).sqrt();
            assert!(
                mean.abs() <= 3.0 * se,
                "dummy surplus mean {mean} exceeds 3 SE {se} (S = {s:?})"
            );
        }
    }

    /// Chain X1 -> X2 -> Y as a standardized linear-Gaussian system; the
    /// dataset carries features and target, the Gaussian covers features.
    fn chain_system(n: usize, seed: u64) -> (Dataset, GaussianModel, LinearModel, Dag) {
        let dag = Dag::new(
            vec!["X1".into(), "X2".into(), "Y".into()],
            vec![(0, 1), (1, 2)],
        )
        .unwrap();
        let weights = BTreeMap::from([((0, 1), 0.8), ((1, 2), 0.7)]);
        let scm = LinearGaussianScm::standardized(dag.clone(), weights, 0.05).unwrap();
        let data = scm.sample(n, seed).with_target("Y").unwrap();
        let cov = scm.implied_covariance();
        let gm = GaussianModel::from_moments(
            vec!["X1".into(), "X2".into()],
            DVector::zeros(2),
            DMatrix::from_fn(2, 2, |i, j| cov[(i, j)]),
        )
        .unwrap();
        // Population regression of Y on (X1, X2): the chain makes the X1
        // coefficient exactly zero.
        let b2 = cov[(1, 2)] / cov[(1, 1)];
        let model = LinearModel {
            intercept: 0.0,
            coefficients: vec![0.0, b2],
            feature_labels: vec!["X1".into(), "X2".into()],
        };
        (data, gm, model, dag)
    }

    #[test]
    fn separated_position_surplus_is_statistically_zero() {
        let n = 5_000;
        let (data, gm, model, _) = chain_system(n, 3);
        // X1 given S = {X2}: the SEM d-separates X1 from Y.
        let mut deltas = Vec::with_capacity(n);
        for r in 0..n {
            let row = data.row(r);
            deltas.push(
                surplus_delta(&row[..2], row[2], &model, &gm, 0, &[1], 30, r as u64)
                    .unwrap(),
            );
        }
        let mean = deltas.iter().sum::<f64>() / n as f64;
        let var =
            deltas.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        assert!(mean.abs() <= 3.0 * se, "separated surplus mean {mean}, se {se}");
    }

    #[test]
    fn skip_rule_fires_exactly_on_separated_prefixes_and_phi_agrees() {
        let (data, gm, model, dag) = chain_system(2_000, 4);
        let plain_cfg = EstimatorConfig {
            convergence_threshold: 1e-4,
            m_conditional_draws: 10,
            ..EstimatorConfig::fixed_permutations(60, 11)
        };
        let plain = sage_estimate(&data, &model, &gm, &plain_cfg).unwrap();
        let skip_cfg = plain_cfg.clone().with_graph(dag);
        let skipped = dsage_estimate(&data, &model, &gm, &skip_cfg).unwrap();

        assert_eq!(plain.n_permutations_used, 60);
        assert_eq!(skipped.n_permutations_used, 60);
        // The only separated query is X1 given {X2}; it appears whenever
        // the permutation puts X2 first, i.e., about half the time.
        assert!(!skipped.skip_log.is_empty());
        for e in &skipped.skip_log {
            assert_eq!(e.feature, 0);
            assert_eq!(e.cond_set, vec![1]);
        }
        assert_eq!(skipped.evaluations_skipped, skipped.skip_log.len());
        let frac = skipped.skip_fraction();
        assert!((0.1..0.4).contains(&frac), "skip fraction {frac}");

        // Estimates stay close despite the skipped zeros.
        for j in 0..2 {
            assert!(
                (plain.phi[j] - skipped.phi[j]).abs() <= 0.02,
                "phi[{j}] {} vs {}",
                plain.phi[j],
                skipped.phi[j]
            );
        }
        // At skipped positions the evaluating estimator saw surpluses that
        // average to zero within noise.
        let mut vals = Vec::new();
        for e in &skipped.skip_log {
            vals.push(plain.delta_history[e.feature][e.permutation]);
        }
        let k = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / k;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0);
        let se = (var / k).sqrt();
        assert!(
            mean.abs() <= 3.0 * se.max(1e-4),
            "skipped-position surplus mean {mean}, se {se}"
        );
    }

    #[test]
    fn graph_without_separations_changes_nothing_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 400;
        let mut values = Vec::with_capacity(4 * n);
        for _ in 0..n {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            let c: f64 = rng.sample(StandardNormal);
            values.extend_from_slice(&[a, b, c, a - b + 0.5 * c]);
        }
        let labels: Vec<String> =
            ["f1", "f2", "f3", "y"].iter().map(|s| s.to_string()).collect();
        let data = Dataset::new(labels, values, n).unwrap().with_target("y").unwrap();
        let gm = unit_gaussian(vec!["f1".into(), "f2".into(), "f3".into()]);
        let model = fit_ols(&data).unwrap();
        // Every feature points at the target: nothing is ever separated.
        let dag = Dag::new(
            vec!["f1".into(), "f2".into(), "f3".into(), "y".into()],
            vec![(0, 3), (1, 3), (2, 3)],
        )
        .unwrap();
        let cfg = EstimatorConfig {
            m_conditional_draws: 5,
            ..EstimatorConfig::fixed_permutations(25, 17)
        };
        let plain = sage_estimate(&data, &model, &gm, &cfg).unwrap();
        let graphed =
            dsage_estimate(&data, &model, &gm, &cfg.clone().with_graph(dag)).unwrap();
        assert!(graphed.skip_log.is_empty());
        assert_eq!(plain.n_permutations_used, graphed.n_permutations_used);
        for j in 0..3 {
            assert_eq!(plain.phi[j].to_bits(), graphed.phi[j].to_bits(), "phi[{j}]");
            for p in 0..plain.n_permutations_used {
                assert_eq!(
                    plain.delta_history[j][p].to_bits(),
                    graphed.delta_history[j][p].to_bits()
                );
            }
        }
    }

    #[test]
    fn estimator_sum_matches_total_value_within_error() {
        let (data, gm, model, _) = chain_system(2_000, 6);
        let cfg = EstimatorConfig {
            m_conditional_draws: 50,
            ..EstimatorConfig::fixed_permutations(40, 23)
        };
        let res = sage_estimate(&data, &model, &gm, &cfg).unwrap();
        // Per-permutation surplus sums give an honest SE for sum(phi).
        let p = res.n_permutations_used;
        let sums: Vec<f64> =
            (0..p).map(|i| (0..2).map(|j| res.delta_history[j][i]).sum()).collect();
        let mean_sum = sums.iter().sum::<f64>() / p as f64;
        let var =
            sums.iter().map(|v| (v - mean_sum) * (v - mean_sum)).sum::<f64>() / (p as f64 - 1.0);
        let se_sum = (var / p as f64).sqrt();

        // Total value: loss of the fully marginalized predictor minus loss
        // of the full-conditioning predictor, on the same rows.
        let n = data.n_rows();
        let mut nu = 0.0;
        for r in 0..n {
            let row = data.row(r);
            let y = row[2];
            let p0 =
                marginalized_predict(&model, &gm, &[], &[], 400, r as u64).unwrap();
            let pf = model.predict(&row[..2]);
            nu += (p0 - y) * (p0 - y) - (pf - y) * (pf - y);
        }
        nu /= n as f64;
        let total: f64 = res.phi.iter().sum();
        // The 0.03 term absorbs the finite-draw inflation of the losses
        // (variance of a marginalized prediction enters each loss as 1/m).
        assert!(
            (total - nu).abs() <= 3.0 * se_sum + 0.03,
            "sum(phi) {total} vs total value {nu} (se {se_sum})"
        );
    }

    #[test]
    fn exact_values_match_monte_carlo_risk_oracle() {
        // Four features plus target from a random standardized system.
        let dag = crate::scm::random_dag(5, 2.0, 41).unwrap();
        let scm = LinearGaussianScm::random(dag, 0.5, 2.0, 42).unwrap();
        let cov = scm.implied_covariance();
        let labels = scm.dag().labels().to_vec();
        let gm =
            GaussianModel::from_moments(labels.clone(), DVector::zeros(5), cov.clone())
                .unwrap();
        let target = 4usize;
        let target_label = labels[target].clone();
        // Population regression of the target on the other four.
        let feats: Vec<usize> = (0..5).filter(|&i| i != target).collect();
        let mut sxx = DMatrix::<f64>::zeros(4, 4);
        let mut sxy = DVector::<f64>::zeros(4);
        for (a, &ia) in feats.iter().enumerate() {
            sxy[a] = cov[(ia, target)];
            for (b, &ib) in feats.iter().enumerate() {
                sxx[(a, b)] = cov[(ia, ib)];
            }
        }
        let beta = nalgebra::Cholesky::new(sxx).unwrap().solve(&sxy);
        let model = LinearModel {
            intercept: 0.0,
            coefficients: beta.iter().copied().collect(),
            feature_labels: feats.iter().map(|&i| labels[i].clone()).collect(),
        };

        // Sample-mean oracle: evaluate the exactly marginalized predictor
        // (affine map derived here with raw inverses, not the library
        // Cholesky path) on a large joint sample.
        let big = scm.sample(1_000_000, 43);
        let n = big.n_rows();
        let loss_of_subset = |s_feats: &[usize]| -> f64 {
            let ns = s_feats.len();
            let out: Vec<usize> = (0..4).filter(|j| !s_feats.contains(j)).collect();
            // Effective coefficients on x_S after replacing the rest with
            // their conditional means (all means are zero here).
            let w_eff = if ns == 0 {
                DVector::<f64>::zeros(0)
            } else {
                let mut ss = DMatrix::<f64>::zeros(ns, ns);
                for (a, &ja) in s_feats.iter().enumerate() {
                    for (b, &jb) in s_feats.iter().enumerate() {
                        ss[(a, b)] = cov[(feats[ja], feats[jb])];
                    }
                }
                let inv = ss.try_inverse().unwrap();
                let mut os = DMatrix::<f64>::zeros(out.len(), ns);
                for (r, &jo) in out.iter().enumerate() {
                    for (c, &js) in s_feats.iter().enumerate() {
                        os[(r, c)] = cov[(feats[jo], feats[js])];
                    }
                }
                let gain = os * inv;
                let mut w_s = DVector::<f64>::zeros(ns);
                for (a, &ja) in s_feats.iter().enumerate() {
                    w_s[a] = model.coefficients[ja];
                }
                let mut w_o = DVector::<f64>::zeros(out.len());
                for (r, &jo) in out.iter().enumerate() {
                    w_o[r] = model.coefficients[jo];
                }
                w_s + gain.transpose() * w_o
            };
            let mut acc = 0.0;
            for r in 0..n {
                let row = big.row(r);
                let y = row[target];
                let mut pred = model.intercept;
                for (a, &ja) in s_feats.iter().enumerate() {
                    pred += w_eff[a] * row[feats[ja]];
                }
                acc += (pred - y) * (pred - y);
            }
            acc / n as f64
        };
        let r_empty_mc = loss_of_subset(&[]);
        for mask in 0usize..16 {
            let s_feats: Vec<usize> = (0..4).filter(|j| mask & (1 << j) != 0).collect();
            let nu_mc = r_empty_mc - loss_of_subset(&s_feats);
            let nu_exact =
                exact_value_function(&gm, &model, &target_label, &s_feats).unwrap();
            assert!(
                (nu_mc - nu_exact).abs() <= 0.01,
                "subset {s_feats:?}: mc {nu_mc} vs exact {nu_exact}"
            );
        }
    }

    #[test]
    fn exact_importance_is_symmetric_for_exchangeable_duplicates() {
        // Two exchangeable features, identical coefficients.
        let rho: f64 = 0.5;
        let w = 0.7;
        let var_e = 0.2;
        let var_y = w * w * (2.0 + 2.0 * rho) + var_e;
        let cxy = w * (1.0 + rho);
        let cov = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, rho, cxy, rho, 1.0, cxy, cxy, cxy, var_y],
        );
        let gm = GaussianModel::from_moments(
            vec!["a".into(), "b".into(), "y".into()],
            DVector::zeros(3),
            cov,
        )
        .unwrap();
        let model = LinearModel {
            intercept: 0.0,
            coefficients: vec![w, w],
            feature_labels: vec!["a".into(), "b".into()],
        };
        let phi = exact_sage(&gm, &model, "y", DEFAULT_EXACT_CAP).unwrap();
        assert_abs_diff_eq!(phi[0], phi[1], epsilon = 1e-9);
        assert!(phi[0] > 0.1);
    }

    #[test]
    fn exact_importance_concentrates_on_the_single_relevant_feature() {
        // y = w x1 + e; x2, x3 independent noise features.
        let w = 0.8;
        let var_e = 0.3;
        let mut cov = DMatrix::<f64>::identity(4, 4);
        cov[(3, 3)] = w * w + var_e;
        cov[(0, 3)] = w;
        cov[(3, 0)] = w;
        let gm = GaussianModel::from_moments(
            vec!["x1".into(), "x2".into(), "x3".into(), "y".into()],
            DVector::zeros(4),
            cov,
        )
        .unwrap();
        let model = LinearModel {
            intercept: 0.0,
            coefficients: vec![w, 0.0, 0.0],
            feature_labels: vec!["x1".into(), "x2".into(), "x3".into()],
        };
        let phi = exact_sage(&gm, &model, "y", DEFAULT_EXACT_CAP).unwrap();
        let total = exact_value_function(&gm, &model, "y", &[0, 1, 2]).unwrap();
        assert_abs_diff_eq!(phi[0], total, epsilon = 1e-12);
        assert_abs_diff_eq!(phi[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(phi[2], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(total, w * w, epsilon = 1e-12);
    }

    #[test]
    fn exact_cap_is_enforced() {
        let d = 10;
        let labels: Vec<String> =
            (0..d).map(|i| format!("v{i}")).chain(["y".to_string()]).collect();
        let gm = unit_gaussian(labels.clone());
        let model = LinearModel {
            intercept: 0.0,
            coefficients: vec![0.0; d],
            feature_labels: labels[..d].to_vec(),
        };
        assert!(matches!(
            exact_sage(&gm, &model, "y", DEFAULT_EXACT_CAP),
            Err(Error::TooLargeForExact { required: 10, cap: 8 })
        ));
    }

    #[test]
    fn convergence_check_behaves_on_constructed_histories() {
        // All-zero histories converge as soon as two entries exist.
        let zeros = vec![vec![0.0; 20], vec![0.0; 20]];
        assert!(check_convergence(&zeros, 0.025));
        // Noise with SE far above threshold * range does not converge:
        // means are ~0 and ~1, range ~1, SE of first ~ 1/sqrt(20) >> 0.025.
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let noisy: Vec<f64> = (0..20).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let anchored: Vec<f64> = vec![1.0; 20];
        assert!(!check_convergence(&[noisy.clone(), anchored.clone()], 0.025));
        // The free check accepts thresholds outside the config's range.
        assert!(check_convergence(&[noisy, anchored], 1.0));
        // Histories shorter than two entries never pass.
        assert!(!check_convergence(&[vec![0.0], vec![0.0]], 0.025));
    }

    #[test]
    fn estimator_converges_early_on_flat_problems() {
        // Pure-noise target: every surplus hovers near zero, so the run
        // should stop at min_permutations, converged.
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let n = 300;
        let mut values = Vec::with_capacity(3 * n);
        for _ in 0..n {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            let y: f64 = rng.sample(StandardNormal);
            values.extend_from_slice(&[a, b, y]);
        }
        let data = Dataset::new(vec!["a".into(), "b".into(), "y".into()], values, n)
            .unwrap()
            .with_target("y")
            .unwrap();
        let gm = unit_gaussian(vec!["a".into(), "b".into()]);
        let model = LinearModel {
            intercept: 0.0,
            coefficients: vec![0.0, 0.0],
            feature_labels: vec!["a".into(), "b".into()],
        };
        let cfg = EstimatorConfig { m_conditional_draws: 5, ..EstimatorConfig::new(500, 71) };
        let res = sage_estimate(&data, &model, &gm, &cfg).unwrap();
        assert!(res.converged);
        assert_eq!(res.n_permutations_used, DEFAULT_MIN_PERMUTATIONS);
        for (j, phi) in res.phi.iter().enumerate() {
            assert!(
                phi.abs() <= 3.0 * res.delta_se[j].max(1e-6),
                "phi[{j}] = {phi}, se {}",
                res.delta_se[j]
            );
        }
    }

    #[test]
    fn permutation_stream_is_deterministic_and_covers_orders() {
        let a = permutation_for(9, 3, 5);
        let b = permutation_for(9, 3, 5);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        assert_ne!(permutation_for(9, 4, 5), a);
        // All 24 orders of 4 items show up over 400 indices.
        let mut seen = HashSet::new();
        for i in 0..400 {
            seen.insert(permutation_for(1, i, 4));
        }
        assert_eq!(seen.len(), 24);
    }

    #[test]
    fn result_serialization_round_trips_and_csv_is_complete() {
        let (data, gm, model, dag) = chain_system(200, 7);
        let cfg = EstimatorConfig {
            m_conditional_draws: 3,
            ..EstimatorConfig::fixed_permutations(21, 13)
        }
        .with_graph(dag);
        let res = dsage_estimate(&data, &model, &gm, &cfg).unwrap();
        let back = SageResult::from_json_str(&res.to_json_string().unwrap()).unwrap();
        assert_eq!(back.phi, res.phi);
        assert_eq!(back.skip_log, res.skip_log);

        let summary: serde_json::Value =
            serde_json::from_str(&res.summary_json_string().unwrap()).unwrap();
        assert_eq!(summary["phi"].as_array().unwrap().len(), 2);
        assert_eq!(
            summary["evaluations_total"].as_u64().unwrap(),
            (res.n_permutations_used * 2) as u64
        );

        let csv_text = res.deltas_csv_string().unwrap();
        let lines: Vec<&str> = csv_text.lines().collect();
        assert_eq!(lines[0], "permutation,feature,s_size,delta,skipped");
        assert_eq!(lines.len(), 1 + res.n_permutations_used * 2);
        let skipped_rows = lines.iter().filter(|l| l.ends_with(",true")).count();
        assert_eq!(skipped_rows, res.evaluations_skipped);
    }

    #[test]
    fn position_surpluses_recount_matches_recorded_deltas_bitwise() {
        let (data, gm, model, _) = chain_system(300, 9);
        let cfg = EstimatorConfig {
            m_conditional_draws: 4,
            ..EstimatorConfig::fixed_permutations(15, 31)
        };
        let res = sage_estimate(&data, &model, &gm, &cfg).unwrap();
        for (p, perm) in res.permutations.iter().enumerate() {
            for (pos, &j) in perm.iter().enumerate() {
                let mut cond = perm[..pos].to_vec();
                cond.sort_unstable();
                let rows =
                    position_surpluses(&data, &model, &gm, p, j, &cond, 4, 31).unwrap();
                let mean = rows.iter().sum::<f64>() / rows.len() as f64;
                assert_eq!(
                    mean.to_bits(),
                    res.delta_history[j][p].to_bits(),
                    "perm {p} pos {pos}"
                );
            }
        }
        // Invalid sets are rejected.
        assert!(position_surpluses(&data, &model, &gm, 0, 0, &[0], 4, 31).is_err());
        assert!(position_surpluses(&data, &model, &gm, 0, 9, &[], 4, 31).is_err());
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let (data, gm, model, dag) = chain_system(100, 8);
        let cfg = EstimatorConfig::fixed_permutations(20, 1);
        // Wrong gaussian labels.
        let wrong_gm = unit_gaussian(vec!["A".into(), "B".into()]);
        assert!(matches!(
            sage_estimate(&data, &model, &wrong_gm, &cfg),
            Err(Error::LabelMismatch { .. })
        ));
        // Graph lacking the target node.
        let no_target =
            Dag::new(vec!["X1".into(), "X2".into()], vec![(0, 1)]).unwrap();
        assert!(matches!(
            dsage_estimate(&data, &model, &gm, &cfg.clone().with_graph(no_target)),
            Err(Error::GraphMismatch { missing }) if missing == "Y"
        ));
        // Mode mismatches.
        assert!(sage_estimate(&data, &model, &gm, &cfg.clone().with_graph(dag)).is_err());
        assert!(dsage_estimate(&data, &model, &gm, &cfg).is_err());
        // Bad thresholds.
        let bad = EstimatorConfig {
            convergence_threshold: 1.5,
            ..EstimatorConfig::new(50, 1)
        };
        assert!(matches!(
            sage_estimate(&data, &model, &gm, &bad),
            Err(Error::InvalidConfig(_))
        ));
    }
}
