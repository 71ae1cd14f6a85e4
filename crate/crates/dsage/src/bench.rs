//! Experiment orchestration: scoring learned graphs against the truth on
//! sampled d-separation queries, timing graph queries against partial
//! correlation tests on identical query sequences, and running the full
//! generate → fit → learn → estimate pipeline over a seeded grid with all
//! reports written to disk.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::citest::{ci_test, DEFAULT_ALPHA};
use crate::csl::{learn_structure, SearchConfig, SearchReport};
use crate::dag::{
    exact_query_count, sample_conditioning_query, Dag, DsepQuery, DEFAULT_EXACT_CAP,
};
use crate::error::{Error, Result};
use crate::gaussian::{fit_gaussian, GaussianModel};
use crate::io::write_atomic_str;
use crate::model::{fit_ols, mse, LinearModel, Predictor};
use crate::sage::{
    dsage_estimate, permutation_for, position_surpluses, sage_estimate, EstimatorConfig,
    SageResult,
};
use crate::scm::{pick_target, random_dag, Dataset, LinearGaussianScm};
use crate::seed::{derive_seed, derive_seed_indexed, stream_rng};

/// How a learned graph's d-separation answers compare with the true
/// graph's over a set of (feature, conditioning set) queries against one
/// target. Separation is the positive class, so `fdr` counts independence
/// claims the true graph does not back — the error mode that would zero
/// out surpluses that are not actually zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsepEvalReport {
    #[serde(rename = "tp")]
    pub true_pos: u64,
    #[serde(rename = "tn")]
    pub true_neg: u64,
    #[serde(rename = "fp")]
    pub false_pos: u64,
    #[serde(rename = "fn")]
    pub false_neg: u64,
    pub f1: f64,
    pub fdr: f64,
    /// Queries classified; equals the count sum whether sampled or
    /// enumerated.
    pub n_mc: u64,
    pub seed: u64,
    pub wall_time_s: f64,
    /// True when the whole query space was enumerated instead of sampled.
    pub exact: bool,
}

impl DsepEvalReport {
    fn from_counts(
        true_pos: u64,
        true_neg: u64,
        false_pos: u64,
        false_neg: u64,
        seed: u64,
        wall_time_s: f64,
        exact: bool,
    ) -> Self {
        let f1_den = 2 * true_pos + false_pos + false_neg;
        let f1 = if f1_den == 0 { 0.0 } else { 2.0 * true_pos as f64 / f1_den as f64 };
        let predicted_pos = true_pos + false_pos;
        let fdr =
            if predicted_pos == 0 { 0.0 } else { false_pos as f64 / predicted_pos as f64 };
        Self {
            true_pos,
            true_neg,
            false_pos,
            false_neg,
            f1,
            fdr,
            n_mc: true_pos + true_neg + false_pos + false_neg,
            seed,
            wall_time_s,
            exact,
        }
    }

    /// Fraction of queries on which the learned graph agreed with the
    /// truth.
    pub fn accuracy(&self) -> f64 {
        if self.n_mc == 0 {
            0.0
        } else {
            (self.true_pos + self.true_neg) as f64 / self.n_mc as f64
        }
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Scores `learned_graph` against `true_graph` on d-separation queries
/// "feature ⊥ target | S": the feature uniform over non-target nodes, S a
/// uniform subset of the rest (set sizes binomial, every subset equally
/// likely). When the query space holds at most [`DEFAULT_EXACT_CAP`]
/// queries it is enumerated outright and `n_mc` is ignored; otherwise
/// `n_mc` queries are sampled from the seed.
pub fn mc_dsep_eval(
    true_graph: &Dag,
    learned_graph: &Dag,
    target: &str,
    n_mc: usize,
    seed: u64,
) -> Result<DsepEvalReport> {
    let t_set: BTreeSet<&String> = true_graph.labels().iter().collect();
    let l_set: BTreeSet<&String> = learned_graph.labels().iter().collect();
    if t_set != l_set {
        let missing = t_set
            .symmetric_difference(&l_set)
            .map(|s| s.as_str())
            .collect::<Vec<_>>()
            .join(", ");
        return Err(Error::LabelMismatch {
            detail: format!("graphs disagree on node labels: {missing}"),
        });
    }
    let t_target = true_graph
        .label_index(target)
        .ok_or_else(|| Error::LabelMismatch { detail: format!("no node {target:?}") })?;
    let l_target = learned_graph.label_index(target).expect("same label set");
    if n_mc == 0 {
        return Err(Error::InvalidConfig("n_mc must be >= 1".into()));
    }
    // Feature order follows the true graph; the learned graph may number
    // its nodes differently, so map through labels.
    let t_feats: Vec<usize> =
        (0..true_graph.node_count()).filter(|&v| v != t_target).collect();
    let l_feats: Vec<usize> = t_feats
        .iter()
        .map(|&v| learned_graph.label_index(&true_graph.labels()[v]).expect("same label set"))
        .collect();
    let f = t_feats.len();
    if f == 0 {
        return Err(Error::InvalidConfig("graphs have no feature nodes".into()));
    }

    let started = Instant::now();
    let mut tp = 0u64;
    let mut tn = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    let mut classify = |jpos: usize, cond_pos: &[usize]| -> Result<()> {
        let t_cond: Vec<usize> = cond_pos.iter().map(|&p| t_feats[p]).collect();
        let l_cond: Vec<usize> = cond_pos.iter().map(|&p| l_feats[p]).collect();
        let truth =
            true_graph.d_separated(&DsepQuery::new(t_feats[jpos], t_target, t_cond))?;
        let pred = learned_graph
            .d_separated(&DsepQuery::new(l_feats[jpos], l_target, l_cond))?;
        match (truth, pred) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
        }
        Ok(())
    };

    let exact = exact_query_count(f + 1) <= u128::from(DEFAULT_EXACT_CAP);
    if exact {
        for jpos in 0..f {
            let others: Vec<usize> = (0..f).filter(|&p| p != jpos).collect();
            for mask in 0u64..(1u64 << (f - 1)) {
                let cond: Vec<usize> = others
                    .iter()
                    .enumerate()
                    .filter(|(bit, _)| mask >> bit & 1 == 1)
                    .map(|(_, &p)| p)
                    .collect();
                classify(jpos, &cond)?;
            }
        }
    } else {
        let mut rng = stream_rng(seed, 0);
        for _ in 0..n_mc {
            let (jpos, cond_pos) = sample_conditioning_query(&mut rng, f);
            classify(jpos, &cond_pos)?;
        }
    }
    Ok(DsepEvalReport::from_counts(
        tp,
        tn,
        fp,
        fn_,
        seed,
        started.elapsed().as_secs_f64(),
        exact,
    ))
}

/// One query of a runtime comparison, with every method's answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDecision {
    pub permutation: usize,
    /// Position in the feature list (see the report's `feature_labels`).
    pub feature: usize,
    pub s_size: usize,
    /// d-separation answer from the learned graph.
    pub graph_separated: bool,
    /// Fisher-z partial-correlation answer on the data.
    pub ci_independent: bool,
    /// d-separation in the reference graph, when one was supplied.
    pub truth_separated: Option<bool>,
}

/// Wall times of graph learning, graph d-separation queries, and Fisher-z
/// tests over one shared query sequence, with per-query decisions logged
/// for recounting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuntimeReport {
    pub feature_labels: Vec<String>,
    pub target_label: String,
    pub n_queries: u64,
    /// Permutations the query sequence was built from; scaling estimates
    /// divide by this reference count.
    pub n_permutations: usize,
    pub learn_time_s: f64,
    pub dsep_query_time_s: f64,
    pub ci_test_time_s: f64,
    /// Surplus-evaluation wall time, attached by pipeline runs that
    /// measured one.
    pub delta_eval_time_s: Option<f64>,
    /// Agreement of graph answers with the reference graph, if supplied.
    pub graph_accuracy: Option<f64>,
    pub ci_accuracy: Option<f64>,
    pub seed: u64,
    pub query_log: Vec<QueryDecision>,
}

impl RuntimeReport {
    /// Projected d-separation query cost for a run of `n_pi` permutations.
    pub fn scaled_query_time(&self, n_pi: usize) -> f64 {
        self.dsep_query_time_s * n_pi as f64 / self.n_permutations.max(1) as f64
    }

    /// Projected Fisher-z cost for a run of `n_pi` permutations.
    pub fn scaled_ci_time(&self, n_pi: usize) -> f64 {
        self.ci_test_time_s * n_pi as f64 / self.n_permutations.max(1) as f64
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone)]
pub struct RuntimeCompareConfig {
    /// Permutations whose walks form the query sequence (reference scale).
    pub n_permutations: usize,
    pub alpha: f64,
    pub search: SearchConfig,
    pub seed: u64,
    /// Ground-truth graph for accuracy fields.
    pub true_graph: Option<Dag>,
}

impl RuntimeCompareConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            n_permutations: 100,
            alpha: DEFAULT_ALPHA,
            search: SearchConfig::tabu(),
            seed,
            true_graph: None,
        }
    }
}

/// Times graph learning, then d-separation queries on the learned graph
/// against Fisher-z tests on the data, over the identical sequence of
/// position queries walked by `n_permutations` seeded permutations.
pub fn runtime_compare(
    data: &Dataset,
    target: &str,
    config: &RuntimeCompareConfig,
) -> Result<RuntimeReport> {
    let data = data.clone().with_target(target)?;
    let fidx = data.feature_indices()?;
    let f = fidx.len();
    if f == 0 {
        return Err(Error::InvalidConfig("no feature columns".into()));
    }
    let feature_labels: Vec<String> =
        fidx.iter().map(|&c| data.labels()[c].clone()).collect();
    let target_col = data.column_index(target).expect("designated");

    let t_learn = Instant::now();
    let learned = learn_structure(&data, &config.search)?;
    let learn_time_s = t_learn.elapsed().as_secs_f64();

    // The shared query sequence: every (position, prefix) pair of every
    // permutation, exactly as an estimator run would walk them.
    let mut queries: Vec<(usize, usize, Vec<usize>)> = Vec::new();
    for k in 0..config.n_permutations {
        let perm = permutation_for(config.seed, k, f);
        let mut prefix: Vec<usize> = Vec::with_capacity(f);
        for &j in &perm {
            let mut cond = prefix.clone();
            cond.sort_unstable();
            queries.push((k, j, cond));
            prefix.push(j);
        }
    }

    // Learned-graph node ids for features and target.
    let l_feats: Vec<usize> = feature_labels
        .iter()
        .map(|l| {
            learned
                .dag
                .label_index(l)
                .ok_or_else(|| Error::GraphMismatch { missing: l.clone() })
        })
        .collect::<Result<_>>()?;
    let l_target = learned
        .dag
        .label_index(target)
        .ok_or_else(|| Error::GraphMismatch { missing: target.to_string() })?;

    let t_dsep = Instant::now();
    let mut graph_answers = Vec::with_capacity(queries.len());
    for (_, j, cond) in &queries {
        let cond_nodes: Vec<usize> = cond.iter().map(|&p| l_feats[p]).collect();
        graph_answers.push(
            learned.dag.d_separated(&DsepQuery::new(l_feats[*j], l_target, cond_nodes))?,
        );
    }
    let dsep_query_time_s =
        if queries.is_empty() { 0.0 } else { t_dsep.elapsed().as_secs_f64() };

    let t_ci = Instant::now();
    let mut ci_answers = Vec::with_capacity(queries.len());
    for (_, j, cond) in &queries {
        let cond_cols: Vec<usize> = cond.iter().map(|&p| fidx[p]).collect();
        ci_answers.push(
            ci_test(&data, fidx[*j], target_col, &cond_cols, config.alpha)?.independent,
        );
    }
    let ci_test_time_s = if queries.is_empty() { 0.0 } else { t_ci.elapsed().as_secs_f64() };

    // Untimed truth pass.
    let truths: Option<Vec<bool>> = match &config.true_graph {
        None => None,
        Some(g) => {
            let g_feats: Vec<usize> = feature_labels
                .iter()
                .map(|l| {
                    g.label_index(l)
                        .ok_or_else(|| Error::GraphMismatch { missing: l.clone() })
                })
                .collect::<Result<_>>()?;
            let g_target = g
                .label_index(target)
                .ok_or_else(|| Error::GraphMismatch { missing: target.to_string() })?;
            let mut v = Vec::with_capacity(queries.len());
            for (_, j, cond) in &queries {
                let cond_nodes: Vec<usize> = cond.iter().map(|&p| g_feats[p]).collect();
                v.push(g.d_separated(&DsepQuery::new(g_feats[*j], g_target, cond_nodes))?);
            }
            Some(v)
        }
    };

    let mut query_log = Vec::with_capacity(queries.len());
    let mut graph_hits = 0u64;
    let mut ci_hits = 0u64;
    for (i, (k, j, cond)) in queries.iter().enumerate() {
        let truth = truths.as_ref().map(|v| v[i]);
        if let Some(t) = truth {
            if graph_answers[i] == t {
                graph_hits += 1;
            }
            if ci_answers[i] == t {
                ci_hits += 1;
            }
        }
        query_log.push(QueryDecision {
            permutation: *k,
            feature: *j,
            s_size: cond.len(),
            graph_separated: graph_answers[i],
            ci_independent: ci_answers[i],
            truth_separated: truth,
        });
    }
    let nq = queries.len() as u64;
    let accuracy = |hits: u64| {
        truths.as_ref().map(|_| if nq == 0 { 0.0 } else { hits as f64 / nq as f64 })
    };
    Ok(RuntimeReport {
        feature_labels,
        target_label: target.to_string(),
        n_queries: nq,
        n_permutations: config.n_permutations,
        learn_time_s,
        dsep_query_time_s,
        ci_test_time_s,
        delta_eval_time_s: None,
        graph_accuracy: accuracy(graph_hits),
        ci_accuracy: accuracy(ci_hits),
        seed: config.seed,
        query_log,
    })
}

/// One grid of pipeline runs: every (node count, average degree, seed)
/// cell generates its own system, learns a graph, and runs the paired
/// estimators `repetitions` times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub node_counts: Vec<usize>,
    pub avg_degrees: Vec<f64>,
    pub seeds: Vec<u64>,
    pub n_samples: usize,
    pub train_fraction: f64,
    pub repetitions: usize,
    /// Permutation budget per estimator run.
    pub n_permutations: usize,
    pub min_permutations: usize,
    pub convergence_threshold: f64,
    pub m_conditional_draws: usize,
    pub weight_min: f64,
    pub weight_max: f64,
    pub min_noise_var: f64,
    pub alpha: f64,
    /// Query budget for scoring the learned graph (ignored when the space
    /// is small enough to enumerate).
    pub n_mc_dsep: usize,
    /// Marginalize with the generator's implied covariance instead of
    /// moments fitted on the training split.
    pub use_implied_gaussian: bool,
    /// Permutations for the runtime comparison's query sequence.
    pub runtime_permutations: usize,
    pub search: SearchConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            node_counts: vec![10],
            avg_degrees: vec![2.0],
            seeds: vec![1],
            n_samples: 10_000,
            train_fraction: 0.8,
            repetitions: 5,
            n_permutations: 100,
            min_permutations: 20,
            convergence_threshold: 0.025,
            m_conditional_draws: 10,
            weight_min: 0.5,
            weight_max: 2.0,
            min_noise_var: 0.05,
            alpha: DEFAULT_ALPHA,
            n_mc_dsep: 100_000,
            use_implied_gaussian: false,
            runtime_permutations: 100,
            search: SearchConfig::tabu(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.node_counts.is_empty() || self.avg_degrees.is_empty() || self.seeds.is_empty()
        {
            return bad("node_counts, avg_degrees, and seeds must be non-empty".into());
        }
        for &d in &self.node_counts {
            if d < 2 {
                return bad(format!("node count {d} below 2"));
            }
        }
        for (&d, &deg) in self.node_counts.iter().flat_map(|d| {
            self.avg_degrees.iter().map(move |deg| (d, deg))
        }) {
            if !(0.0..d as f64).contains(&deg) {
                return bad(format!("average degree {deg} out of [0, {d}) for {d} nodes"));
            }
        }
        if self.n_samples < 50 {
            return bad(format!("n_samples {} below 50", self.n_samples));
        }
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} out of (0, 1)", self.train_fraction));
        }
        if self.repetitions == 0 {
            return bad("repetitions must be >= 1".into());
        }
        if self.n_mc_dsep == 0 {
            return bad("n_mc_dsep must be >= 1".into());
        }
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return bad(format!("alpha {} out of (0, 1)", self.alpha));
        }
        if !(self.weight_min > 0.0 && self.weight_min <= self.weight_max) {
            return bad(format!(
                "weight range [{}, {}] invalid",
                self.weight_min, self.weight_max
            ));
        }
        if self.min_noise_var <= 0.0 {
            return bad(format!("min_noise_var {} must be positive", self.min_noise_var));
        }
        self.search.validate()?;
        // Estimator parameters validate through a representative config.
        self.estimator_config(0).validate()?;
        Ok(())
    }

    fn estimator_config(&self, seed: u64) -> EstimatorConfig {
        EstimatorConfig {
            n_permutations_max: self.n_permutations,
            min_permutations: self.min_permutations.min(self.n_permutations),
            convergence_threshold: self.convergence_threshold,
            m_conditional_draws: self.m_conditional_draws,
            seed,
            skip_mode: crate::sage::SkipMode::None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads a spec file, dispatching on the `.toml` / `.json` extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Parse(format!("cannot read {}: {e}", path.display()))
        })?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Self::from_toml_str(&text),
            Some("json") => Self::from_json_str(&text),
            other => Err(Error::Parse(format!(
                "unsupported spec extension {other:?} (use .toml or .json)"
            ))),
        }
    }
}

/// Paired estimator runs of one repetition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepPair {
    pub rep: usize,
    pub sage: SageResult,
    pub dsage: SageResult,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellOutcome {
    pub cell: String,
    pub node_count: usize,
    pub avg_degree: f64,
    pub seed: u64,
    pub ok: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub out_dir: String,
    pub cells: Vec<CellOutcome>,
}

/// Runs every cell of the grid, each into `out_dir/<cell>/` with five
/// report files: `dsep_eval.json`, `sage_pair.json`, `skipped_audit.csv`,
/// `runtime.json`, and `summary.json`. A failing cell records its error in
/// the returned outcome (and `experiment.json`) without stopping the rest.
/// Cells run in parallel; all randomness is derived from the cell seed, so
/// results are independent of scheduling.
pub fn run_experiment(spec: &ExperimentSpec, out_dir: &Path) -> Result<ExperimentOutcome> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut cells = Vec::new();
    for &d in &spec.node_counts {
        for &deg in &spec.avg_degrees {
            for &seed in &spec.seeds {
                cells.push((d, deg, seed));
            }
        }
    }
    let outcomes: Vec<CellOutcome> = cells
        .par_iter()
        .map(|&(d, deg, seed)| {
            let cell = format!("d{d}_deg{deg}_seed{seed}");
            let result = run_cell(spec, d, deg, seed, &out_dir.join(&cell));
            CellOutcome {
                cell,
                node_count: d,
                avg_degree: deg,
                seed,
                ok: result.is_ok(),
                error: result.err().map(|e| e.to_string()),
            }
        })
        .collect();
    let outcome =
        ExperimentOutcome { out_dir: out_dir.display().to_string(), cells: outcomes };
    let top = serde_json::json!({ "spec": spec, "cells": outcome.cells });
    write_atomic_str(
        &out_dir.join("experiment.json"),
        &serde_json::to_string_pretty(&top)?,
    )?;
    Ok(outcome)
}

fn run_cell(
    spec: &ExperimentSpec,
    d: usize,
    deg: f64,
    seed: u64,
    cell_dir: &Path,
) -> Result<()> {
    fs::create_dir_all(cell_dir)?;
    let true_dag = random_dag(d, deg, derive_seed(seed, "dag"))?;
    let scm = LinearGaussianScm::random_with_floor(
        true_dag,
        spec.weight_min,
        spec.weight_max,
        spec.min_noise_var,
        derive_seed(seed, "scm"),
    )?;
    let data = scm.sample(spec.n_samples, derive_seed(seed, "sample"));
    let target_idx = pick_target(scm.dag(), derive_seed(seed, "target"))?;
    let target_label = scm.dag().labels()[target_idx].clone();
    let data = data.with_target(&target_label)?;
    let (train, test) = data.split_at_fraction(spec.train_fraction)?;

    let model = fit_ols(&train)?;
    let fidx = test.feature_indices()?;
    let tcol = test.column_index(&target_label).expect("designated");
    let test_mse = {
        let preds: Vec<f64> = (0..test.n_rows())
            .map(|r| {
                let row = test.row(r);
                let x: Vec<f64> = fidx.iter().map(|&c| row[c]).collect();
                model.predict(&x)
            })
            .collect();
        let ys: Vec<f64> = (0..test.n_rows()).map(|r| test.row(r)[tcol]).collect();
        mse(&preds, &ys)?
    };

    let gm = build_marginalizer(spec, &scm, &train, &fidx)?;
    let learned = learn_structure(&train, &spec.search)?;

    let dsep_eval = mc_dsep_eval(
        scm.dag(),
        &learned.dag,
        &target_label,
        spec.n_mc_dsep,
        derive_seed(seed, "mc"),
    )?;
    write_atomic_str(&cell_dir.join("dsep_eval.json"), &dsep_eval.to_json_string()?)?;

    let mut pairs: Vec<RepPair> = Vec::with_capacity(spec.repetitions);
    for rep in 0..spec.repetitions {
        let est_seed = derive_seed_indexed(seed, "rep", rep as u64);
        let cfg = spec.estimator_config(est_seed);
        let sage = sage_estimate(&test, &model, &gm, &cfg)?;
        let dsage = dsage_estimate(
            &test,
            &model,
            &gm,
            &cfg.clone().with_graph(learned.dag.clone()),
        )?;
        pairs.push(RepPair { rep, sage, dsage });
    }
    let pair_json = serde_json::json!({ "cell": cell_dir.file_name().and_then(|s| s.to_str()), "reps": pairs });
    write_atomic_str(
        &cell_dir.join("sage_pair.json"),
        &serde_json::to_string_pretty(&pair_json)?,
    )?;

    write_atomic_str(
        &cell_dir.join("skipped_audit.csv"),
        &skipped_audit_csv(spec, &test, &model, &gm, &pairs)?,
    )?;

    let mut runtime = runtime_compare(
        &data,
        &target_label,
        &RuntimeCompareConfig {
            n_permutations: spec.runtime_permutations,
            alpha: spec.alpha,
            search: spec.search.clone(),
            seed: derive_seed(seed, "runtime"),
            true_graph: Some(scm.dag().clone()),
        },
    )?;
    let mean_sage_wall =
        pairs.iter().map(|p| p.sage.wall_time_s).sum::<f64>() / pairs.len() as f64;
    runtime.delta_eval_time_s = Some(mean_sage_wall);
    write_atomic_str(&cell_dir.join("runtime.json"), &runtime.to_json_string()?)?;

    let summary = cell_summary(
        spec, d, deg, seed, &target_label, &train, &test, test_mse, &scm, &learned.report,
        &learned.dag, &dsep_eval, &pairs,
    )?;
    write_atomic_str(&cell_dir.join("summary.json"), &summary)?;
    Ok(())
}

/// Gaussian the estimators marginalize with: moments fitted on the
/// training features, or the generator's implied covariance when asked.
fn build_marginalizer(
    spec: &ExperimentSpec,
    scm: &LinearGaussianScm,
    train: &Dataset,
    fidx: &[usize],
) -> Result<GaussianModel> {
    if spec.use_implied_gaussian {
        let cov = scm.implied_covariance();
        let labels: Vec<String> =
            fidx.iter().map(|&c| train.labels()[c].clone()).collect();
        let k = fidx.len();
        let sub = nalgebra::DMatrix::from_fn(k, k, |i, j| cov[(fidx[i], fidx[j])]);
        GaussianModel::from_moments(labels, nalgebra::DVector::zeros(k), sub)
    } else {
        fit_gaussian(&train.select_columns(fidx)?)
    }
}

/// Long-format audit of every skipped position across repetitions: the
/// non-skipping run's surplus at that position, recomputed per row for an
/// honest standard error. `delta` reproduces the paired run's recorded
/// value bit for bit.
fn skipped_audit_csv(
    spec: &ExperimentSpec,
    test: &Dataset,
    model: &LinearModel,
    gm: &GaussianModel,
    pairs: &[RepPair],
) -> Result<String> {
    let mut out = String::from("rep,permutation,feature,s_size,delta,se,within_3se\n");
    for pair in pairs {
        for entry in &pair.dsage.skip_log {
            let rows = position_surpluses(
                test,
                model,
                gm,
                entry.permutation,
                entry.feature,
                &entry.cond_set,
                spec.m_conditional_draws,
                pair.sage.seed,
            )?;
            let n = rows.len() as f64;
            let mean = rows.iter().sum::<f64>() / n;
            let var =
                rows.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            let se = (var / n).sqrt();
            let within = mean.abs() <= 3.0 * se;
            out.push_str(&format!(
                "{},{},{},{},{:e},{:e},{}\n",
                pair.rep,
                entry.permutation,
                pair.sage.feature_labels[entry.feature],
                entry.cond_set.len(),
                mean,
                se,
                within,
            ));
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn cell_summary(
    spec: &ExperimentSpec,
    d: usize,
    deg: f64,
    seed: u64,
    target_label: &str,
    train: &Dataset,
    test: &Dataset,
    test_mse: f64,
    scm: &LinearGaussianScm,
    search_report: &SearchReport,
    learned_dag: &Dag,
    dsep_eval: &DsepEvalReport,
    pairs: &[RepPair],
) -> Result<String> {
    let skip_fractions: Vec<f64> = pairs.iter().map(|p| p.dsage.skip_fraction()).collect();
    let saving_ratios: Vec<f64> = pairs
        .iter()
        .map(|p| 1.0 - p.dsage.wall_time_s / p.sage.wall_time_s)
        .collect();
    let nf = pairs[0].sage.phi.len();
    let mean_phi = |pick: fn(&RepPair) -> &Vec<f64>| -> Vec<f64> {
        (0..nf)
            .map(|j| pairs.iter().map(|p| pick(p)[j]).sum::<f64>() / pairs.len() as f64)
            .collect()
    };
    let phi_sage = mean_phi(|p| &p.sage.phi);
    let phi_dsage = mean_phi(|p| &p.dsage.phi);
    let max_abs_diff = phi_sage
        .iter()
        .zip(phi_dsage.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let value = serde_json::json!({
        "cell": format!("d{d}_deg{deg}_seed{seed}"),
        "node_count": d,
        "avg_degree": deg,
        "seed": seed,
        "target": target_label,
        "n_train": train.n_rows(),
        "n_test": test.n_rows(),
        "model_test_mse": test_mse,
        "true_edges": scm.dag().edges().collect::<Vec<_>>(),
        "learned_edges": learned_dag.edges().collect::<Vec<_>>(),
        "search": {
            "algorithm": search_report.algorithm,
            "iterations": search_report.iterations,
            "initial_score": search_report.initial_score,
            "final_score": search_report.final_score,
        },
        "dsep_eval": dsep_eval,
        "feature_labels": pairs[0].sage.feature_labels,
        "phi_sage_mean": phi_sage,
        "phi_dsage_mean": phi_dsage,
        "phi_max_abs_diff": max_abs_diff,
        "skip_fraction": skip_fractions,
        "saving_ratio": saving_ratios,
        "repetitions": spec.repetitions,
        "converged": pairs.iter().map(|p| p.sage.converged).collect::<Vec<_>>(),
        "n_permutations_used": pairs.iter().map(|p| p.sage.n_permutations_used).collect::<Vec<_>>(),
    });
    Ok(serde_json::to_string_pretty(&value)?)
}
