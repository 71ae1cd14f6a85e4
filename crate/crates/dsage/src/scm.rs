//! Linear-Gaussian structural causal models and synthetic datasets.
//!
//! Ground truth for the benchmark suite: an Erdos-Renyi DAG, edge weights
//! drawn uniformly from +/-[w_min, w_max], and noise variances chosen
//! analytically so that every node has marginal variance one. When the
//! weighted parent contribution would leave less than `min_noise_var` of
//! variance for the noise, incoming weights are rescaled instead.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dag::Dag;
use crate::error::{Error, Result};

/// Default lower bound kept for each node's noise variance.
pub const DEFAULT_MIN_NOISE_VAR: f64 = 0.05;
/// Default edge-weight magnitude range.
pub const DEFAULT_WEIGHT_RANGE: (f64, f64) = (0.5, 2.0);

/// Rows-by-columns numeric data with column labels and an optional
/// designated target column.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    labels: Vec<String>,
    values: Vec<f64>, // row-major, n_rows * n_cols
    n_rows: usize,
    target: Option<String>,
}

impl Dataset {
    pub fn new(labels: Vec<String>, values: Vec<f64>, n_rows: usize) -> Result<Self> {
        let n_cols = labels.len();
        if n_cols == 0 || values.len() != n_rows * n_cols {
            return Err(Error::LengthMismatch { left: values.len(), right: n_rows * n_cols });
        }
        Ok(Self { labels, values, n_rows, target: None })
    }

    pub fn with_target(mut self, label: &str) -> Result<Self> {
        if self.column_index(label).is_none() {
            return Err(Error::LabelMismatch {
                detail: format!("no column named {label:?}"),
            });
        }
        self.target = Some(label.to_string());
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn target_label(&self) -> Option<&str> {
        self.target.as_deref()
    }

    pub fn column_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.n_cols();
        &self.values[r * w..(r + 1) * w]
    }

    pub fn value(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.n_cols() + c]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.n_rows).map(|r| self.value(r, c)).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Indices of all non-target columns, in column order.
    pub fn feature_indices(&self) -> Result<Vec<usize>> {
        let target = self.target.as_deref().ok_or_else(|| {
            Error::InvalidConfig("dataset has no designated target column".into())
        })?;
        let ti = self.column_index(target).expect("validated on set");
        Ok((0..self.n_cols()).filter(|&c| c != ti).collect())
    }

    /// New dataset with the given columns, preserving the target when kept.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let mut labels = Vec::with_capacity(cols.len());
        for &c in cols {
            if c >= self.n_cols() {
                return Err(Error::IndexOutOfRange { index: c, node_count: self.n_cols() });
            }
            labels.push(self.labels[c].clone());
        }
        let mut values = Vec::with_capacity(self.n_rows * cols.len());
        for r in 0..self.n_rows {
            let row = self.row(r);
            values.extend(cols.iter().map(|&c| row[c]));
        }
        let mut out = Self::new(labels, values, self.n_rows)?;
        if let Some(t) = &self.target {
            if out.column_index(t).is_some() {
                out.target = Some(t.clone());
            }
        }
        Ok(out)
    }

    /// Splits rows into a leading train part of `floor(frac * n)` rows and a
    /// trailing test part.
    pub fn split_at_fraction(&self, frac: f64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&frac) {
            return Err(Error::InvalidConfig(format!("split fraction {frac} out of (0, 1)")));
        }
        let k = (self.n_rows as f64 * frac).floor() as usize;
        if k == 0 || k == self.n_rows {
            return Err(Error::InsufficientRows { required: 2, actual: self.n_rows });
        }
        let w = self.n_cols();
        let train = Self {
            labels: self.labels.clone(),
            values: self.values[..k * w].to_vec(),
            n_rows: k,
            target: self.target.clone(),
        };
        let test = Self {
            labels: self.labels.clone(),
            values: self.values[k * w..].to_vec(),
            n_rows: self.n_rows - k,
            target: self.target.clone(),
        };
        Ok((train, test))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.labels).map_err(csv_err)?;
        let mut field = String::new();
        for r in 0..self.n_rows {
            let record = self.row(r).iter().map(|v| {
                field.clear();
                field.push_str(&format!("{v}"));
                field.clone()
            });
            w.write_record(record).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let labels: Vec<String> = r
            .headers()
            .map_err(csv_err)?
            .iter()
            .map(str::to_string)
            .collect();
        let mut values = Vec::new();
        let mut n_rows = 0;
        for record in r.records() {
            let record = record.map_err(csv_err)?;
            if record.len() != labels.len() {
                return Err(Error::LengthMismatch { left: record.len(), right: labels.len() });
            }
            for field in record.iter() {
                values.push(
                    field
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("bad number {field:?}: {e}")))?,
                );
            }
            n_rows += 1;
        }
        Self::new(labels, values, n_rows)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        crate::io::write_atomic(path, &buf)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}

/// Erdos-Renyi DAG: each unordered pair carries an edge with probability
/// `avg_degree / (d - 1)`, oriented along a uniformly random node order.
pub fn random_dag(node_count: usize, avg_degree: f64, seed: u64) -> Result<Dag> {
    if node_count < 2 {
        return Err(Error::InvalidConfig("random_dag needs at least 2 nodes".into()));
    }
    if !avg_degree.is_finite() || avg_degree < 0.0 || avg_degree > (node_count - 1) as f64 {
        return Err(Error::InvalidDegree { avg_degree, node_count });
    }
    let p = avg_degree / (node_count - 1) as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..node_count).collect();
    for i in (1..node_count).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut position = vec![0usize; node_count];
    for (pos, &v) in order.iter().enumerate() {
        position[v] = pos;
    }
    let mut edges = Vec::new();
    for i in 0..node_count {
        for j in (i + 1)..node_count {
            if rng.gen_bool(p) {
                if position[i] < position[j] {
                    edges.push((i, j));
                } else {
                    edges.push((j, i));
                }
            }
        }
    }
    Dag::with_default_labels(node_count, edges)
}

/// Picks a target node uniformly among nodes with degree >= 1.
pub fn pick_target(dag: &Dag, seed: u64) -> Result<usize> {
    let eligible: Vec<usize> =
        (0..dag.node_count()).filter(|&v| dag.degree(v) >= 1).collect();
    if eligible.is_empty() {
        return Err(Error::NoEligibleTarget);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(eligible[rng.gen_range(0..eligible.len())])
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
pub struct ScmGenConfig {
    pub seed: Option<u64>,
    pub w_min: f64,
    pub w_max: f64,
    pub min_noise_var: f64,
}

/// Linear-Gaussian SCM over a DAG: each node is a weighted sum of its
/// parents (in deviations from their means) plus independent Gaussian noise.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianScm {
    dag: Dag,
    weights: BTreeMap<(usize, usize), f64>,
    noise_vars: Vec<f64>,
    means: Vec<f64>,
    gen_config: ScmGenConfig,
}

impl LinearGaussianScm {
    /// Builds an SCM from explicit parts; weights must cover exactly the
    /// DAG's edges and variances must be positive.
    pub fn new(
        dag: Dag,
        weights: BTreeMap<(usize, usize), f64>,
        noise_vars: Vec<f64>,
        means: Vec<f64>,
    ) -> Result<Self> {
        let n = dag.node_count();
        if noise_vars.len() != n {
            return Err(Error::LengthMismatch { left: noise_vars.len(), right: n });
        }
        if means.len() != n {
            return Err(Error::LengthMismatch { left: means.len(), right: n });
        }
        if noise_vars.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig("noise variances must be positive".into()));
        }
        if weights.len() != dag.edge_count()
            || !weights.keys().all(|&(p, c)| dag.has_edge(p, c))
        {
            return Err(Error::InvalidConfig("weights must cover exactly the DAG edges".into()));
        }
        Ok(Self { dag, weights, noise_vars, means, gen_config: ScmGenConfig::default() })
    }

    /// Standardizes raw edge weights so every implied marginal variance is
    /// one: walking in topological order, the noise variance is set to one
    /// minus the parent contribution; if less than `min_noise_var` would
    /// remain, the incoming weights are shrunk to leave exactly that much.
    pub fn standardized(
        dag: Dag,
        raw_weights: BTreeMap<(usize, usize), f64>,
        min_noise_var: f64,
    ) -> Result<Self> {
        if !(0.0 < min_noise_var && min_noise_var < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "min_noise_var {min_noise_var} out of (0, 1)"
            )));
        }
        let n = dag.node_count();
        let mut weights = raw_weights;
        if weights.len() != dag.edge_count()
            || !weights.keys().all(|&(p, c)| dag.has_edge(p, c))
        {
            return Err(Error::InvalidConfig("weights must cover exactly the DAG edges".into()));
        }
        let mut sigma = DMatrix::<f64>::zeros(n, n);
        let mut noise_vars = vec![1.0; n];
        let topo: Vec<usize> = dag.topological_order().to_vec();
        for &j in &topo {
            let parents: Vec<usize> = dag.parents(j).to_vec();
            let mut contribution = parent_variance(&sigma, &weights, j, &parents);
            if contribution >= 1.0 - min_noise_var {
                let scale = ((1.0 - min_noise_var) / contribution).sqrt();
                for &p in &parents {
                    if let Some(w) = weights.get_mut(&(p, j)) {
                        *w *= scale;
                    }
                }
                contribution = parent_variance(&sigma, &weights, j, &parents);
                noise_vars[j] = min_noise_var;
            } else {
                noise_vars[j] = 1.0 - contribution;
            }
            fill_covariance_row(&mut sigma, &weights, j, &parents, contribution + noise_vars[j]);
        }
        Ok(Self { dag, weights, noise_vars, means: vec![0.0; n], gen_config: ScmGenConfig::default() })
    }

    /// Random standardized SCM: weight magnitudes uniform in
    /// [w_min, w_max], signs fair.
    pub fn random(dag: Dag, w_min: f64, w_max: f64, seed: u64) -> Result<Self> {
        Self::random_with_floor(dag, w_min, w_max, DEFAULT_MIN_NOISE_VAR, seed)
    }

    /// [`LinearGaussianScm::random`] with an explicit noise-variance floor.
    pub fn random_with_floor(
        dag: Dag,
        w_min: f64,
        w_max: f64,
        min_noise_var: f64,
        seed: u64,
    ) -> Result<Self> {
        if !(0.0 < w_min && w_min <= w_max) {
            return Err(Error::InvalidConfig(format!(
                "weight range [{w_min}, {w_max}] invalid"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut raw = BTreeMap::new();
        for (p, c) in dag.edges() {
            let magnitude = rng.gen_range(w_min..=w_max);
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            raw.insert((p, c), sign * magnitude);
        }
        let mut scm = Self::standardized(dag, raw, min_noise_var)?;
        scm.gen_config =
            ScmGenConfig { seed: Some(seed), w_min, w_max, min_noise_var };
        Ok(scm)
    }

    pub fn dag(&self) -> &Dag {
        &self.dag
    }

    pub fn weight(&self, parent: usize, child: usize) -> Option<f64> {
        self.weights.get(&(parent, child)).copied()
    }

    pub fn noise_vars(&self) -> &[f64] {
        &self.noise_vars
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    /// Covariance implied by the recursion, computed in topological order.
    pub fn implied_covariance(&self) -> DMatrix<f64> {
        let n = self.dag.node_count();
        let mut sigma = DMatrix::<f64>::zeros(n, n);
        for &j in self.dag.topological_order() {
            let parents: Vec<usize> = self.dag.parents(j).to_vec();
            let contribution = parent_variance(&sigma, &self.weights, j, &parents);
            fill_covariance_row(
                &mut sigma,
                &self.weights,
                j,
                &parents,
                contribution + self.noise_vars[j],
            );
        }
        sigma
    }

    /// Ancestral sampling of `n` rows; column order matches the DAG labels.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        let d = self.dag.node_count();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); d];
        for &j in self.dag.topological_order() {
            let mut col: Vec<f64> = (0..n)
                .map(|_| {
                    let z: f64 = rng.sample(StandardNormal);
                    self.means[j] + self.noise_vars[j].sqrt() * z
                })
                .collect();
            for &p in self.dag.parents(j) {
                let w = self.weights[&(p, j)];
                let parent_col = &columns[p];
                let mu_p = self.means[p];
                for (v, &x) in col.iter_mut().zip(parent_col.iter()) {
                    *v += w * (x - mu_p);
                }
            }
            columns[j] = col;
        }
        let mut values = Vec::with_capacity(n * d);
        for r in 0..n {
            for col in columns.iter() {
                values.push(col[r]);
            }
        }
        Dataset::new(self.dag.labels().to_vec(), values, n).expect("sizes consistent")
    }

    pub fn to_json_string(&self) -> Result<String> {
        let file = ScmFile {
            nodes: self.dag.labels().to_vec(),
            edges: self
                .weights
                .iter()
                .map(|(&(p, c), &w)| (p, c, w))
                .collect(),
            noise_vars: self.noise_vars.clone(),
            means: self.means.clone(),
            gen_config: self.gen_config.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: ScmFile = serde_json::from_str(text)?;
        let dag = Dag::new(
            file.nodes,
            file.edges.iter().map(|&(p, c, _)| (p, c)),
        )?;
        let weights: BTreeMap<(usize, usize), f64> =
            file.edges.iter().map(|&(p, c, w)| ((p, c), w)).collect();
        let mut scm = Self::new(dag, weights, file.noise_vars, file.means)?;
        scm.gen_config = file.gen_config;
        Ok(scm)
    }

    pub fn gen_config(&self) -> &ScmGenConfig {
        &self.gen_config
    }
}

fn parent_variance(
    sigma: &DMatrix<f64>,
    weights: &BTreeMap<(usize, usize), f64>,
    node: usize,
    parents: &[usize],
) -> f64 {
    let mut v = 0.0;
    for &p in parents {
        for &q in parents {
            v += weights[&(p, node)] * weights[&(q, node)] * sigma[(p, q)];
        }
    }
    v
}

fn fill_covariance_row(
    sigma: &mut DMatrix<f64>,
    weights: &BTreeMap<(usize, usize), f64>,
    node: usize,
    parents: &[usize],
    variance: f64,
) {
    let n = sigma.nrows();
    sigma[(node, node)] = variance;
    for i in 0..n {
        if i == node || sigma[(i, i)] == 0.0 {
            continue; // unprocessed nodes still have zero variance
        }
        let mut cov = 0.0;
        for &p in parents {
            cov += weights[&(p, node)] * sigma[(i, p)];
        }
        sigma[(i, node)] = cov;
        sigma[(node, i)] = cov;
    }
}

#[derive(Serialize, Deserialize)]
struct ScmFile {
    nodes: Vec<String>,
    edges: Vec<(usize, usize, f64)>,
    noise_vars: Vec<f64>,
    means: Vec<f64>,
    gen_config: ScmGenConfig,
}
