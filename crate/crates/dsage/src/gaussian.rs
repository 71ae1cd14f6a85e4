//! Multivariate Gaussian fitting and exact conditionals.
//!
//! The importance estimators marginalize predictions over the conditional
//! law of the held-out features, so conditioning is on the hot path: a
//! [`ConditionalMap`] caches the Schur-complement pieces (gain matrix,
//! offset, conditional covariance and its Cholesky factor) for one
//! conditioning index set and is then evaluated per row.
//!
//! Covariance factorizations run through a jitter ladder: when a Cholesky
//! factorization fails, an escalating diagonal of 1e-8, 1e-7, ... 1e-4 is
//! added before giving up with `NumericallySingular`. Escalations are
//! logged and reported by the callers.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scm::Dataset;

/// Jitter ladder applied to failing factorizations.
const JITTERS: [f64; 6] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];
/// Conditional variances at or below this are treated as deterministic.
const DEGENERATE_VAR: f64 = 1e-12;

/// Mean vector and covariance matrix with column labels.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    labels: Vec<String>,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

/// Maximum-likelihood fit (covariance normalized by n, not n-1).
pub fn fit_gaussian(data: &Dataset) -> Result<GaussianModel> {
    let d = data.n_cols();
    let n = data.n_rows();
    if n < d + 1 {
        return Err(Error::InsufficientRows { required: d + 1, actual: n });
    }
    let nf = n as f64;
    let mut mean = DVector::<f64>::zeros(d);
    for r in 0..n {
        for (c, &v) in data.row(r).iter().enumerate() {
            mean[c] += v;
        }
    }
    mean /= nf;
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0; d];
    for r in 0..n {
        for (c, &v) in data.row(r).iter().enumerate() {
            centered[c] = v - mean[c];
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / nf;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    GaussianModel::from_moments(data.labels().to_vec(), mean, cov)
}

impl GaussianModel {
    /// Builds a model from explicit moments; the covariance must be square,
    /// label-sized, and symmetric to 1e-8 (it is symmetrized on entry).
    pub fn from_moments(
        labels: Vec<String>,
        mean: DVector<f64>,
        cov: DMatrix<f64>,
    ) -> Result<Self> {
        let d = labels.len();
        if mean.len() != d || cov.nrows() != d || cov.ncols() != d {
            return Err(Error::LengthMismatch { left: mean.len(), right: d });
        }
        let mut max_asym: f64 = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                max_asym = max_asym.max((cov[(i, j)] - cov[(j, i)]).abs());
            }
        }
        if max_asym > 1e-8 {
            return Err(Error::InvalidConfig(format!(
                "covariance asymmetric by {max_asym:e}"
            )));
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { labels, mean, cov })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Marginal over the given (distinct, in-range) coordinates.
    pub fn marginal(&self, indices: &[usize]) -> Result<GaussianModel> {
        let d = self.dim();
        let mut seen = vec![false; d];
        for &i in indices {
            if i >= d {
                return Err(Error::IndexOutOfRange { index: i, node_count: d });
            }
            if seen[i] {
                return Err(Error::InvalidConditioningSet);
            }
            seen[i] = true;
        }
        let labels = indices.iter().map(|&i| self.labels[i].clone()).collect();
        let mean = DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.mean[i]));
        let cov = DMatrix::from_fn(indices.len(), indices.len(), |r, c| {
            self.cov[(indices[r], indices[c])]
        });
        GaussianModel::from_moments(labels, mean, cov)
    }

    /// Precomputes the conditional structure for conditioning set `subset`.
    pub fn conditional_map(&self, subset: &[usize]) -> Result<ConditionalMap> {
        ConditionalMap::new(self, subset)
    }

    pub fn to_json_string(&self) -> Result<String> {
        let d = self.dim();
        let file = GaussianFile {
            labels: self.labels.clone(),
            mean: self.mean.iter().copied().collect(),
            cov: (0..d)
                .map(|i| (0..d).map(|j| self.cov[(i, j)]).collect())
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: GaussianFile = serde_json::from_str(text)?;
        let d = file.labels.len();
        if file.cov.len() != d || file.cov.iter().any(|row| row.len() != d) {
            return Err(Error::Parse("covariance shape mismatch".into()));
        }
        let mean = DVector::from_vec(file.mean);
        let cov = DMatrix::from_fn(d, d, |i, j| file.cov[i][j]);
        Self::from_moments(file.labels, mean, cov)
    }
}

#[derive(Serialize, Deserialize)]
struct GaussianFile {
    labels: Vec<String>,
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

fn cholesky_with_jitter(matrix: &DMatrix<f64>) -> Result<(Cholesky<f64, nalgebra::Dyn>, f64)> {
    for &jitter in &JITTERS {
        let mut candidate = matrix.clone();
        if jitter > 0.0 {
            for i in 0..candidate.nrows() {
                candidate[(i, i)] += jitter;
            }
        }
        if let Some(chol) = Cholesky::new(candidate) {
            if jitter > 0.0 {
                log::debug!("cholesky needed jitter {jitter:e}");
            }
            return Ok((chol, jitter));
        }
    }
    Err(Error::NumericallySingular { max_jitter: *JITTERS.last().unwrap() })
}

/// Lower-triangular factor stored by rows over the non-degenerate free
/// coordinates; degenerate coordinates are pinned to the conditional mean.
#[derive(Debug, Clone)]
struct CondSampler {
    active: Vec<usize>, // positions within the free coordinate list
    rows: Vec<Vec<f64>>,
    jitter: f64,
}

/// Conditional law of the free coordinates given one conditioning set:
/// mean(x_S) = offset + gain * x_S with a fixed conditional covariance.
#[derive(Debug, Clone)]
pub struct ConditionalMap {
    subset: Vec<usize>,
    free: Vec<usize>,
    gain: DMatrix<f64>,
    offset: DVector<f64>,
    cond_cov: DMatrix<f64>,
    sampler: CondSampler,
    gain_jitter: f64,
}

impl ConditionalMap {
    fn new(gm: &GaussianModel, subset: &[usize]) -> Result<Self> {
        let d = gm.dim();
        let mut in_s = vec![false; d];
        for &i in subset {
            if i >= d {
                return Err(Error::IndexOutOfRange { index: i, node_count: d });
            }
            if in_s[i] {
                return Err(Error::InvalidConditioningSet);
            }
            in_s[i] = true;
        }
        if subset.len() >= d {
            return Err(Error::InvalidConditioningSet);
        }
        let free: Vec<usize> = (0..d).filter(|&i| !in_s[i]).collect();
        let s = subset.len();
        let f = free.len();

        let (gain, offset, cond_cov, gain_jitter);
        if s == 0 {
            gain = DMatrix::zeros(f, 0);
            offset = DVector::from_iterator(f, free.iter().map(|&i| gm.mean[i]));
            cond_cov = DMatrix::from_fn(f, f, |r, c| gm.cov[(free[r], free[c])]);
            gain_jitter = 0.0;
        } else {
            let sigma_ss = DMatrix::from_fn(s, s, |r, c| gm.cov[(subset[r], subset[c])]);
            let sigma_s_free = DMatrix::from_fn(s, f, |r, c| gm.cov[(subset[r], free[c])]);
            let (chol, jitter) = cholesky_with_jitter(&sigma_ss)?;
            // gain^T = sigma_SS^{-1} sigma_{S,free}
            let gain_t = chol.solve(&sigma_s_free);
            gain = gain_t.transpose();
            let mean_s = DVector::from_iterator(s, subset.iter().map(|&i| gm.mean[i]));
            let mean_free = DVector::from_iterator(f, free.iter().map(|&i| gm.mean[i]));
            offset = &mean_free - &gain * &mean_s;
            let sigma_ff = DMatrix::from_fn(f, f, |r, c| gm.cov[(free[r], free[c])]);
            let raw = &sigma_ff - &gain * &sigma_s_free;
            cond_cov = (&raw + raw.transpose()) * 0.5;
            gain_jitter = jitter;
        }

        let active: Vec<usize> =
            (0..f).filter(|&i| cond_cov[(i, i)] > DEGENERATE_VAR).collect();
        let sampler = if active.is_empty() {
            CondSampler { active, rows: Vec::new(), jitter: 0.0 }
        } else {
            let k = active.len();
            let block = DMatrix::from_fn(k, k, |r, c| cond_cov[(active[r], active[c])]);
            let (chol, jitter) = cholesky_with_jitter(&block)?;
            let l = chol.l();
            let rows = (0..k)
                .map(|i| (0..=i).map(|j| l[(i, j)]).collect())
                .collect();
            CondSampler { active, rows, jitter }
        };

        Ok(Self {
            subset: subset.to_vec(),
            free,
            gain,
            offset,
            cond_cov,
            sampler,
            gain_jitter,
        })
    }

    pub fn subset(&self) -> &[usize] {
        &self.subset
    }

    pub fn free_indices(&self) -> &[usize] {
        &self.free
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    pub fn cond_cov(&self) -> &DMatrix<f64> {
        &self.cond_cov
    }

    /// Largest jitter the ladder had to apply for this map.
    pub fn jitter_used(&self) -> f64 {
        self.gain_jitter.max(self.sampler.jitter)
    }

    /// Conditional mean for the subset values `x_s`, written to `out`
    /// (length = number of free coordinates).
    pub fn mean_into(&self, x_s: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x_s.len(), self.subset.len());
        debug_assert_eq!(out.len(), self.free.len());
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = self.offset[i];
            for (j, &x) in x_s.iter().enumerate() {
                acc += self.gain[(i, j)] * x;
            }
            *o = acc;
        }
    }

    pub fn conditional_mean(&self, x_s: &[f64]) -> DVector<f64> {
        let mut out = vec![0.0; self.free.len()];
        self.mean_into(x_s, &mut out);
        DVector::from_vec(out)
    }

    /// One draw from the conditional law: `out = mean + L z` on the active
    /// block, mean exactly on degenerate coordinates. `z_scratch` must hold
    /// at least `active` count entries.
    pub fn draw_into<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        mean: &[f64],
        out: &mut [f64],
        z_scratch: &mut [f64],
    ) {
        out.copy_from_slice(mean);
        let k = self.sampler.active.len();
        if k == 0 {
            return;
        }
        for z in z_scratch[..k].iter_mut() {
            *z = rng.sample(StandardNormal);
        }
        for (i, &pos) in self.sampler.active.iter().enumerate() {
            let row = &self.sampler.rows[i];
            let mut acc = 0.0;
            for (l, &z) in row.iter().zip(z_scratch.iter()) {
                acc += l * z;
            }
            out[pos] += acc;
        }
    }
}

/// Conditional distribution evaluated at one conditioning value.
#[derive(Debug, Clone)]
pub struct ConditionalGaussian {
    map: ConditionalMap,
    mean: DVector<f64>,
}

/// Conditions `gm` on coordinates `subset` taking the values `x_s`.
/// `subset` must be a proper subset of the coordinates; an empty subset
/// yields the marginal law of everything.
pub fn condition(gm: &GaussianModel, subset: &[usize], x_s: &[f64]) -> Result<ConditionalGaussian> {
    if x_s.len() != subset.len() {
        return Err(Error::LengthMismatch { left: x_s.len(), right: subset.len() });
    }
    let map = gm.conditional_map(subset)?;
    let mean = map.conditional_mean(x_s);
    Ok(ConditionalGaussian { map, mean })
}

impl ConditionalGaussian {
    pub fn free_indices(&self) -> &[usize] {
        self.map.free_indices()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cond_cov(&self) -> &DMatrix<f64> {
        self.map.cond_cov()
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        self.map.gain()
    }

    pub fn offset(&self) -> &DVector<f64> {
        self.map.offset()
    }

    pub fn jitter_used(&self) -> f64 {
        self.map.jitter_used()
    }
}

/// Draws `m` rows from the conditional law (row-major, width = free count).
pub fn sample_conditional(cg: &ConditionalGaussian, m: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = crate::seed::stream_rng(seed, 0);
    let f = cg.free_indices().len();
    let mean: Vec<f64> = cg.mean.iter().copied().collect();
    let mut z = vec![0.0; f];
    (0..m)
        .map(|_| {
            let mut row = vec![0.0; f];
            cg.map.draw_into(&mut rng, &mean, &mut row, &mut z);
            row
        })
        .collect()
}
