//! Predictors and marginalized prediction.
//!
//! A [`Predictor`] is a pure function from a full feature vector to a real
//! prediction. [`marginalized_predict`] turns it into a function of a
//! feature subset by averaging predictions over Monte Carlo completions of
//! the held-out coordinates drawn from a Gaussian conditional; when the
//! subset is the full feature set the prediction is exact and no draws are
//! consumed.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{ConditionalMap, GaussianModel};
use crate::scm::Dataset;

/// A fitted model: pure prediction over a fixed feature order.
pub trait Predictor: Send + Sync {
    fn predict(&self, x: &[f64]) -> f64;
    fn feature_labels(&self) -> &[String];
}

/// Linear predictor `intercept + coefficients . x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub feature_labels: Vec<String>,
}

impl Predictor for LinearModel {
    fn predict(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.coefficients.len());
        let mut acc = self.intercept;
        for (c, v) in self.coefficients.iter().zip(x.iter()) {
            acc += c * v;
        }
        acc
    }

    fn feature_labels(&self) -> &[String] {
        &self.feature_labels
    }
}

impl LinearModel {
    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Ordinary least squares with intercept on the dataset's feature columns
/// against its designated target, solved by normal equations.
pub fn fit_ols(train: &Dataset) -> Result<LinearModel> {
    let target = train
        .target_label()
        .ok_or_else(|| Error::InvalidConfig("fit_ols needs a designated target".into()))?
        .to_string();
    let features = train.feature_indices()?;
    let ti = train.column_index(&target).expect("target exists");
    let k = features.len() + 1; // intercept first
    let n = train.n_rows();
    if n < k + 1 {
        return Err(Error::InsufficientRows { required: k + 1, actual: n });
    }
    let mut gram = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    let mut design = vec![0.0; k];
    for r in 0..n {
        let row = train.row(r);
        design[0] = 1.0;
        for (c, &fi) in features.iter().enumerate() {
            design[c + 1] = row[fi];
        }
        let y = row[ti];
        for i in 0..k {
            let di = design[i];
            rhs[i] += di * y;
            for j in i..k {
                gram[(i, j)] += di * design[j];
            }
        }
    }
    for i in 0..k {
        for j in (i + 1)..k {
            gram[(j, i)] = gram[(i, j)];
        }
    }
    let chol = nalgebra::Cholesky::new(gram).ok_or(Error::RankDeficient)?;
    let beta = chol.solve(&rhs);
    Ok(LinearModel {
        intercept: beta[0],
        coefficients: beta.iter().skip(1).copied().collect(),
        feature_labels: features
            .iter()
            .map(|&fi| train.labels()[fi].clone())
            .collect(),
    })
}

/// Mean squared error between predictions and targets.
pub fn mse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(Error::LengthMismatch { left: predictions.len(), right: targets.len() });
    }
    if predictions.is_empty() {
        return Err(Error::InsufficientRows { required: 1, actual: 0 });
    }
    let sum: f64 = predictions
        .iter()
        .zip(targets.iter())
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / predictions.len() as f64)
}

/// Coefficient of determination of predictions against targets.
pub fn r_squared(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    let err = mse(predictions, targets)?;
    let mean: f64 = targets.iter().sum::<f64>() / targets.len() as f64;
    let var: f64 =
        targets.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / targets.len() as f64;
    if var <= 0.0 {
        return Err(Error::InvalidConfig("targets have zero variance".into()));
    }
    Ok(1.0 - err / var)
}

/// Scratch buffers for repeated marginalized predictions.
pub(crate) struct PredictBuffers {
    pub full: Vec<f64>,
    pub mean: Vec<f64>,
    pub draw: Vec<f64>,
    pub z: Vec<f64>,
}

impl PredictBuffers {
    pub fn new(dim: usize) -> Self {
        Self {
            full: vec![0.0; dim],
            mean: vec![0.0; dim],
            draw: vec![0.0; dim],
            z: vec![0.0; dim],
        }
    }
}

/// Hot-path core: average prediction over `m` conditional completions,
/// with the conditioning values already gathered and the map prebuilt.
pub(crate) fn marginalized_mean_with_map<R: Rng + ?Sized>(
    p: &dyn Predictor,
    map: &ConditionalMap,
    x_s: &[f64],
    m: usize,
    rng: &mut R,
    buf: &mut PredictBuffers,
) -> f64 {
    let f = map.free_indices().len();
    for (k, &i) in map.subset().iter().enumerate() {
        buf.full[i] = x_s[k];
    }
    map.mean_into(x_s, &mut buf.mean[..f]);
    let mut acc = 0.0;
    for _ in 0..m {
        map.draw_into(rng, &buf.mean[..f], &mut buf.draw[..f], &mut buf.z[..f]);
        for (k, &i) in map.free_indices().iter().enumerate() {
            buf.full[i] = buf.draw[k];
        }
        acc += p.predict(&buf.full);
    }
    acc / m as f64
}

/// Prediction marginalized over the held-out features: the average of
/// `p.predict` over `m` draws from `gm` conditioned on coordinates `subset`
/// taking the values `x_s`. With `subset` covering every feature the
/// prediction is exact and seed-independent.
pub fn marginalized_predict(
    p: &dyn Predictor,
    gm: &GaussianModel,
    subset: &[usize],
    x_s: &[f64],
    m: usize,
    seed: u64,
) -> Result<f64> {
    let d = gm.dim();
    if x_s.len() != subset.len() {
        return Err(Error::LengthMismatch { left: x_s.len(), right: subset.len() });
    }
    if subset.len() == d {
        let mut seen = vec![false; d];
        let mut full = vec![0.0; d];
        for (&i, &v) in subset.iter().zip(x_s.iter()) {
            if i >= d || seen[i] {
                return Err(Error::InvalidConditioningSet);
            }
            seen[i] = true;
            full[i] = v;
        }
        return Ok(p.predict(&full));
    }
    if m == 0 {
        return Err(Error::InvalidConfig("m must be >= 1".into()));
    }
    let map = gm.conditional_map(subset)?;
    let mut rng = crate::seed::stream_rng(seed, 0);
    let mut buf = PredictBuffers::new(d);
    Ok(marginalized_mean_with_map(p, &map, x_s, m, &mut rng, &mut buf))
}

/// Exact-match lookup predictor for tests: maps hashed input vectors to
/// stored predictions and panics on unseen inputs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LookupPredictor {
    pub feature_labels: Vec<String>,
    entries: BTreeMap<String, f64>,
}

/// FNV-1a over the little-endian bytes of the vector, hex encoded.
pub fn input_vector_key(x: &[f64]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in x {
        for b in v.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

impl LookupPredictor {
    pub fn new(feature_labels: Vec<String>) -> Self {
        Self { feature_labels, entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, x: &[f64], prediction: f64) {
        self.entries.insert(input_vector_key(x), prediction);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

impl Predictor for LookupPredictor {
    fn predict(&self, x: &[f64]) -> f64 {
        let key = input_vector_key(x);
        *self
            .entries
            .get(&key)
            .unwrap_or_else(|| panic!("lookup predictor has no entry for key {key}"))
    }

    fn feature_labels(&self) -> &[String] {
        &self.feature_labels
    }
}
