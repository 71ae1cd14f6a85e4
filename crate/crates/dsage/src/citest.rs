//! Fisher-z partial-correlation independence tests.
//!
//! This is the statistical baseline that graph queries replace: deciding
//! X_i ⟂ X_j given X_S from data instead of from a learned structure. The
//! partial correlation comes from two interchangeable routes — correlating
//! OLS residuals, or reading the inverse of a covariance submatrix — which
//! must agree to high precision on the same inputs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::scm::Dataset;

pub const DEFAULT_ALPHA: f64 = 0.05;

/// Correlations this close to ±1 make the z-transform blow up.
const DEGENERATE_R: f64 = 1.0 - 1e-12;

/// Relative pivot floor marking a rank-deficient regression design.
const SINGULAR_PIVOT_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiTestResult {
    pub partial_correlation: f64,
    pub z_statistic: f64,
    pub p_value: f64,
    /// Decision at the requested level: true iff `p_value > alpha`.
    pub independent: bool,
}

fn validate_query(d: usize, i: usize, j: usize, s: &[usize]) -> Result<()> {
    if i >= d {
        return Err(Error::IndexOutOfRange { index: i, node_count: d });
    }
    if j >= d {
        return Err(Error::IndexOutOfRange { index: j, node_count: d });
    }
    for &c in s {
        if c >= d {
            return Err(Error::IndexOutOfRange { index: c, node_count: d });
        }
    }
    let mut sorted = s.to_vec();
    sorted.sort_unstable();
    let distinct = sorted.windows(2).all(|w| w[0] != w[1]);
    if i == j || !distinct || s.contains(&i) || s.contains(&j) {
        return Err(Error::InvalidConditioningSet);
    }
    Ok(())
}

/// Cholesky solve with a relative pivot check, so exactly collinear designs
/// are reported rather than silently solved with round-off pivots.
fn solve_checked(a: DMatrix<f64>, b: &DVector<f64>, node: usize) -> Result<DVector<f64>> {
    let k = a.nrows();
    let diag: Vec<f64> = (0..k).map(|i| a[(i, i)]).collect();
    let chol = nalgebra::Cholesky::new(a).ok_or(Error::SingularDesign { node })?;
    let l = chol.l_dirty();
    for (i, &aii) in diag.iter().enumerate() {
        if l[(i, i)] * l[(i, i)] <= SINGULAR_PIVOT_RTOL * aii {
            return Err(Error::SingularDesign { node });
        }
    }
    Ok(chol.solve(b))
}

/// Residuals of column `y` regressed with intercept on columns `s`.
fn ols_residuals(data: &Dataset, y: usize, s: &[usize]) -> Result<Vec<f64>> {
    let n = data.n_rows();
    let k = s.len() + 1;
    let mut gram = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DVector::<f64>::zeros(k);
    let mut design = vec![0.0; k];
    for r in 0..n {
        let row = data.row(r);
        design[0] = 1.0;
        for (c, &si) in s.iter().enumerate() {
            design[c + 1] = row[si];
        }
        let yv = row[y];
        for a in 0..k {
            rhs[a] += design[a] * yv;
            for b in a..k {
                gram[(a, b)] += design[a] * design[b];
            }
        }
    }
    for a in 0..k {
        for b in (a + 1)..k {
            gram[(b, a)] = gram[(a, b)];
        }
    }
    let beta = solve_checked(gram, &rhs, y)?;
    let mut out = Vec::with_capacity(n);
    for r in 0..n {
        let row = data.row(r);
        let mut fit = beta[0];
        for (c, &si) in s.iter().enumerate() {
            fit += beta[c + 1] * row[si];
        }
        out.push(row[y] - fit);
    }
    Ok(out)
}

/// Partial correlation of columns `i` and `j` given columns `s`, computed by
/// correlating the OLS residuals of each on `s` (with intercept).
pub fn partial_corr(data: &Dataset, i: usize, j: usize, s: &[usize]) -> Result<f64> {
    validate_query(data.n_cols(), i, j, s)?;
    let n = data.n_rows();
    if n <= s.len() + 3 {
        return Err(Error::InsufficientRows { required: s.len() + 4, actual: n });
    }
    let ei = ols_residuals(data, i, s)?;
    let ej = ols_residuals(data, j, s)?;
    let mut sii = 0.0;
    let mut sjj = 0.0;
    let mut sij = 0.0;
    for (a, b) in ei.iter().zip(ej.iter()) {
        sii += a * a;
        sjj += b * b;
        sij += a * b;
    }
    if sii <= 0.0 || sjj <= 0.0 {
        return Err(Error::DegenerateCorrelation { r: f64::NAN });
    }
    Ok((sij / (sii * sjj).sqrt()).clamp(-1.0, 1.0))
}

/// Partial correlation read from a covariance matrix: invert the submatrix
/// over `{i, j} ∪ s` and normalize the off-diagonal precision entry.
pub fn partial_corr_from_cov(
    cov: &DMatrix<f64>,
    i: usize,
    j: usize,
    s: &[usize],
) -> Result<f64> {
    let d = cov.nrows();
    if cov.ncols() != d {
        return Err(Error::InvalidConfig("covariance must be square".into()));
    }
    validate_query(d, i, j, s)?;
    let mut ids = Vec::with_capacity(s.len() + 2);
    ids.push(i);
    ids.push(j);
    ids.extend_from_slice(s);
    let k = ids.len();
    let mut sub = DMatrix::<f64>::zeros(k, k);
    for (a, &ia) in ids.iter().enumerate() {
        for (b, &ib) in ids.iter().enumerate() {
            sub[(a, b)] = cov[(ia, ib)];
        }
    }
    let diag: Vec<f64> = (0..k).map(|a| sub[(a, a)]).collect();
    let chol = nalgebra::Cholesky::new(sub).ok_or(Error::SingularDesign { node: i })?;
    let l = chol.l_dirty();
    for (a, &saa) in diag.iter().enumerate() {
        if l[(a, a)] * l[(a, a)] <= SINGULAR_PIVOT_RTOL * saa {
            return Err(Error::SingularDesign { node: i });
        }
    }
    let prec = chol.inverse();
    let denom = prec[(0, 0)] * prec[(1, 1)];
    if denom <= 0.0 {
        return Err(Error::DegenerateCorrelation { r: f64::NAN });
    }
    Ok((-prec[(0, 1)] / denom.sqrt()).clamp(-1.0, 1.0))
}

/// Fisher z-transform test of a (partial) correlation: `z = sqrt(n - |S| - 3)
/// * atanh(r)`, two-sided p-value from the standard normal.
pub fn fisher_z_test(r: f64, n: usize, s_size: usize, alpha: f64) -> Result<CiTestResult> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::InvalidConfig(format!("alpha {alpha} out of (0, 1)")));
    }
    if n <= s_size + 3 {
        return Err(Error::InsufficientRows { required: s_size + 4, actual: n });
    }
    if !r.is_finite() || r.abs() >= DEGENERATE_R {
        return Err(Error::DegenerateCorrelation { r });
    }
    let z = ((n - s_size - 3) as f64).sqrt() * r.atanh();
    // Two-sided normal tail via erfc for precision far out in the tail.
    let p = erfc(z.abs() / std::f64::consts::SQRT_2);
    Ok(CiTestResult {
        partial_correlation: r,
        z_statistic: z,
        p_value: p,
        independent: p > alpha,
    })
}

/// Full data-driven conditional-independence test of columns `i` and `j`
/// given `s`.
pub fn ci_test(
    data: &Dataset,
    i: usize,
    j: usize,
    s: &[usize],
    alpha: f64,
) -> Result<CiTestResult> {
    let r = partial_corr(data, i, j, s)?;
    fisher_z_test(r, data.n_rows(), s.len(), alpha)
}

/// Parses batch query lines of the form `i,j[,s1,s2,...]` (no header).
pub fn parse_query_lines(text: &str) -> Result<Vec<(usize, usize, Vec<usize>)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(Error::Parse(format!(
                "query line {}: expected at least i,j, got {line:?}",
                lineno + 1
            )));
        }
        let mut nums = Vec::with_capacity(fields.len());
        for f in &fields {
            let v: usize = f.parse().map_err(|_| {
                Error::Parse(format!("query line {}: bad index {f:?}", lineno + 1))
            })?;
            nums.push(v);
        }
        let i = nums[0];
        let j = nums[1];
        out.push((i, j, nums[2..].to_vec()));
    }
    Ok(out)
}

/// Runs each query against the dataset and renders a decisions CSV with
/// header `i,j,s_size,partial_correlation,z_statistic,p_value,independent`.
pub fn batch_decisions_csv(
    data: &Dataset,
    queries: &[(usize, usize, Vec<usize>)],
    alpha: f64,
) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "i",
        "j",
        "s_size",
        "partial_correlation",
        "z_statistic",
        "p_value",
        "independent",
    ])
    .map_err(|e| Error::Parse(e.to_string()))?;
    for (i, j, s) in queries {
        let res = ci_test(data, *i, *j, s, alpha)?;
        w.write_record([
            i.to_string(),
            j.to_string(),
            s.len().to_string(),
            format!("{:.12}", res.partial_correlation),
            format!("{:.12}", res.z_statistic),
            format!("{:.6e}", res.p_value),
            res.independent.to_string(),
        ])
        .map_err(|e| Error::Parse(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}
