//! C ABI over the core pipeline: datasets, graphs, structure learning,
//! d-separation queries, and importance estimation behind opaque handles.
//!
//! Conventions, stated once and used everywhere:
//! - Constructors return an owned pointer, or null on failure; operations
//!   return a [`DsageStatus`] and write through out-parameters.
//! - After any failure, `dsage_last_error` returns a message that stays
//!   valid on the calling thread until the next failing call.
//! - Every owned pointer has exactly one matching `_free` function; freeing
//!   null is a no-op. Strings returned as `char*` are released with
//!   `dsage_string_free`.
//! - Panics never unwind across the boundary; they surface as
//!   `DSAGE_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use dsage::csl::{learn_structure, SearchConfig};
use dsage::dag::{Dag, DsepQuery};
use dsage::gaussian::fit_gaussian;
use dsage::model::fit_ols;
use dsage::sage::{dsage_estimate, sage_estimate, EstimatorConfig, SageResult};
use dsage::scm::Dataset;
use dsage::Error;

/// Outcome of a call through the C interface.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsageStatus {
    /// The call succeeded.
    DsageStatusOk = 0,
    /// A required pointer argument was null.
    DsageStatusNullArgument = 1,
    /// A string argument was not valid UTF-8.
    DsageStatusInvalidString = 2,
    /// The inputs or configuration were rejected.
    DsageStatusInvalidInput = 3,
    /// The operation failed while running.
    DsageStatusRuntimeError = 4,
    /// The implementation panicked; state may be stale but memory is safe.
    DsageStatusPanic = 5,
}

/// Structure-search flavor for `dsage_learn`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsageAlgorithm {
    /// Greedy hill-climbing to the first local optimum.
    DsageAlgorithmHillClimb = 0,
    /// Hill-climbing plus tabu-list escapes, returning the best visited.
    DsageAlgorithmTabu = 1,
}

use DsageAlgorithm::*;
use DsageStatus::*;

/// Opaque tabular dataset handle.
pub struct DsageDataset(Dataset);

/// Opaque directed acyclic graph handle.
pub struct DsageDag(Dag);

/// Opaque importance-estimate handle.
pub struct DsageResult(SageResult);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(e: &Error) -> DsageStatus {
    if e.is_invalid_input() {
        DsageStatusInvalidInput
    } else {
        DsageStatusRuntimeError
    }
}

fn fail(e: &Error) -> DsageStatus {
    set_error(&e.to_string());
    status_of(e)
}

/// Runs `f` with panics converted to an error status.
fn guarded(f: impl FnOnce() -> DsageStatus) -> DsageStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic");
            DsageStatusPanic
        }
    }
}

/// Runs a constructor body with panics converted to null.
fn guarded_ptr<T>(f: impl FnOnce() -> *mut T) -> *mut T {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(p) => p,
        Err(_) => {
            set_error("internal panic");
            std::ptr::null_mut()
        }
    }
}

/// Converts a C string argument, recording an error on failure.
///
/// # Safety
/// `ptr` must be null or point to a NUL-terminated string.
unsafe fn cstr_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, DsageStatus> {
    if ptr.is_null() {
        set_error(&format!("{name} must not be null"));
        return Err(DsageStatusNullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{name} is not valid UTF-8"));
        DsageStatusInvalidString
    })
}

fn null_check<'a, T>(ptr: *const T, name: &str) -> Result<&'a T, DsageStatus> {
    unsafe { ptr.as_ref() }.ok_or_else(|| {
        set_error(&format!("{name} must not be null"));
        DsageStatusNullArgument
    })
}

fn into_string_ptr(text: String) -> *mut c_char {
    match CString::new(text.replace('\0', " ")) {
        Ok(c) => c.into_raw(),
        Err(_) => std::ptr::null_mut(),
    }
}

/// Version of the library as a static string; do not free.
#[no_mangle]
pub extern "C" fn dsage_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread, or an empty string.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dsage_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must be null or a pointer obtained from this library's functions.
#[no_mangle]
pub unsafe extern "C" fn dsage_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a dataset from a CSV file with a header row of column labels.
/// Returns null on failure.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dsage_dataset_load_csv(path: *const c_char) -> *mut DsageDataset {
    guarded_ptr(|| {
        let path = match cstr_arg(path, "path") {
            Ok(p) => p,
            Err(_) => return std::ptr::null_mut(),
        };
        match Dataset::load_csv(std::path::Path::new(path)) {
            Ok(ds) => Box::into_raw(Box::new(DsageDataset(ds))),
            Err(e) => {
                fail(&e);
                std::ptr::null_mut()
            }
        }
    })
}

/// Number of rows, or -1 if `ds` is null.
#[no_mangle]
pub extern "C" fn dsage_dataset_n_rows(ds: *const DsageDataset) -> i64 {
    match null_check(ds, "ds") {
        Ok(ds) => ds.0.n_rows() as i64,
        Err(_) => -1,
    }
}

/// Number of columns, or -1 if `ds` is null.
#[no_mangle]
pub extern "C" fn dsage_dataset_n_cols(ds: *const DsageDataset) -> i64 {
    match null_check(ds, "ds") {
        Ok(ds) => ds.0.n_cols() as i64,
        Err(_) => -1,
    }
}

/// Index of the column with the given label, or -1 if absent or on error.
///
/// # Safety
/// `label` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dsage_dataset_column_index(
    ds: *const DsageDataset,
    label: *const c_char,
) -> i64 {
    let Ok(ds) = null_check(ds, "ds") else { return -1 };
    let Ok(label) = cstr_arg(label, "label") else { return -1 };
    ds.0.column_index(label).map_or(-1, |i| i as i64)
}

/// Releases a dataset handle.
///
/// # Safety
/// `ds` must be null or a pointer from `dsage_dataset_load_csv`.
#[no_mangle]
pub unsafe extern "C" fn dsage_dataset_free(ds: *mut DsageDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Parses a graph from edge-list text (`# nodes:` header plus one
/// `parent,child` line per edge). Returns null on failure.
///
/// # Safety
/// `text` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dsage_dag_from_edge_list(text: *const c_char) -> *mut DsageDag {
    dag_from(text, Dag::from_edge_list_text)
}

/// Parses a graph from its JSON form. Returns null on failure.
///
/// # Safety
/// `text` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dsage_dag_from_json(text: *const c_char) -> *mut DsageDag {
    dag_from(text, Dag::from_json_str)
}

unsafe fn dag_from(
    text: *const c_char,
    parse: fn(&str) -> dsage::Result<Dag>,
) -> *mut DsageDag {
    guarded_ptr(|| {
        let text = match cstr_arg(text, "text") {
            Ok(t) => t,
            Err(_) => return std::ptr::null_mut(),
        };
        match parse(text) {
            Ok(dag) => Box::into_raw(Box::new(DsageDag(dag))),
            Err(e) => {
                fail(&e);
                std::ptr::null_mut()
            }
        }
    })
}

/// Number of nodes, or -1 if `dag` is null.
#[no_mangle]
pub extern "C" fn dsage_dag_node_count(dag: *const DsageDag) -> i64 {
    match null_check(dag, "dag") {
        Ok(dag) => dag.0.node_count() as i64,
        Err(_) => -1,
    }
}

/// Number of edges, or -1 if `dag` is null.
#[no_mangle]
pub extern "C" fn dsage_dag_edge_count(dag: *const DsageDag) -> i64 {
    match null_check(dag, "dag") {
        Ok(dag) => dag.0.edge_count() as i64,
        Err(_) => -1,
    }
}

/// Serializes the graph to JSON; release with `dsage_string_free`.
#[no_mangle]
pub extern "C" fn dsage_dag_to_json(dag: *const DsageDag) -> *mut c_char {
    guarded_ptr(|| {
        let dag = match null_check(dag, "dag") {
            Ok(d) => d,
            Err(_) => return std::ptr::null_mut(),
        };
        match dag.0.to_json_string() {
            Ok(text) => into_string_ptr(text),
            Err(e) => {
                fail(&e);
                std::ptr::null_mut()
            }
        }
    })
}

/// Tests whether nodes `x` and `y` are d-separated given the conditioning
/// nodes; writes the answer to `out`.
///
/// # Safety
/// `cond` must be null only when `cond_len` is zero, and otherwise point to
/// `cond_len` readable elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dsage_dag_d_separated(
    dag: *const DsageDag,
    x: u64,
    y: u64,
    cond: *const u64,
    cond_len: u64,
    out: *mut bool,
) -> DsageStatus {
    guarded(|| {
        let dag = match null_check(dag, "dag") {
            Ok(d) => d,
            Err(s) => return s,
        };
        if out.is_null() {
            set_error("out must not be null");
            return DsageStatusNullArgument;
        }
        if cond.is_null() && cond_len > 0 {
            set_error("cond must not be null when cond_len > 0");
            return DsageStatusNullArgument;
        }
        let cond_set: Vec<usize> = if cond_len == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(cond, cond_len as usize)
                .iter()
                .map(|&v| v as usize)
                .collect()
        };
        let query = DsepQuery::new(x as usize, y as usize, cond_set);
        match dag.0.d_separated(&query) {
            Ok(answer) => {
                *out = answer;
                DsageStatusOk
            }
            Err(e) => fail(&e),
        }
    })
}

/// Releases a graph handle.
///
/// # Safety
/// `dag` must be null or a pointer from a graph constructor.
#[no_mangle]
pub unsafe extern "C" fn dsage_dag_free(dag: *mut DsageDag) {
    if !dag.is_null() {
        drop(Box::from_raw(dag));
    }
}

/// Learns a graph over all dataset columns by greedy score-based search
/// and writes an owned handle to `out`. `max_in_degree < 0` leaves the
/// parent count uncapped.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dsage_learn(
    ds: *const DsageDataset,
    algorithm: DsageAlgorithm,
    max_in_degree: i64,
    out: *mut *mut DsageDag,
) -> DsageStatus {
    guarded(|| {
        let ds = match null_check(ds, "ds") {
            Ok(d) => d,
            Err(s) => return s,
        };
        if out.is_null() {
            set_error("out must not be null");
            return DsageStatusNullArgument;
        }
        let mut config = match algorithm {
            DsageAlgorithmHillClimb => SearchConfig::hill_climb(),
            DsageAlgorithmTabu => SearchConfig::tabu(),
        };
        config.max_in_degree = usize::try_from(max_in_degree).ok();
        match learn_structure(&ds.0, &config) {
            Ok(learned) => {
                *out = Box::into_raw(Box::new(DsageDag(learned.dag)));
                DsageStatusOk
            }
            Err(e) => fail(&e),
        }
    })
}

/// Estimates global feature importance for an ordinary-least-squares model
/// fitted on the dataset, marginalizing held-out features with Gaussian
/// moments fitted on the same data. A non-null `graph` (covering every
/// feature label and the target) enables skipping of positions it
/// certifies as zero. Writes an owned handle to `out`.
///
/// # Safety
/// `target` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dsage_run(
    ds: *const DsageDataset,
    target: *const c_char,
    graph: *const DsageDag,
    n_permutations: u64,
    min_permutations: u64,
    convergence_threshold: f64,
    m_conditional_draws: u64,
    seed: u64,
    out: *mut *mut DsageResult,
) -> DsageStatus {
    guarded(|| {
        let ds = match null_check(ds, "ds") {
            Ok(d) => d,
            Err(s) => return s,
        };
        let target = match cstr_arg(target, "target") {
            Ok(t) => t,
            Err(s) => return s,
        };
        if out.is_null() {
            set_error("out must not be null");
            return DsageStatusNullArgument;
        }
        let graph = graph.as_ref().map(|g| &g.0);
        let run = || -> dsage::Result<SageResult> {
            let data = ds.0.clone().with_target(target)?;
            let fidx = data.feature_indices()?;
            let model = fit_ols(&data)?;
            let gm = fit_gaussian(&data.select_columns(&fidx)?)?;
            let mut cfg = EstimatorConfig::new(n_permutations as usize, seed);
            cfg.min_permutations = min_permutations as usize;
            cfg.convergence_threshold = convergence_threshold;
            cfg.m_conditional_draws = m_conditional_draws as usize;
            match graph {
                Some(g) => dsage_estimate(&data, &model, &gm, &cfg.with_graph(g.clone())),
                None => sage_estimate(&data, &model, &gm, &cfg),
            }
        };
        match run() {
            Ok(res) => {
                *out = Box::into_raw(Box::new(DsageResult(res)));
                DsageStatusOk
            }
            Err(e) => fail(&e),
        }
    })
}

/// Number of features in the estimate, or -1 if `res` is null.
#[no_mangle]
pub extern "C" fn dsage_result_n_features(res: *const DsageResult) -> i64 {
    match null_check(res, "res") {
        Ok(res) => res.0.phi.len() as i64,
        Err(_) => -1,
    }
}

/// Copies all importance values into `buf`, which must hold exactly
/// `len == dsage_result_n_features` elements, ordered as the labels.
///
/// # Safety
/// `buf` must point to `len` writable elements.
#[no_mangle]
pub unsafe extern "C" fn dsage_result_phi(
    res: *const DsageResult,
    buf: *mut f64,
    len: u64,
) -> DsageStatus {
    guarded(|| {
        let res = match null_check(res, "res") {
            Ok(r) => r,
            Err(s) => return s,
        };
        if buf.is_null() {
            set_error("buf must not be null");
            return DsageStatusNullArgument;
        }
        if len as usize != res.0.phi.len() {
            set_error(&format!(
                "buffer holds {len} elements but the estimate has {}",
                res.0.phi.len()
            ));
            return DsageStatusInvalidInput;
        }
        std::slice::from_raw_parts_mut(buf, res.0.phi.len()).copy_from_slice(&res.0.phi);
        DsageStatusOk
    })
}

/// Label of feature `j` as an owned string, or null when out of range;
/// release with `dsage_string_free`.
#[no_mangle]
pub extern "C" fn dsage_result_feature_label(res: *const DsageResult, j: u64) -> *mut c_char {
    guarded_ptr(|| {
        let res = match null_check(res, "res") {
            Ok(r) => r,
            Err(_) => return std::ptr::null_mut(),
        };
        match res.0.feature_labels.get(j as usize) {
            Some(label) => into_string_ptr(label.clone()),
            None => {
                set_error(&format!("feature index {j} out of range"));
                std::ptr::null_mut()
            }
        }
    })
}

/// Fraction of evaluation positions the graph certified as zero; NaN if
/// `res` is null.
#[no_mangle]
pub extern "C" fn dsage_result_skip_fraction(res: *const DsageResult) -> f64 {
    match null_check(res, "res") {
        Ok(res) => res.0.skip_fraction(),
        Err(_) => f64::NAN,
    }
}

/// Whether the run converged before exhausting its permutation budget;
/// false if `res` is null.
#[no_mangle]
pub extern "C" fn dsage_result_converged(res: *const DsageResult) -> bool {
    null_check(res, "res").map(|r| r.0.converged).unwrap_or(false)
}

/// Full estimate serialized to JSON; release with `dsage_string_free`.
#[no_mangle]
pub extern "C" fn dsage_result_to_json(res: *const DsageResult) -> *mut c_char {
    guarded_ptr(|| {
        let res = match null_check(res, "res") {
            Ok(r) => r,
            Err(_) => return std::ptr::null_mut(),
        };
        match res.0.to_json_string() {
            Ok(text) => into_string_ptr(text),
            Err(e) => {
                fail(&e);
                std::ptr::null_mut()
            }
        }
    })
}

/// Releases an estimate handle.
///
/// # Safety
/// `res` must be null or a pointer from `dsage_run`.
#[no_mangle]
pub unsafe extern "C" fn dsage_result_free(res: *mut DsageResult) {
    if !res.is_null() {
        drop(Box::from_raw(res));
    }
}
