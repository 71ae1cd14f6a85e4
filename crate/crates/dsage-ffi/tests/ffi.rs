//! Exercises the C interface from the Rust side (the exported functions are
//! ordinary Rust functions) and, as a final check, compiles and runs a real
//! C program against the generated header and static library.

use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use dsage::dag::Dag;
use dsage::gaussian::fit_gaussian;
use dsage::model::fit_ols;
use dsage::sage::{sage_estimate, EstimatorConfig};
use dsage::scm::{Dataset, LinearGaussianScm};

use dsage_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(dsage_last_error()) }.to_str().unwrap().to_string()
}

fn chain_csv(dir: &Path, n: usize) -> CString {
    let dag = Dag::new(
        vec!["A".into(), "B".into(), "C".into(), "D".into()],
        [(0, 1), (1, 2), (2, 3)],
    )
    .unwrap();
    let weights = [(0usize, 1usize), (1, 2), (2, 3)].into_iter().map(|e| (e, 0.9)).collect();
    let scm = LinearGaussianScm::standardized(dag, weights, 0.05).unwrap();
    let path = dir.join("chain.csv");
    scm.sample(n, 5).save_csv(&path).unwrap();
    c(path.to_str().unwrap())
}

#[test]
fn version_and_error_reporting() {
    let version = unsafe { CStr::from_ptr(dsage_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));

    let missing = c("/definitely/not/a/file.csv");
    let ds = unsafe { dsage_dataset_load_csv(missing.as_ptr()) };
    assert!(ds.is_null());
    assert!(!last_error().is_empty());

    assert!(unsafe { dsage_dataset_load_csv(ptr::null()) }.is_null());
    assert!(last_error().contains("path"));
}

#[test]
fn dataset_handle_reports_shape_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let path = chain_csv(dir.path(), 50);
    let ds = unsafe { dsage_dataset_load_csv(path.as_ptr()) };
    assert!(!ds.is_null());
    assert_eq!(dsage_dataset_n_rows(ds), 50);
    assert_eq!(dsage_dataset_n_cols(ds), 4);
    let b = c("B");
    let nope = c("NOPE");
    unsafe {
        assert_eq!(dsage_dataset_column_index(ds, b.as_ptr()), 1);
        assert_eq!(dsage_dataset_column_index(ds, nope.as_ptr()), -1);
        dsage_dataset_free(ds);
    }
    // Null handles degrade to sentinels, never crash.
    assert_eq!(dsage_dataset_n_rows(ptr::null()), -1);
    assert_eq!(dsage_dataset_n_cols(ptr::null()), -1);
    unsafe { dsage_dataset_free(ptr::null_mut()) };
}

#[test]
fn dag_parsing_querying_and_serialization() {
    let text = c("# nodes: A,B,C\nA,B\nB,C\n");
    let dag = unsafe { dsage_dag_from_edge_list(text.as_ptr()) };
    assert!(!dag.is_null());
    assert_eq!(dsage_dag_node_count(dag), 3);
    assert_eq!(dsage_dag_edge_count(dag), 2);

    let mut sep = false;
    // A and C are linked through B: blocked given B, open given nothing.
    let cond = [1u64];
    let status =
        unsafe { dsage_dag_d_separated(dag, 0, 2, cond.as_ptr(), 1, &mut sep) };
    assert_eq!(status, DsageStatus::DsageStatusOk);
    assert!(sep);
    let status = unsafe { dsage_dag_d_separated(dag, 0, 2, ptr::null(), 0, &mut sep) };
    assert_eq!(status, DsageStatus::DsageStatusOk);
    assert!(!sep);

    // Out-of-range node index is an input error with a message.
    let status = unsafe { dsage_dag_d_separated(dag, 0, 99, ptr::null(), 0, &mut sep) };
    assert_eq!(status, DsageStatus::DsageStatusInvalidInput);
    assert!(last_error().contains("out of range"));

    let json = dsage_dag_to_json(dag);
    assert!(!json.is_null());
    let round = unsafe { dsage_dag_from_json(json) };
    assert!(!round.is_null());
    assert_eq!(dsage_dag_edge_count(round), 2);
    unsafe {
        dsage_string_free(json);
        dsage_dag_free(round);
        dsage_dag_free(dag);
    }

    let bad = c("not an edge list at all\x01");
    assert!(unsafe { dsage_dag_from_edge_list(bad.as_ptr()) }.is_null());
    let cyclic = c("# nodes: A,B\nA,B\nB,A\n");
    assert!(unsafe { dsage_dag_from_edge_list(cyclic.as_ptr()) }.is_null());
    assert!(!last_error().is_empty());
}

#[test]
fn learn_recovers_chain_skeleton() {
    let dir = tempfile::tempdir().unwrap();
    let path = chain_csv(dir.path(), 8000);
    let ds = unsafe { dsage_dataset_load_csv(path.as_ptr()) };
    assert!(!ds.is_null());
    let mut out: *mut DsageDag = ptr::null_mut();
    let status =
        unsafe { dsage_learn(ds, DsageAlgorithm::DsageAlgorithmTabu, -1, &mut out) };
    assert_eq!(status, DsageStatus::DsageStatusOk);
    assert_eq!(dsage_dag_edge_count(out), 3);

    let json = dsage_dag_to_json(out);
    let learned = Dag::from_json_str(
        unsafe { CStr::from_ptr(json) }.to_str().unwrap(),
    )
    .unwrap();
    let mut skeleton: Vec<(usize, usize)> =
        learned.edges().map(|(p, c)| (p.min(c), p.max(c))).collect();
    skeleton.sort_unstable();
    assert_eq!(skeleton, vec![(0, 1), (1, 2), (2, 3)]);
    unsafe {
        dsage_string_free(json);
        dsage_dag_free(out);
        dsage_dataset_free(ds);
    }
}

#[test]
fn run_matches_direct_library_call_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = chain_csv(dir.path(), 400);
    let ds = unsafe { dsage_dataset_load_csv(path.as_ptr()) };
    let target = c("D");
    let mut res: *mut DsageResult = ptr::null_mut();
    let status = unsafe {
        dsage_run(ds, target.as_ptr(), ptr::null(), 25, 10, 0.025, 4, 99, &mut res)
    };
    assert_eq!(status, DsageStatus::DsageStatusOk);
    assert_eq!(dsage_result_n_features(res), 3);
    let mut phi = [0.0f64; 3];
    let status = unsafe { dsage_result_phi(res, phi.as_mut_ptr(), 3) };
    assert_eq!(status, DsageStatus::DsageStatusOk);

    // The same estimate computed through the library directly.
    let data = Dataset::load_csv(Path::new(path.to_str().unwrap()))
        .unwrap()
        .with_target("D")
        .unwrap();
    let fidx = data.feature_indices().unwrap();
    let model = fit_ols(&data).unwrap();
    let gm = fit_gaussian(&data.select_columns(&fidx).unwrap()).unwrap();
    let mut cfg = EstimatorConfig::new(25, 99);
    cfg.min_permutations = 10;
    cfg.m_conditional_draws = 4;
    let direct = sage_estimate(&data, &model, &gm, &cfg).unwrap();
    for j in 0..3 {
        assert_eq!(phi[j].to_bits(), direct.phi[j].to_bits(), "phi[{j}] differs");
    }
    assert_eq!(dsage_result_converged(res), direct.converged);
    assert_eq!(dsage_result_skip_fraction(res), 0.0);

    let label = dsage_result_feature_label(res, 0);
    assert_eq!(unsafe { CStr::from_ptr(label) }.to_str().unwrap(), "A");
    let json = dsage_result_to_json(res);
    let parsed: serde_json::Value =
        serde_json::from_str(unsafe { CStr::from_ptr(json) }.to_str().unwrap()).unwrap();
    assert_eq!(parsed["phi"].as_array().unwrap().len(), 3);
    unsafe {
        dsage_string_free(label);
        dsage_string_free(json);
        dsage_result_free(res);
        dsage_dataset_free(ds);
    }
}

#[test]
fn invalid_inputs_map_to_distinct_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let path = chain_csv(dir.path(), 60);
    let ds = unsafe { dsage_dataset_load_csv(path.as_ptr()) };
    let mut res: *mut DsageResult = ptr::null_mut();

    let status =
        unsafe { dsage_run(ds, ptr::null(), ptr::null(), 25, 10, 0.025, 4, 1, &mut res) };
    assert_eq!(status, DsageStatus::DsageStatusNullArgument);

    let not_utf8 = CString::new(vec![0xffu8, 0xfe]).unwrap();
    let status = unsafe {
        dsage_run(ds, not_utf8.as_ptr(), ptr::null(), 25, 10, 0.025, 4, 1, &mut res)
    };
    assert_eq!(status, DsageStatus::DsageStatusInvalidString);

    let absent = c("NO_SUCH");
    let status = unsafe {
        dsage_run(ds, absent.as_ptr(), ptr::null(), 25, 10, 0.025, 4, 1, &mut res)
    };
    assert_eq!(status, DsageStatus::DsageStatusInvalidInput);
    assert!(last_error().contains("NO_SUCH"));

    // A graph that does not cover the variables is rejected the same way.
    let text = c("# nodes: P,Q\nP,Q\n");
    let wrong_graph = unsafe { dsage_dag_from_edge_list(text.as_ptr()) };
    let target = c("D");
    let status = unsafe {
        dsage_run(ds, target.as_ptr(), wrong_graph, 25, 10, 0.025, 4, 1, &mut res)
    };
    assert_eq!(status, DsageStatus::DsageStatusInvalidInput);

    // Estimation succeeds, then the phi buffer length is enforced.
    let status = unsafe {
        dsage_run(ds, target.as_ptr(), ptr::null(), 25, 10, 0.025, 4, 1, &mut res)
    };
    assert_eq!(status, DsageStatus::DsageStatusOk);
    let mut small = [0.0f64; 2];
    let status = unsafe { dsage_result_phi(res, small.as_mut_ptr(), 2) };
    assert_eq!(status, DsageStatus::DsageStatusInvalidInput);

    assert_eq!(dsage_result_n_features(ptr::null()), -1);
    assert!(dsage_result_skip_fraction(ptr::null()).is_nan());
    assert!(!dsage_result_converged(ptr::null()));
    assert!(dsage_result_feature_label(res, 99).is_null());
    unsafe {
        dsage_dag_free(wrong_graph);
        dsage_result_free(res);
        dsage_dataset_free(ds);
    }
}

const C_SMOKE: &str = r##"
#include <stdio.h>
#include <string.h>
#include "dsage.h"

int main(int argc, char **argv) {
    if (argc < 2) return 10;
    if (strcmp(dsage_version(), "") == 0) return 11;

    DsageDataset *ds = dsage_dataset_load_csv(argv[1]);
    if (!ds) { fprintf(stderr, "%s\n", dsage_last_error()); return 12; }
    if (dsage_dataset_n_cols(ds) != 4) return 13;

    DsageDag *dag = dsage_dag_from_edge_list("# nodes: A,B,C,D\nA,B\nB,C\nC,D\n");
    if (!dag) return 14;
    bool sep = false;
    uint64_t cond[1] = {1};
    if (dsage_dag_d_separated(dag, 0, 2, cond, 1, &sep) != DsageStatusOk) return 15;
    if (!sep) return 16;

    DsageResult *res = NULL;
    DsageStatus st = dsage_run(ds, "D", dag, 25, 10, 0.025, 4, 99, &res);
    if (st != DsageStatusOk) { fprintf(stderr, "%s\n", dsage_last_error()); return 17; }
    int64_t nf = dsage_result_n_features(res);
    if (nf != 3) return 18;
    double phi[3];
    if (dsage_result_phi(res, phi, 3) != DsageStatusOk) return 19;
    printf("phi %.17g %.17g %.17g\n", phi[0], phi[1], phi[2]);
    printf("skip %.17g\n", dsage_result_skip_fraction(res));

    dsage_result_free(res);
    dsage_dag_free(dag);
    dsage_dataset_free(ds);
    return 0;
}
"##;

#[test]
fn c_program_links_against_header_and_static_library() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let include_dir = manifest.join("include");
    let lib = manifest.join("../../target/debug/libdsage_ffi.a");
    assert!(lib.exists(), "static library not found at {}", lib.display());

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(&src, C_SMOKE).unwrap();
    let exe = dir.path().join("smoke");
    let compile = std::process::Command::new("cc")
        .arg(&src)
        .arg(&lib)
        .arg(format!("-I{}", include_dir.display()))
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .output()
        .expect("failed to spawn cc");
    assert!(
        compile.status.success(),
        "compile failed: {}",
        String::from_utf8_lossy(&compile.stderr)
    );

    let data = chain_csv(dir.path(), 400);
    let run = std::process::Command::new(&exe)
        .arg(data.to_str().unwrap())
        .output()
        .expect("failed to run smoke binary");
    assert!(
        run.status.success(),
        "smoke binary exited with {:?}: {}",
        run.status.code(),
        String::from_utf8_lossy(&run.stderr)
    );
    let stdout = String::from_utf8(run.stdout).unwrap();

    // The C route must land on the exact same numbers as the Rust route.
    let data = Dataset::load_csv(dir.path().join("chain.csv").as_path())
        .unwrap()
        .with_target("D")
        .unwrap();
    let fidx = data.feature_indices().unwrap();
    let model = fit_ols(&data).unwrap();
    let gm = fit_gaussian(&data.select_columns(&fidx).unwrap()).unwrap();
    let mut cfg = EstimatorConfig::new(25, 99);
    cfg.min_permutations = 10;
    cfg.m_conditional_draws = 4;
    let chain = Dag::new(
        vec!["A".into(), "B".into(), "C".into(), "D".into()],
        [(0, 1), (1, 2), (2, 3)],
    )
    .unwrap();
    let direct =
        dsage::sage::dsage_estimate(&data, &model, &gm, &cfg.with_graph(chain)).unwrap();

    let phi_line = stdout.lines().find(|l| l.starts_with("phi ")).expect("phi line");
    let got: Vec<f64> =
        phi_line[4..].split_whitespace().map(|t| t.parse().unwrap()).collect();
    assert_eq!(got.len(), 3);
    for j in 0..3 {
        assert_eq!(got[j].to_bits(), direct.phi[j].to_bits(), "phi[{j}] differs via C");
    }
    let skip_line = stdout.lines().find(|l| l.starts_with("skip ")).expect("skip line");
    let skip: f64 = skip_line[5..].trim().parse().unwrap();
    assert_eq!(skip, direct.skip_fraction());
}
