//! End-to-end checks of the command-line binary: every subcommand is run as
//! a real child process and judged by its exit code and the files it leaves
//! behind. Timing fields are the only tolerated difference between reruns.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dsage::citest::batch_decisions_csv;
use dsage::dag::Dag;
use dsage::gaussian::GaussianModel;
use dsage::model::fit_ols;
use dsage::sage::{exact_sage, DEFAULT_EXACT_CAP};
use dsage::scm::{Dataset, LinearGaussianScm};
use nalgebra::DVector;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dsage"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("failed to spawn dsage binary")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "dsage {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str]) -> i32 {
    run(args).status.code().expect("process terminated by signal")
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

/// Drops every object key that carries wall-clock measurements, recursively,
/// so reruns can be compared on their numerical content alone. The saving
/// ratio is derived from two wall times, hence equally run-dependent.
fn strip_times(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.retain(|k, _| !k.contains("time") && k != "saving_ratio");
            for child in map.values_mut() {
                strip_times(child);
            }
        }
        serde_json::Value::Array(items) => {
            for child in items {
                strip_times(child);
            }
        }
        _ => {}
    }
}

fn json_without_times(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(&read(path)).unwrap();
    strip_times(&mut v);
    v
}

#[test]
fn generate_is_reproducible_and_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        run_ok(&[
            "--seed", "42",
            "generate",
            "--nodes", "6",
            "--avg-degree", "2",
            "--n", "500",
            "--out", out.to_str().unwrap(),
        ]);
    }
    for name in ["dataset.csv", "scm.json", "true_graph.json", "true_graph.edges"] {
        assert_eq!(read(&a.join(name)), read(&b.join(name)), "{name} differs across reruns");
    }
    let data = Dataset::load_csv(&a.join("dataset.csv")).unwrap();
    assert_eq!(data.n_rows(), 500);
    assert_eq!(data.n_cols(), 6);
    let dag = Dag::from_json_str(&read(&a.join("true_graph.json"))).unwrap();
    assert_eq!(dag.node_count(), 6);
}

#[test]
fn generate_zero_degree_yields_empty_edge_file() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "--seed", "1",
        "generate",
        "--nodes", "5",
        "--avg-degree", "0",
        "--n", "10",
        "--out", dir.path().to_str().unwrap(),
    ]);
    let dag = Dag::from_json_str(&read(&dir.path().join("true_graph.json"))).unwrap();
    assert_eq!(dag.edge_count(), 0);
    // Edge-list file is the node header line and nothing else.
    let text = read(&dir.path().join("true_graph.edges"));
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with('#'));
}

#[test]
fn generate_mean_edge_count_tracks_requested_degree() {
    // At 10 nodes and average degree 2 the expected edge count is
    // 2 * 10 / 2 = 10; the mean over 100 seeds settles well inside +-0.5.
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("g");
    let mut total = 0usize;
    for seed in 0..100u32 {
        run_ok(&[
            "--seed", &seed.to_string(),
            "generate",
            "--nodes", "10",
            "--avg-degree", "2",
            "--n", "2",
            "--out", out.to_str().unwrap(),
        ]);
        let dag = Dag::from_json_str(&read(&out.join("true_graph.json"))).unwrap();
        total += dag.edge_count();
    }
    let mean = total as f64 / 100.0;
    assert!((mean - 10.0).abs() <= 0.5, "mean edge count {mean} outside 10 +- 0.5");
}

fn chain_dataset(dir: &Path) -> std::path::PathBuf {
    let dag = Dag::new(
        vec!["X1".into(), "X2".into(), "X3".into(), "X4".into()],
        [(0, 1), (1, 2), (2, 3)],
    )
    .unwrap();
    let weights = [(0usize, 1usize), (1, 2), (2, 3)]
        .into_iter()
        .map(|e| (e, 0.9))
        .collect();
    let scm = LinearGaussianScm::standardized(dag, weights, 0.05).unwrap();
    let path = dir.join("chain.csv");
    scm.sample(20_000, 7).save_csv(&path).unwrap();
    path
}

#[test]
fn learn_is_deterministic_and_recovers_chain_skeleton() {
    let dir = tempfile::tempdir().unwrap();
    let data = chain_dataset(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (out, algo) in [(&a, "tabu"), (&b, "tabu")] {
        run_ok(&[
            "learn",
            "--data", data.to_str().unwrap(),
            "--algorithm", algo,
            "--out", out.to_str().unwrap(),
        ]);
    }
    assert_eq!(
        read(&a.join("learned_graph.json")),
        read(&b.join("learned_graph.json")),
        "learned graph differs across reruns"
    );

    for algo in ["hc", "tabu"] {
        let out = dir.path().join(format!("skel_{algo}"));
        run_ok(&[
            "learn",
            "--data", data.to_str().unwrap(),
            "--algorithm", algo,
            "--out", out.to_str().unwrap(),
        ]);
        let dag = Dag::from_json_str(&read(&out.join("learned_graph.json"))).unwrap();
        let skeleton: BTreeSet<(String, String)> = dag
            .edges()
            .map(|(p, c)| {
                let (lo, hi) = if dag.labels()[p] < dag.labels()[c] { (p, c) } else { (c, p) };
                (dag.labels()[lo].clone(), dag.labels()[hi].clone())
            })
            .collect();
        let expected: BTreeSet<(String, String)> = [("X1", "X2"), ("X2", "X3"), ("X3", "X4")]
            .into_iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        assert_eq!(skeleton, expected, "{algo} did not recover the chain skeleton");
    }
}

#[test]
fn learn_rejects_unknown_algorithm_with_usage_exit() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    fs::write(&data, "a,b\n1.0,2.0\n").unwrap();
    assert_eq!(
        exit_code(&["learn", "--data", data.to_str().unwrap(), "--algorithm", "bogus"]),
        2
    );
    // Unknown flags are rejected the same way.
    assert_eq!(exit_code(&["generate", "--nodes", "4", "--bogus-flag", "1"]), 2);
}

fn generated_data(dir: &Path, seed: &str, nodes: &str, n: &str) -> std::path::PathBuf {
    let out = dir.join(format!("gen{seed}"));
    run_ok(&[
        "--seed", seed,
        "generate",
        "--nodes", nodes,
        "--avg-degree", "1.5",
        "--n", n,
        "--out", out.to_str().unwrap(),
    ]);
    out.join("dataset.csv")
}

#[test]
fn sage_with_separation_free_graph_matches_plain_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = generated_data(dir.path(), "5", "4", "800");
    // A complete DAG over all four variables certifies no separation, so
    // the assisted run must reproduce the plain run exactly.
    let labels: Vec<String> = (1..=4).map(|i| format!("X{i}")).collect();
    let mut edges = Vec::new();
    for i in 0..4 {
        for j in (i + 1)..4 {
            edges.push((i, j));
        }
    }
    let complete = Dag::new(labels, edges).unwrap();
    let graph_path = dir.path().join("complete.edges");
    fs::write(&graph_path, complete.to_edge_list_text()).unwrap();

    let plain = dir.path().join("plain");
    let assisted = dir.path().join("assisted");
    let mut base = vec![
        "--seed", "9",
        "sage",
        "--data", data.to_str().unwrap(),
        "--target", "X1",
        "--reps", "2",
        "--m", "5",
        "--max-perms", "30",
        "--min-perms", "10",
    ];
    run_ok(&[&base[..], &["--out", plain.to_str().unwrap()]].concat());
    base.extend_from_slice(&["--graph", graph_path.to_str().unwrap()]);
    run_ok(&[&base[..], &["--out", assisted.to_str().unwrap()]].concat());

    for rep in 0..2 {
        let name = format!("deltas_rep{rep}.csv");
        assert_eq!(read(&plain.join(&name)), read(&assisted.join(&name)), "{name} differs");
        let a: serde_json::Value =
            serde_json::from_str(&read(&plain.join(format!("sage_rep{rep}.json")))).unwrap();
        let b: serde_json::Value =
            serde_json::from_str(&read(&assisted.join(format!("sage_rep{rep}.json")))).unwrap();
        assert_eq!(a["phi"], b["phi"]);
        assert_eq!(a["delta_history"], b["delta_history"]);
        assert_eq!(b["evaluations_skipped"], serde_json::json!(0));
    }
    assert_eq!(
        json_without_times(&plain.join("sage_summary.json"))["phi_mean"],
        json_without_times(&assisted.join("sage_summary.json"))["phi_mean"]
    );
}

#[test]
fn sage_missing_target_column_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = generated_data(dir.path(), "6", "4", "50");
    let code = exit_code(&[
        "sage",
        "--data", data.to_str().unwrap(),
        "--target", "NO_SUCH_COLUMN",
        "--out", dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn sage_output_is_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = generated_data(dir.path(), "8", "4", "600");
    let one = dir.path().join("one");
    let three = dir.path().join("three");
    for (threads, out) in [("1", &one), ("3", &three)] {
        run_ok(&[
            "--seed", "13",
            "--threads", threads,
            "sage",
            "--data", data.to_str().unwrap(),
            "--target", "X1",
            "--reps", "1",
            "--m", "4",
            "--max-perms", "25",
            "--min-perms", "10",
            "--out", out.to_str().unwrap(),
        ]);
    }
    assert_eq!(read(&one.join("deltas_rep0.csv")), read(&three.join("deltas_rep0.csv")));
    assert_eq!(
        json_without_times(&one.join("sage_rep0.json")),
        json_without_times(&three.join("sage_rep0.json"))
    );
}

#[test]
fn sage_csv_format_writes_csv_summary() {
    let dir = tempfile::tempdir().unwrap();
    let data = generated_data(dir.path(), "14", "4", "120");
    let out = dir.path().join("csv_out");
    run_ok(&[
        "--seed", "2",
        "--format", "csv",
        "sage",
        "--data", data.to_str().unwrap(),
        "--target", "X1",
        "--reps", "1",
        "--m", "3",
        "--max-perms", "20",
        "--min-perms", "10",
        "--out", out.to_str().unwrap(),
    ]);
    let text = read(&out.join("sage_summary.csv"));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("feature,phi_mean,phi_sd_between_reps"));
    assert_eq!(lines.count(), 3, "one row per feature");
}

const MINI_SPEC: &str = "node_counts = [4]\n\
avg_degrees = [1.5]\n\
seeds = [11]\n\
n_samples = 1200\n\
repetitions = 2\n\
n_permutations = 20\n\
min_permutations = 10\n\
n_mc_dsep = 2000\n\
runtime_permutations = 20\n";

#[test]
fn bench_minimal_spec_reruns_with_identical_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.toml");
    fs::write(&spec, MINI_SPEC).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        run_ok(&["bench", "--spec", spec.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    }
    let cell = "d4_deg1.5_seed11";
    // The audit CSV carries no timing at all, so bytes must match.
    assert_eq!(
        read(&a.join(cell).join("skipped_audit.csv")),
        read(&b.join(cell).join("skipped_audit.csv"))
    );
    assert_eq!(read(&a.join("experiment.json")), read(&b.join("experiment.json")));
    for name in ["summary.json", "dsep_eval.json", "sage_pair.json", "runtime.json"] {
        assert_eq!(
            json_without_times(&a.join(cell).join(name)),
            json_without_times(&b.join(cell).join(name)),
            "{name} differs beyond timing fields"
        );
    }
    let summary: serde_json::Value =
        serde_json::from_str(&read(&a.join(cell).join("summary.json"))).unwrap();
    assert!(summary["phi_dsage_mean"].is_array());
}

#[test]
fn bench_malformed_spec_is_usage_error_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.toml");
    fs::write(&spec, "node_counts = [4]\nnot_a_real_knob = 3\n").unwrap();
    let out = run(&["bench", "--spec", spec.to_str().unwrap(), "--out",
        dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error"), "expected a validation message, got: {stderr}");
}

#[test]
fn sage_estimate_tracks_closed_form_on_small_chain() {
    // Medium couplings keep the per-permutation spread small enough that
    // 300 permutations put the 0.05 tolerance several standard errors out.
    let dir = tempfile::tempdir().unwrap();
    let dag = Dag::new(
        vec!["X1".into(), "X2".into(), "X3".into(), "X4".into()],
        [(0, 1), (1, 2), (2, 3)],
    )
    .unwrap();
    let weights = [(0usize, 1usize), (1, 2), (2, 3)].into_iter().map(|e| (e, 0.6)).collect();
    let scm = LinearGaussianScm::standardized(dag, weights, 0.05).unwrap();
    let data_path = dir.path().join("chain.csv");
    let sample = scm.sample(4_000, 11);
    sample.save_csv(&data_path).unwrap();

    let out = dir.path().join("est");
    run_ok(&[
        "--seed", "3",
        "sage",
        "--data", data_path.to_str().unwrap(),
        "--target", "X4",
        "--reps", "1",
        "--m", "20",
        "--max-perms", "300",
        "--min-perms", "300",
        "--out", out.to_str().unwrap(),
    ]);
    let summary: serde_json::Value =
        serde_json::from_str(&read(&out.join("sage_summary.json"))).unwrap();
    let phi: Vec<f64> = summary["phi_mean"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();

    let model = fit_ols(&sample.with_target("X4").unwrap()).unwrap();
    let gm = GaussianModel::from_moments(
        scm.dag().labels().to_vec(),
        DVector::zeros(4),
        scm.implied_covariance(),
    )
    .unwrap();
    let exact = exact_sage(&gm, &model, "X4", DEFAULT_EXACT_CAP).unwrap();
    assert_eq!(phi.len(), exact.len());
    for (j, (a, b)) in phi.iter().zip(exact.iter()).enumerate() {
        assert!(
            (a - b).abs() <= 0.05,
            "feature {j}: estimate {a:.4} vs closed form {b:.4}"
        );
    }
}

#[test]
fn citest_batch_matches_library_route() {
    let dir = tempfile::tempdir().unwrap();
    let data_path = generated_data(dir.path(), "21", "5", "400");
    let queries_path = dir.path().join("queries.txt");
    fs::write(&queries_path, "# pairs with optional conditioning columns\n0,1\n0,2,1\n1,4,0,2\n")
        .unwrap();
    let out = dir.path().join("ci");
    run_ok(&[
        "citest",
        "--data", data_path.to_str().unwrap(),
        "--queries", queries_path.to_str().unwrap(),
        "--alpha", "0.05",
        "--out", out.to_str().unwrap(),
    ]);
    let got = read(&out.join("ci_decisions.csv"));
    let data = Dataset::load_csv(&data_path).unwrap();
    let queries = vec![(0, 1, vec![]), (0, 2, vec![1]), (1, 4, vec![0, 2])];
    let expected = batch_decisions_csv(&data, &queries, 0.05).unwrap();
    assert_eq!(got, expected);
}
