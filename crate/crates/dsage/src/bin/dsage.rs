//! Single-binary pipeline driver: synthetic data generation, structure
//! learning, importance estimation with optional graph-certified skipping,
//! experiment grids, and batch independence tests. Every output file is
//! written atomically, and all randomized stages derive from `--seed`, so
//! reruns with identical inputs and flags reproduce identical files up to
//! wall-time fields.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use dsage::bench::{run_experiment, ExperimentSpec};
use dsage::citest::{batch_decisions_csv, parse_query_lines, DEFAULT_ALPHA};
use dsage::csl::{learn_structure, SearchConfig};
use dsage::dag::Dag;
use dsage::gaussian::fit_gaussian;
use dsage::io::write_atomic_str;
use dsage::model::fit_ols;
use dsage::sage::{dsage_estimate, sage_estimate, EstimatorConfig, SageResult};
use dsage::scm::{random_dag, Dataset, LinearGaussianScm};
use dsage::seed::{derive_seed, derive_seed_indexed};
use dsage::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dsage",
    version,
    about = "Global feature importance with graph-certified skipping",
    propagate_version = true
)]
struct Cli {
    /// Master seed every randomized stage derives from.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Directory output files are written into (created if missing).
    #[arg(long, global = true, default_value = ".")]
    output_dir: PathBuf,

    /// Format of aggregate summaries (full results are always JSON).
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Json)]
    format: OutputFormat,

    /// Worker threads for row-parallel evaluation; 0 means one per core.
    /// Numerical outputs are identical for every setting.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Log filter (error, warn, info, debug, trace). Falls back to the
    /// RUST_LOG environment variable, then to "warn".
    #[arg(long, global = true)]
    log_level: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Algorithm {
    Hc,
    Tabu,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a random DAG and standardized linear-Gaussian system, then
    /// write dataset.csv, scm.json, true_graph.json, and true_graph.edges.
    Generate {
        /// Number of variables (features plus target candidates).
        #[arg(long)]
        nodes: usize,
        /// Expected edges per node; 0 gives an empty graph.
        #[arg(long, default_value_t = 2.0)]
        avg_degree: f64,
        /// Rows to sample.
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        /// Smallest edge-weight magnitude.
        #[arg(long, default_value_t = 0.5)]
        w_min: f64,
        /// Largest edge-weight magnitude.
        #[arg(long, default_value_t = 2.0)]
        w_max: f64,
        /// Write into this directory instead of --output-dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Learn a graph over all columns of a CSV dataset by greedy
    /// score-based search; writes learned_graph.json, learned_graph.edges,
    /// and search_report.json.
    Learn {
        /// Input dataset (CSV with a header row).
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Algorithm::Tabu)]
        algorithm: Algorithm,
        /// Cap on parents per node.
        #[arg(long)]
        max_in_degree: Option<usize>,
        /// Write into this directory instead of --output-dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate global feature importance for an OLS model fitted on the
    /// data, marginalizing held-out features with Gaussian moments fitted
    /// on the same data. With --graph, positions the graph certifies as
    /// zero are skipped. Writes sage_rep<r>.json and deltas_rep<r>.csv per
    /// repetition plus an aggregate summary.
    Sage {
        /// Input dataset (CSV with a header row).
        #[arg(long)]
        data: PathBuf,
        /// Column to attribute importance against.
        #[arg(long)]
        target: String,
        /// Graph file (.json or edge-list text) covering the features and
        /// the target; enables skipping.
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Independent repetitions with derived seeds.
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Conditional completions per marginalized prediction.
        #[arg(long, default_value_t = 10)]
        m: usize,
        /// Convergence threshold on standard errors.
        #[arg(long, default_value_t = 0.025)]
        t: f64,
        /// Permutation budget per run.
        #[arg(long, default_value_t = 100)]
        max_perms: usize,
        /// Permutations before convergence checks begin.
        #[arg(long, default_value_t = 20)]
        min_perms: usize,
        /// Write into this directory instead of --output-dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a full experiment grid from a TOML or JSON spec file into the
    /// output directory (one subdirectory of reports per cell).
    Bench {
        /// Spec file path (.toml or .json).
        #[arg(long)]
        spec: PathBuf,
        /// Write into this directory instead of --output-dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Batch Fisher-z conditional-independence decisions; writes
    /// ci_decisions.csv with one row per query.
    Citest {
        /// Input dataset (CSV with a header row).
        #[arg(long)]
        data: PathBuf,
        /// Query file: one `i,j[,s1,s2,...]` line of column indices per
        /// test; `#` starts a comment.
        #[arg(long)]
        queries: PathBuf,
        /// Significance level.
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        /// Write into this directory instead of --output-dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.log_level.as_deref());
    if cli.threads > 0 {
        // Ignore failure: the pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn init_logging(level: Option<&str>) {
    let mut builder = env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or("warn"),
    );
    if let Some(filter) = level {
        builder.parse_filters(filter);
    }
    let _ = builder.try_init();
}

/// 2 for rejected inputs or configuration, 1 for failures at run time.
fn exit_code_for(e: &Error) -> u8 {
    if e.is_invalid_input() {
        2
    } else {
        1
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate { nodes, avg_degree, n, w_min, w_max, out } => {
            let dir = prepare_dir(cli, out)?;
            cmd_generate(cli.seed, *nodes, *avg_degree, *n, *w_min, *w_max, &dir)
        }
        Command::Learn { data, algorithm, max_in_degree, out } => {
            let dir = prepare_dir(cli, out)?;
            cmd_learn(data, *algorithm, *max_in_degree, &dir)
        }
        Command::Sage { data, target, graph, reps, m, t, max_perms, min_perms, out } => {
            let dir = prepare_dir(cli, out)?;
            let params = SageParams {
                seed: cli.seed,
                reps: *reps,
                m: *m,
                t: *t,
                max_perms: *max_perms,
                min_perms: *min_perms,
                format: cli.format,
            };
            cmd_sage(data, target, graph.as_deref(), &params, &dir)
        }
        Command::Bench { spec, out } => {
            let dir = prepare_dir(cli, out)?;
            cmd_bench(spec, &dir)
        }
        Command::Citest { data, queries, alpha, out } => {
            let dir = prepare_dir(cli, out)?;
            cmd_citest(data, queries, *alpha, &dir)
        }
    }
}

fn prepare_dir(cli: &Cli, out: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = out.clone().unwrap_or_else(|| cli.output_dir.clone());
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn cmd_generate(
    seed: u64,
    nodes: usize,
    avg_degree: f64,
    n: usize,
    w_min: f64,
    w_max: f64,
    dir: &Path,
) -> Result<()> {
    let dag = random_dag(nodes, avg_degree, derive_seed(seed, "dag"))?;
    log::info!("sampled graph: {} nodes, {} edges", dag.node_count(), dag.edge_count());
    let scm =
        LinearGaussianScm::random(dag.clone(), w_min, w_max, derive_seed(seed, "scm"))?;
    let data = scm.sample(n, derive_seed(seed, "sample"));
    data.save_csv(&dir.join("dataset.csv"))?;
    write_atomic_str(&dir.join("scm.json"), &scm.to_json_string()?)?;
    write_atomic_str(&dir.join("true_graph.json"), &dag.to_json_string()?)?;
    write_atomic_str(&dir.join("true_graph.edges"), &dag.to_edge_list_text())?;
    println!(
        "wrote dataset.csv ({n} rows), scm.json, true_graph.json, true_graph.edges to {}",
        dir.display()
    );
    Ok(())
}

fn cmd_learn(
    data_path: &Path,
    algorithm: Algorithm,
    max_in_degree: Option<usize>,
    dir: &Path,
) -> Result<()> {
    let data = Dataset::load_csv(data_path)?;
    let mut config = match algorithm {
        Algorithm::Hc => SearchConfig::hill_climb(),
        Algorithm::Tabu => SearchConfig::tabu(),
    };
    config.max_in_degree = max_in_degree;
    let learned = learn_structure(&data, &config)?;
    log::info!(
        "search finished: {} iterations, score {:.4}",
        learned.report.iterations,
        learned.report.final_score
    );
    write_atomic_str(&dir.join("learned_graph.json"), &learned.dag.to_json_string()?)?;
    write_atomic_str(&dir.join("learned_graph.edges"), &learned.dag.to_edge_list_text())?;
    write_atomic_str(&dir.join("search_report.json"), &learned.report.to_json_string()?)?;
    println!(
        "learned {} edges over {} nodes; wrote learned_graph.json, learned_graph.edges, search_report.json to {}",
        learned.dag.edge_count(),
        learned.dag.node_count(),
        dir.display()
    );
    Ok(())
}

struct SageParams {
    seed: u64,
    reps: usize,
    m: usize,
    t: f64,
    max_perms: usize,
    min_perms: usize,
    format: OutputFormat,
}

fn load_graph(path: &Path) -> Result<Dag> {
    let text = fs::read_to_string(path)?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => Dag::from_json_str(&text),
        _ => Dag::from_edge_list_text(&text),
    }
}

fn cmd_sage(
    data_path: &Path,
    target: &str,
    graph_path: Option<&Path>,
    params: &SageParams,
    dir: &Path,
) -> Result<()> {
    if params.reps == 0 {
        return Err(Error::InvalidConfig("--reps must be >= 1".into()));
    }
    let data = Dataset::load_csv(data_path)?.with_target(target)?;
    let fidx = data.feature_indices()?;
    let model = fit_ols(&data)?;
    let gm = fit_gaussian(&data.select_columns(&fidx)?)?;
    let graph = graph_path.map(load_graph).transpose()?;

    let mut results: Vec<SageResult> = Vec::with_capacity(params.reps);
    for rep in 0..params.reps {
        let est_seed = derive_seed_indexed(params.seed, "rep", rep as u64);
        let cfg = EstimatorConfig {
            n_permutations_max: params.max_perms,
            min_permutations: params.min_perms.min(params.max_perms),
            convergence_threshold: params.t,
            m_conditional_draws: params.m,
            ..EstimatorConfig::new(params.max_perms, est_seed)
        };
        let res = match &graph {
            Some(g) => dsage_estimate(&data, &model, &gm, &cfg.with_graph(g.clone()))?,
            None => sage_estimate(&data, &model, &gm, &cfg)?,
        };
        log::info!(
            "rep {rep}: {} permutations, {} of {} positions skipped",
            res.n_permutations_used,
            res.evaluations_skipped,
            res.evaluations_total
        );
        write_atomic_str(&dir.join(format!("sage_rep{rep}.json")), &res.to_json_string()?)?;
        write_atomic_str(
            &dir.join(format!("deltas_rep{rep}.csv")),
            &res.deltas_csv_string()?,
        )?;
        results.push(res);
    }

    let labels = results[0].feature_labels.clone();
    let nf = labels.len();
    let reps_f = params.reps as f64;
    let phi_mean: Vec<f64> = (0..nf)
        .map(|j| results.iter().map(|r| r.phi[j]).sum::<f64>() / reps_f)
        .collect();
    let phi_sd: Vec<f64> = (0..nf)
        .map(|j| {
            if params.reps < 2 {
                0.0
            } else {
                let v = results
                    .iter()
                    .map(|r| (r.phi[j] - phi_mean[j]) * (r.phi[j] - phi_mean[j]))
                    .sum::<f64>()
                    / (reps_f - 1.0);
                v.sqrt()
            }
        })
        .collect();
    match params.format {
        OutputFormat::Json => {
            let summary = serde_json::json!({
                "feature_labels": labels,
                "phi_mean": phi_mean,
                "phi_sd_between_reps": phi_sd,
                "phi_per_rep": results.iter().map(|r| &r.phi).collect::<Vec<_>>(),
                "skip_fraction_per_rep":
                    results.iter().map(|r| r.skip_fraction()).collect::<Vec<_>>(),
                "converged_per_rep":
                    results.iter().map(|r| r.converged).collect::<Vec<_>>(),
                "reps": params.reps,
                "seed": params.seed,
                "graph_assisted": graph.is_some(),
            });
            write_atomic_str(
                &dir.join("sage_summary.json"),
                &serde_json::to_string_pretty(&summary)?,
            )?;
            println!("wrote per-rep results and sage_summary.json to {}", dir.display());
        }
        OutputFormat::Csv => {
            let mut text = String::from("feature,phi_mean,phi_sd_between_reps\n");
            for j in 0..nf {
                text.push_str(&format!("{},{:e},{:e}\n", labels[j], phi_mean[j], phi_sd[j]));
            }
            write_atomic_str(&dir.join("sage_summary.csv"), &text)?;
            println!("wrote per-rep results and sage_summary.csv to {}", dir.display());
        }
    }
    Ok(())
}

fn cmd_bench(spec_path: &Path, dir: &Path) -> Result<()> {
    let spec = ExperimentSpec::load(spec_path)?;
    let outcome = run_experiment(&spec, dir)?;
    let failed: Vec<_> = outcome.cells.iter().filter(|c| !c.ok).collect();
    for cell in &failed {
        log::warn!(
            "cell {} failed: {}",
            cell.cell,
            cell.error.as_deref().unwrap_or("unknown")
        );
    }
    println!(
        "experiment finished: {} of {} cells succeeded; reports in {}",
        outcome.cells.len() - failed.len(),
        outcome.cells.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_citest(data_path: &Path, queries_path: &Path, alpha: f64, dir: &Path) -> Result<()> {
    let data = Dataset::load_csv(data_path)?;
    let text = fs::read_to_string(queries_path)?;
    let queries = parse_query_lines(&text)?;
    let csv = batch_decisions_csv(&data, &queries, alpha)?;
    write_atomic_str(&dir.join("ci_decisions.csv"), &csv)?;
    println!("wrote {} decisions to {}", queries.len(), dir.join("ci_decisions.csv").display());
    Ok(())
}
