//! Subcommand implementations. Computation happens first; all artifact
//! writes happen afterwards from this single thread.

use std::path::{Path, PathBuf};

use ndarray::Array1;
use serde_json::json;

use patrol::chain::{stationary_power, TransitionMatrix};
use patrol::defense::{co_optimize, greedy_defense, CoOptResult};
use patrol::graph::TargetDistribution;
use patrol::mc::{empirical_capture, simulate_hitting, SimConfig};
use patrol::objective::{
    j_mht, j_rte, j_sg, penalty_single, AttackDurations, Metric, ObjectiveSpec, PiMode,
};
use patrol::optimize::{multi_start, MultiStartResult, RunConfig, RunRecord};

use crate::format::{heatmap_svg, load_strategy, strategy_to_csv, write_file};
use crate::runspec::{parse_partition, OptimizeRequest};
use crate::{CliError, CliResult};

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Unwritable(format!("{}: {e}", dir.display())))
}

fn record_json(record: &RunRecord) -> serde_json::Value {
    json!({
        "seed": record.seed,
        "metric": record.metric,
        "penalty": record.penalty,
        "iterations": record.iterations,
        "wall_time_s": record.wall_time_s,
        "iterations_per_second": rate(record.iterations, record.wall_time_s),
        "history": record.history,
        "warnings": record.warnings,
        "error": record.error,
    })
}

fn rate(iterations: usize, wall_time_s: f64) -> f64 {
    if wall_time_s > 0.0 {
        iterations as f64 / wall_time_s
    } else {
        0.0
    }
}

fn records_jsonl(records: &[RunRecord]) -> String {
    let mut out = String::new();
    for record in records {
        out.push_str(&record_json(record).to_string());
        out.push('\n');
    }
    out
}

fn summary_json(
    metric: Metric,
    result: &MultiStartResult,
    config: &RunConfig,
    nodes: usize,
    strategy_files: &[String],
) -> serde_json::Value {
    let best = result.best_record();
    let ok: Vec<&RunRecord> = result.records.iter().filter(|r| r.succeeded()).collect();
    let mean = |f: &dyn Fn(&RunRecord) -> f64| -> f64 {
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
        }
    };
    json!({
        "metric": metric.as_str(),
        "nodes": nodes,
        "num_inits": config.num_inits,
        "seed": config.seed,
        "succeeded": ok.len(),
        "failed": result.records.len() - ok.len(),
        "best": {
            "seed": best.seed,
            "metric": best.metric,
            "penalty": best.penalty,
            "iterations": best.iterations,
            "wall_time_s": best.wall_time_s,
            "iterations_per_second": rate(best.iterations, best.wall_time_s),
        },
        "mean_metric": mean(&|r| r.metric),
        "mean_wall_time_s": mean(&|r| r.wall_time_s),
        "total_wall_time_s": result.records.iter().map(|r| r.wall_time_s).sum::<f64>(),
        "artifacts": {
            "strategies": strategy_files,
            "records": "records.jsonl",
        },
    })
}

/// Write the artifact set for one finished multi-start: per-robot strategy
/// CSVs (plus a manifest when there is more than one robot), run records,
/// and the metrics summary.
fn write_run_artifacts(
    dir: &Path,
    metric: Metric,
    result: &MultiStartResult,
    config: &RunConfig,
    labels: &[String],
    export_heatmap: bool,
) -> CliResult<Vec<String>> {
    ensure_dir(dir)?;
    let best = result.best_record();
    let robots = best.ps.len();
    let mut strategy_files = Vec::new();
    for (r, p) in best.ps.iter().enumerate() {
        let name = if robots == 1 {
            "strategy.csv".to_string()
        } else {
            format!("strategy_robot{}.csv", r + 1)
        };
        write_file(&dir.join(&name), &strategy_to_csv(p))?;
        if export_heatmap {
            let svg_name = name.replace(".csv", ".svg");
            write_file(&dir.join(&svg_name), &heatmap_svg(p.as_array(), Some(labels)))?;
        }
        strategy_files.push(name);
    }
    if robots > 1 {
        let manifest = json!({ "robots": robots, "strategies": strategy_files });
        write_file(
            &dir.join("manifest.json"),
            &format!("{:#}\n", manifest),
        )?;
    }
    write_file(&dir.join("records.jsonl"), &records_jsonl(&result.records))?;
    let nodes = best.ps.first().map_or(0, TransitionMatrix::node_count);
    let summary = summary_json(metric, result, config, nodes, &strategy_files);
    write_file(&dir.join("summary.json"), &format!("{:#}\n", summary))?;
    Ok(strategy_files)
}

/// `optimize`: multi-start optimization of one objective, or one per
/// partition when a partition is given.
pub fn cmd_optimize(request: OptimizeRequest, partition: Option<&str>) -> CliResult<()> {
    if let Some(text) = partition {
        return optimize_partitioned(request, text);
    }
    let OptimizeRequest {
        spec,
        config,
        out_dir,
        export_heatmap,
        labels,
        ..
    } = request;
    let result = multi_start(&spec, &config).map_err(CliError::from)?;
    let best = result.best_record();
    println!(
        "{}: best seed {} metric {} penalty {} ({} iterations, {:.2}s)",
        spec.metric.as_str(),
        best.seed,
        best.metric,
        best.penalty,
        best.iterations,
        best.wall_time_s
    );
    if let Some(dir) = out_dir {
        write_run_artifacts(&dir, spec.metric, &result, &config, &labels, export_heatmap)?;
        println!("artifacts written to {}", dir.display());
    }
    Ok(())
}

/// Per-partition single-robot optimizations: each group becomes an induced
/// subgraph with the target distribution restricted and renormalized.
fn optimize_partitioned(request: OptimizeRequest, partition: &str) -> CliResult<()> {
    let OptimizeRequest {
        spec,
        config,
        out_dir,
        export_heatmap,
        graph,
        target,
        ..
    } = request;
    if spec.metric == Metric::Sgm {
        return Err(CliError::Spec(
            "partitions run single-robot optimizations; use a single-robot metric".into(),
        ));
    }
    let groups = parse_partition(partition, &graph)?;
    let mut rows = Vec::new();
    for (index, nodes) in groups.iter().enumerate() {
        let sub = graph.induced_subgraph(nodes)?;
        let sub_labels = sub.labels().to_vec();
        let mut sub_spec = ObjectiveSpec::new(spec.metric, sub);
        sub_spec.eta = spec.eta;
        sub_spec.smoothing = spec.smoothing;
        sub_spec.pi_from_target = spec.pi_from_target;
        sub_spec.tau = match &spec.tau {
            Some(tau) if tau.len() == graph.node_count() => {
                let picked: Vec<u32> = nodes.iter().map(|&i| tau.durations()[i]).collect();
                Some(AttackDurations::new(picked)?)
            }
            other => other.clone(),
        };
        sub_spec.target = match &target {
            Some(t) => Some(t.restrict(nodes)?),
            None => None,
        };
        sub_spec.validate().map_err(CliError::from)?;

        let result = multi_start(&sub_spec, &config).map_err(CliError::from)?;
        let best = result.best_record();
        println!(
            "partition {} ({} nodes): best seed {} metric {} penalty {}",
            index + 1,
            nodes.len(),
            best.seed,
            best.metric,
            best.penalty
        );
        if let Some(dir) = &out_dir {
            let sub_dir = dir.join(format!("partition{}", index + 1));
            write_run_artifacts(
                &sub_dir,
                sub_spec.metric,
                &result,
                &config,
                &sub_labels,
                export_heatmap,
            )?;
        }
        rows.push(json!({
            "partition": index + 1,
            "nodes": nodes,
            "best_metric": best.metric,
            "best_penalty": best.penalty,
        }));
    }
    if let Some(dir) = &out_dir {
        let summary = json!({ "metric": spec.metric.as_str(), "partitions": rows });
        write_file(&dir.join("summary.json"), &format!("{:#}\n", summary))?;
        println!("artifacts written to {}", dir.display());
    }
    Ok(())
}

pub struct EvaluateArgs {
    pub graph: String,
    pub strategies: Vec<PathBuf>,
    pub tau: Option<String>,
    pub eta: f64,
    pub alpha: f64,
    pub target: Option<String>,
    pub json: bool,
}

/// `evaluate`: cross-metric table for each supplied strategy.
pub fn cmd_evaluate(args: EvaluateArgs) -> CliResult<()> {
    let (graph, builtin_target) = crate::runspec::load_graph(&args.graph)?;
    let n = graph.node_count();
    let w_int = graph.weights().clone();
    let w_f64 = graph.weights_f64();
    let tau = match &args.tau {
        Some(text) => Some(crate::runspec::parse_tau_text(text, n)?),
        None => None,
    };
    let target: Option<TargetDistribution> = match args.target.as_deref() {
        None | Some("none") => None,
        Some("crime") => Some(builtin_target.ok_or_else(|| {
            CliError::Spec("target `crime` is only available with builtin:sf".into())
        })?),
        Some("uniform") => Some(
            TargetDistribution::new(Array1::from_elem(n, 1.0 / n as f64)).expect("uniform"),
        ),
        Some(other) => {
            return Err(CliError::Spec(format!("unknown target `{other}`")));
        }
    };

    let mut results = Vec::new();
    for path in &args.strategies {
        let p = load_strategy(path)?;
        if p.node_count() != n {
            return Err(CliError::InvalidMatrix(format!(
                "{}: {} nodes, graph has {n}",
                path.display(),
                p.node_count()
            )));
        }
        let pi = stationary_power(&p, 100).into_array();
        let mht = j_mht(&p, &w_f64, PiMode::Computed { iters: 100 });
        let rte = j_rte(&p, &w_int, &pi, args.eta).map_err(CliError::from)?;
        let sg = match &tau {
            Some(tau) => Some(j_sg(&p, &w_int, tau, 1).map_err(CliError::from)?),
            None => None,
        };
        let penalty = target
            .as_ref()
            .map(|t| penalty_single(&p, t.as_array(), args.alpha));
        results.push(json!({
            "strategy": path.display().to_string(),
            "j_mht": mht.value,
            "j_rte": rte,
            "j_sg": sg,
            "penalty": penalty,
            "warnings": mht.warnings,
        }));
    }

    if args.json {
        println!("{}", json!({ "evaluations": results }));
    } else {
        println!(
            "{:<32} {:>16} {:>16} {:>16} {:>16}",
            "strategy", "J_MHT", "J_RTE", "J_SG", "penalty"
        );
        for row in &results {
            let fmt = |key: &str| -> String {
                match row.get(key) {
                    Some(serde_json::Value::Number(v)) => {
                        format!("{:.9e}", v.as_f64().unwrap_or(f64::NAN))
                    }
                    _ => "-".to_string(),
                }
            };
            println!(
                "{:<32} {:>16} {:>16} {:>16} {:>16}",
                row["strategy"].as_str().unwrap_or("?"),
                fmt("j_mht"),
                fmt("j_rte"),
                fmt("j_sg"),
                fmt("penalty")
            );
        }
    }
    Ok(())
}

pub struct GreedyArgs {
    pub graph: String,
    pub strategy: PathBuf,
    pub budget: u32,
    pub out: Option<PathBuf>,
}

/// `greedy`: defense placement for a fixed strategy.
pub fn cmd_greedy(args: GreedyArgs) -> CliResult<()> {
    let (graph, _) = crate::runspec::load_graph(&args.graph)?;
    let p = load_strategy(&args.strategy)?;
    if p.node_count() != graph.node_count() {
        return Err(CliError::InvalidMatrix(format!(
            "{}: {} nodes, graph has {}",
            args.strategy.display(),
            p.node_count(),
            graph.node_count()
        )));
    }
    let allocation =
        greedy_defense(&p, graph.weights(), args.budget).map_err(CliError::from)?;
    let min_capture = allocation
        .capture
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let report = json!({
        "budget": args.budget,
        "tau": allocation.tau.durations(),
        "min_capture": min_capture,
    });
    println!("{report:#}");
    if let Some(path) = &args.out {
        write_file(path, &format!("{report:#}\n"))?;
    }
    Ok(())
}

pub struct CooptArgs {
    pub request: OptimizeRequest,
    pub budget: u32,
}

/// `coopt`: alternate greedy defense placement with strategy optimization.
pub fn cmd_coopt(args: CooptArgs) -> CliResult<()> {
    let CooptArgs { request, budget } = args;
    let OptimizeRequest {
        spec,
        config,
        out_dir,
        export_heatmap,
        labels,
        ..
    } = request;
    let result: CoOptResult = co_optimize(&spec, budget, &config).map_err(CliError::from)?;
    println!(
        "coopt: metric {} penalty {} tau {:?} ({} rounds)",
        result.record.metric,
        result.record.penalty,
        result.tau.durations(),
        result.rounds.len()
    );
    if let Some(dir) = &out_dir {
        ensure_dir(dir)?;
        write_file(&dir.join("strategy.csv"), &strategy_to_csv(&result.strategy))?;
        if export_heatmap {
            write_file(
                &dir.join("strategy.svg"),
                &heatmap_svg(result.strategy.as_array(), Some(&labels)),
            )?;
        }
        let defense = json!({
            "budget": budget,
            "tau": result.tau.durations(),
            "metric": result.record.metric,
            "penalty": result.record.penalty,
            "rounds": result
                .rounds
                .iter()
                .map(|r| json!({ "tau": r.tau, "metric": r.metric, "penalty": r.penalty }))
                .collect::<Vec<_>>(),
        });
        write_file(&dir.join("defense.json"), &format!("{defense:#}\n"))?;
        write_file(
            &dir.join("records.jsonl"),
            &records_jsonl(std::slice::from_ref(&result.record)),
        )?;
        println!("artifacts written to {}", dir.display());
    }
    Ok(())
}

pub struct SimulateArgs {
    pub graph: String,
    pub strategies: Vec<PathBuf>,
    pub trials: u64,
    pub horizon: u64,
    pub seed: u64,
    pub weighted: bool,
    pub from: Option<String>,
    pub to: Option<String>,
    pub tau: Option<String>,
    pub out: Option<PathBuf>,
}

/// `simulate`: Monte Carlo estimates for hitting-time distributions or
/// capture probabilities, as a check against the closed-form numbers.
pub fn cmd_simulate(args: SimulateArgs) -> CliResult<()> {
    let (graph, _) = crate::runspec::load_graph(&args.graph)?;
    let n = graph.node_count();
    if args.strategies.is_empty() {
        return Err(CliError::Spec("at least one --strategy is required".into()));
    }
    let ps: Vec<TransitionMatrix> = args
        .strategies
        .iter()
        .map(|path| {
            let p = load_strategy(path)?;
            if p.node_count() != n {
                return Err(CliError::InvalidMatrix(format!(
                    "{}: {} nodes, graph has {n}",
                    path.display(),
                    p.node_count()
                )));
            }
            Ok(p)
        })
        .collect::<CliResult<_>>()?;
    let cfg = SimConfig {
        trials: args.trials,
        horizon: args.horizon,
        seed: args.seed,
        weighted: args.weighted,
    };

    let report = match (&args.from, &args.to, &args.tau) {
        (Some(from), Some(to), None) => {
            if ps.len() != 1 {
                return Err(CliError::Spec(
                    "hitting-time simulation takes exactly one strategy".into(),
                ));
            }
            let i = graph
                .resolve_node(from)
                .ok_or_else(|| CliError::Spec(format!("unknown node `{from}`")))?;
            let j = graph
                .resolve_node(to)
                .ok_or_else(|| CliError::Spec(format!("unknown node `{to}`")))?;
            let sample = simulate_hitting(&ps[0], graph.weights(), i, j, &cfg);
            json!({
                "mode": "hitting",
                "from": i,
                "to": j,
                "trials": cfg.trials,
                "frequencies": sample.freq,
                "standard_errors": sample.std_err,
                "censored_fraction": sample.censored,
            })
        }
        (None, None, Some(tau)) => {
            let tau = crate::runspec::parse_tau_text(tau, n)?;
            let ws = vec![graph.weights().clone(); ps.len()];
            let (estimates, std_errs) = empirical_capture(&ps, &ws, &tau, &cfg);
            json!({
                "mode": "capture",
                "robots": ps.len(),
                "trials": cfg.trials,
                "capture": estimates.rows().into_iter()
                    .map(|r| r.to_vec()).collect::<Vec<_>>(),
                "standard_errors": std_errs.rows().into_iter()
                    .map(|r| r.to_vec()).collect::<Vec<_>>(),
            })
        }
        _ => {
            return Err(CliError::Spec(
                "choose either --from/--to (hitting) or --tau (capture)".into(),
            ));
        }
    };
    println!("{report:#}");
    if let Some(path) = &args.out {
        write_file(path, &format!("{report:#}\n"))?;
    }
    Ok(())
}

pub struct HeatmapArgs {
    pub strategy: PathBuf,
    pub out: PathBuf,
    pub svg: Option<PathBuf>,
    pub graph: Option<String>,
}

/// `export-heatmap`: grid CSV of P entries plus an optional SVG rendering.
pub fn cmd_export_heatmap(args: HeatmapArgs) -> CliResult<()> {
    let p = load_strategy(&args.strategy)?;
    let labels: Option<Vec<String>> = match &args.graph {
        Some(reference) => {
            let (graph, _) = crate::runspec::load_graph(reference)?;
            if graph.node_count() != p.node_count() {
                return Err(CliError::InvalidMatrix(format!(
                    "{}: {} nodes, graph has {}",
                    args.strategy.display(),
                    p.node_count(),
                    graph.node_count()
                )));
            }
            Some(graph.labels().to_vec())
        }
        None => None,
    };
    write_file(&args.out, &strategy_to_csv(&p))?;
    if let Some(svg_path) = &args.svg {
        write_file(svg_path, &heatmap_svg(p.as_array(), labels.as_deref()))?;
    }
    Ok(())
}

/// Shared by tests: numeric run-record content with volatile timing fields
/// removed.
pub fn record_numerics(record: &RunRecord) -> serde_json::Value {
    let mut value = record_json(record);
    let obj = value.as_object_mut().expect("record is an object");
    obj.remove("wall_time_s");
    obj.remove("iterations_per_second");
    value
}
