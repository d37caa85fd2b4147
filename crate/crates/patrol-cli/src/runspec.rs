//! Run-spec ingestion: a JSON file describing the graph, objective, and
//! optimizer configuration for a batch of runs. Command-line flags override
//! file fields; either source alone is enough.

use std::path::{Path, PathBuf};

use ndarray::Array1;
use serde::Deserialize;

use patrol::graph::{builtin_sf, PatrolGraph, TargetDistribution};
use patrol::objective::{AttackDurations, Metric, ObjectiveSpec};
use patrol::optimize::RunConfig;

use crate::{CliError, CliResult};

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum TauField {
    Scalar(u32),
    Vector(Vec<u32>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum TargetField {
    Named(String),
    Explicit(Vec<f64>),
}

/// Optimizer settings; every field is optional and defaults to the library
/// default.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigPatch {
    pub learning_rate: Option<f64>,
    pub rmsprop_decay: Option<f64>,
    pub rmsprop_epsilon: Option<f64>,
    pub alpha: Option<f64>,
    pub stop_window: Option<usize>,
    pub stop_threshold: Option<f64>,
    pub max_iters: Option<usize>,
    pub num_inits: Option<usize>,
    pub seed: Option<u64>,
    pub power_iters: Option<usize>,
    pub progress_stride: Option<usize>,
}

impl ConfigPatch {
    pub fn apply(&self, config: &mut RunConfig) {
        macro_rules! patch {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { config.$field = v; })*
            };
        }
        patch!(
            learning_rate,
            rmsprop_decay,
            rmsprop_epsilon,
            alpha,
            stop_window,
            stop_threshold,
            max_iters,
            num_inits,
            seed,
            power_iters,
            progress_stride
        );
    }
}

/// The on-disk run-spec schema (see docs/runspec.md). Unknown keys are
/// rejected so typos fail loudly.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpecFile {
    pub graph: Option<String>,
    pub metric: Option<String>,
    pub robots: Option<usize>,
    pub tau: Option<TauField>,
    pub eta: Option<f64>,
    pub smoothing: Option<usize>,
    pub target: Option<TargetField>,
    pub pi_from_target: Option<bool>,
    pub config: Option<ConfigPatch>,
    pub out_dir: Option<PathBuf>,
    pub export_heatmap: Option<bool>,
}

impl RunSpecFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Spec(format!("cannot read run spec {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Spec(format!("run spec {}: {e}", path.display())))
    }
}

/// Flag-level overrides collected by the argument parser.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub graph: Option<String>,
    pub metric: Option<String>,
    pub robots: Option<usize>,
    pub tau: Option<String>,
    pub eta: Option<f64>,
    pub alpha: Option<f64>,
    pub smoothing: Option<usize>,
    pub target: Option<String>,
    pub seed: Option<u64>,
    pub inits: Option<usize>,
    pub out: Option<PathBuf>,
    pub export_heatmap: bool,
}

/// A fully resolved optimization request.
pub struct OptimizeRequest {
    pub spec: ObjectiveSpec,
    pub config: RunConfig,
    pub out_dir: Option<PathBuf>,
    pub export_heatmap: bool,
    pub labels: Vec<String>,
    pub graph: PatrolGraph,
    pub target: Option<TargetDistribution>,
}

pub fn parse_metric(name: &str) -> CliResult<Metric> {
    match name.to_ascii_lowercase().as_str() {
        "mht" => Ok(Metric::Mht),
        "rte" => Ok(Metric::Rte),
        "sg" => Ok(Metric::Sg),
        "sgm" => Ok(Metric::Sgm),
        other => Err(CliError::Spec(format!(
            "unknown metric `{other}` (expected mht, rte, sg, or sgm)"
        ))),
    }
}

/// Load a graph by reference: `builtin:sf` or a path to a graph JSON file.
/// Returns the bundled target distribution when the builtin provides one.
pub fn load_graph(reference: &str) -> CliResult<(PatrolGraph, Option<TargetDistribution>)> {
    if reference == "builtin:sf" {
        let (graph, target) = builtin_sf();
        return Ok((graph, Some(target)));
    }
    if let Some(rest) = reference.strip_prefix("builtin:") {
        return Err(CliError::Spec(format!("unknown builtin graph `{rest}`")));
    }
    let path = Path::new(reference);
    if !path.exists() {
        return Err(CliError::Spec(format!(
            "graph file {} does not exist",
            path.display()
        )));
    }
    let graph = PatrolGraph::load(path)?;
    Ok((graph, None))
}

pub fn parse_tau_text(text: &str, n: usize) -> CliResult<AttackDurations> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let values: Vec<u32> = parts
        .iter()
        .map(|p| {
            p.parse::<u32>()
                .map_err(|_| CliError::Spec(format!("attack duration `{p}` is not an integer")))
        })
        .collect::<CliResult<_>>()?;
    let tau = if values.len() == 1 {
        AttackDurations::uniform(n, values[0])?
    } else {
        AttackDurations::new(values)?
    };
    Ok(tau)
}

fn resolve_tau(field: &TauField, n: usize) -> CliResult<AttackDurations> {
    Ok(match field {
        TauField::Scalar(t) => AttackDurations::uniform(n, *t)?,
        TauField::Vector(v) => AttackDurations::new(v.clone())?,
    })
}

/// Resolve a target reference: `crime` (builtin SF target), `uniform`,
/// `none`, or an explicit distribution.
fn resolve_target(
    field: &TargetField,
    n: usize,
    builtin: Option<&TargetDistribution>,
) -> CliResult<Option<TargetDistribution>> {
    match field {
        TargetField::Named(name) => match name.as_str() {
            "none" => Ok(None),
            "uniform" => Ok(Some(
                TargetDistribution::new(Array1::from_elem(n, 1.0 / n as f64))
                    .expect("uniform distribution is valid"),
            )),
            "crime" => builtin.cloned().map(Some).ok_or_else(|| {
                CliError::Spec("target `crime` is only available with builtin:sf".into())
            }),
            other => {
                // Allow an inline comma-separated distribution on the flag.
                let values: Vec<f64> = other
                    .split(',')
                    .map(|p| {
                        p.trim().parse::<f64>().map_err(|_| {
                            CliError::Spec(format!(
                                "unknown target `{other}` (expected crime, uniform, none, or a comma-separated distribution)"
                            ))
                        })
                    })
                    .collect::<CliResult<_>>()?;
                Ok(Some(normalized_target(values)?))
            }
        },
        TargetField::Explicit(values) => Ok(Some(normalized_target(values.clone())?)),
    }
}

/// Explicit targets are given as arbitrary nonnegative weights and scaled to
/// a distribution here.
fn normalized_target(values: Vec<f64>) -> CliResult<TargetDistribution> {
    let raw = Array1::from(values);
    let sum = raw.sum();
    if !sum.is_finite() || sum <= 0.0 {
        return Err(CliError::Spec(format!(
            "target weights must be nonnegative with a positive sum (sum = {sum})"
        )));
    }
    Ok(TargetDistribution::new(raw / sum)?)
}

/// Merge the run-spec file (if any) with flag overrides into a validated
/// optimization request.
pub fn resolve_optimize(
    file: Option<RunSpecFile>,
    flags: &Overrides,
) -> CliResult<OptimizeRequest> {
    let file = file.unwrap_or_default();

    let graph_ref = flags
        .graph
        .clone()
        .or_else(|| file.graph.clone())
        .ok_or_else(|| CliError::Spec("no graph given (use --graph or the run spec)".into()))?;
    let (graph, builtin_target) = load_graph(&graph_ref)?;
    let n = graph.node_count();
    let labels = graph.labels().to_vec();

    let metric_name = flags
        .metric
        .clone()
        .or_else(|| file.metric.clone())
        .ok_or_else(|| CliError::Spec("no metric given (use --metric or the run spec)".into()))?;
    let metric = parse_metric(&metric_name)?;

    let robots = flags.robots.or(file.robots).unwrap_or(1);
    let mut spec = if metric == Metric::Sgm {
        ObjectiveSpec::team(vec![graph.clone(); robots.max(1)])?
    } else {
        if robots > 1 {
            return Err(CliError::Spec(format!(
                "metric {} is single-robot; use sgm for teams",
                metric.as_str()
            )));
        }
        ObjectiveSpec::new(metric, graph.clone())
    };

    let tau = match (&flags.tau, &file.tau) {
        (Some(text), _) => Some(parse_tau_text(text, n)?),
        (None, Some(field)) => Some(resolve_tau(field, n)?),
        (None, None) => None,
    };
    spec.tau = tau;

    if let Some(eta) = flags.eta.or(file.eta) {
        spec.eta = eta;
    }
    if let Some(s) = flags.smoothing.or(file.smoothing) {
        spec.smoothing = s;
    }
    if let Some(b) = file.pi_from_target {
        spec.pi_from_target = b;
    }

    let target_field = flags
        .target
        .clone()
        .map(TargetField::Named)
        .or_else(|| file.target.clone());
    spec.target = match &target_field {
        Some(field) => resolve_target(field, n, builtin_target.as_ref())?,
        None => None,
    };
    let target = spec.target.clone();

    let mut config = RunConfig::default();
    if let Some(patch) = &file.config {
        patch.apply(&mut config);
    }
    if let Some(seed) = flags.seed {
        config.seed = seed;
    }
    if let Some(inits) = flags.inits {
        config.num_inits = inits;
    }
    if let Some(alpha) = flags.alpha {
        config.alpha = alpha;
    }

    spec.validate().map_err(CliError::from)?;
    config.validate().map_err(CliError::from)?;

    Ok(OptimizeRequest {
        spec,
        config,
        out_dir: flags.out.clone().or(file.out_dir),
        export_heatmap: flags.export_heatmap || file.export_heatmap.unwrap_or(false),
        labels,
        graph,
        target,
    })
}

/// Parse `--partition` node lists: per-robot groups separated by `;`,
/// node names or indices separated by `,`. Groups must together cover
/// disjoint node sets.
pub fn parse_partition(text: &str, graph: &PatrolGraph) -> CliResult<Vec<Vec<usize>>> {
    let mut seen = vec![false; graph.node_count()];
    let mut groups = Vec::new();
    for group in text.split(';') {
        let mut nodes = Vec::new();
        for name in group.split(',') {
            let name = name.trim();
            if name.is_empty() {
                continue;
            }
            let idx = graph
                .resolve_node(name)
                .ok_or_else(|| CliError::Spec(format!("unknown node `{name}`")))?;
            if seen[idx] {
                return Err(CliError::Spec(format!(
                    "node `{name}` appears in more than one partition"
                )));
            }
            seen[idx] = true;
            nodes.push(idx);
        }
        if nodes.is_empty() {
            return Err(CliError::Spec("empty partition group".into()));
        }
        groups.push(nodes);
    }
    if groups.len() < 2 {
        return Err(CliError::Spec(
            "a partition needs at least two `;`-separated groups".into(),
        ));
    }
    Ok(groups)
}
