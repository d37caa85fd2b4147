//! Multi-start RMSprop descent on the total patrol objective, with the
//! windowed relative-change stopping rule and per-run records.

use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::chain::{parametrize, ParamMatrix, TransitionMatrix};
use crate::error::{Error, Result};
use crate::grad::{grad, GradientResult};
use crate::objective::{penalty, report_metric, Metric, ObjectiveSpec};

/// Optimization hyperparameters. `alpha` and `power_iters` override the
/// spec's copies for the duration of a run so one config drives the whole
/// pipeline.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub learning_rate: f64,
    pub rmsprop_decay: f64,
    pub rmsprop_epsilon: f64,
    /// Penalty weight during optimization.
    pub alpha: f64,
    /// Stopping rule: mean relative objective change across the last
    /// `stop_window` iterations falls below `stop_threshold`.
    pub stop_window: usize,
    pub stop_threshold: f64,
    pub max_iters: usize,
    pub num_inits: usize,
    /// Base seed; run k of a multi-start uses seed + k.
    pub seed: u64,
    pub power_iters: usize,
    /// Emit a progress line to stderr every this many iterations (0 = off).
    pub progress_stride: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            rmsprop_decay: 0.9,
            rmsprop_epsilon: 1e-8,
            alpha: 1.0,
            stop_window: 10,
            stop_threshold: 0.01,
            max_iters: 20_000,
            num_inits: 10,
            seed: 0,
            power_iters: 100,
            progress_stride: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "learning rate {}",
                self.learning_rate
            )));
        }
        if !(self.rmsprop_decay > 0.0 && self.rmsprop_decay < 1.0) {
            return Err(Error::InvalidSpec(format!(
                "rmsprop decay {}",
                self.rmsprop_decay
            )));
        }
        if !(self.rmsprop_epsilon > 0.0) {
            return Err(Error::InvalidSpec(format!(
                "rmsprop epsilon {}",
                self.rmsprop_epsilon
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidSpec(format!("alpha {}", self.alpha)));
        }
        if self.stop_window < 2 {
            return Err(Error::InvalidSpec("stop window must be ≥ 2".into()));
        }
        if !(self.stop_threshold >= 0.0 && self.stop_threshold.is_finite()) {
            return Err(Error::InvalidSpec(format!(
                "stop threshold {}",
                self.stop_threshold
            )));
        }
        if self.max_iters < 1 {
            return Err(Error::InvalidSpec("max_iters must be ≥ 1".into()));
        }
        if self.num_inits < 1 {
            return Err(Error::InvalidSpec("num_inits must be ≥ 1".into()));
        }
        if self.power_iters < 1 {
            return Err(Error::InvalidSpec("power_iters must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Per-coordinate second-moment accumulators, one per robot.
#[derive(Debug, Clone)]
pub struct RmspropState {
    v: Vec<Array2<f64>>,
}

impl RmspropState {
    pub fn zeros_like(qs: &[Array2<f64>]) -> Self {
        Self {
            v: qs.iter().map(|q| Array2::zeros(q.dim())).collect(),
        }
    }
}

/// One RMSprop update in place: v ← ρv + (1−ρ)g², Q ← Q − lr·g/(√v + ε).
pub fn rmsprop_step(
    qs: &mut [Array2<f64>],
    grads: &[Array2<f64>],
    state: &mut RmspropState,
    config: &RunConfig,
) -> Result<()> {
    let rho = config.rmsprop_decay;
    for ((q, g), v) in qs.iter_mut().zip(grads).zip(&mut state.v) {
        for ((qe, &ge), ve) in q.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *ve = rho * *ve + (1.0 - rho) * ge * ge;
            *qe -= config.learning_rate * ge / (ve.sqrt() + config.rmsprop_epsilon);
            if !qe.is_finite() || !ve.is_finite() {
                return Err(Error::NonFinite("rmsprop_step"));
            }
        }
    }
    Ok(())
}

/// One local optimization run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub seed: u64,
    /// Total objective at each iteration (minimization orientation).
    pub history: Vec<f64>,
    /// Final parameters, one matrix per robot.
    pub qs: Vec<Array2<f64>>,
    /// Final strategies; empty when the run failed.
    pub ps: Vec<TransitionMatrix>,
    /// Reported metric at smoothing s = 1 (NaN when the run failed).
    pub metric: f64,
    pub penalty: f64,
    pub iterations: usize,
    pub wall_time_s: f64,
    pub warnings: Vec<String>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

/// True once the mean relative change across the last `stop_window`
/// recorded objectives drops below the threshold; a constant objective
/// therefore stops after exactly `stop_window` iterations.
fn should_stop(history: &[f64], config: &RunConfig) -> bool {
    let t = history.len();
    if t < config.stop_window {
        return false;
    }
    let window = &history[t - config.stop_window..];
    let mean: f64 = window
        .windows(2)
        .map(|ab| (ab[1] - ab[0]).abs() / ab[0].abs().max(1e-12))
        .sum::<f64>()
        / (config.stop_window - 1) as f64;
    mean < config.stop_threshold
}

/// Descent loop shared by the spec-driven optimizer and test stubs; the
/// caller supplies the differentiable objective.
fn run_descent<F, P>(
    mut qs: Vec<Array2<f64>>,
    mut grad_fn: F,
    config: &RunConfig,
    mut progress: P,
) -> (Vec<f64>, Vec<Array2<f64>>, Option<String>)
where
    F: FnMut(&[Array2<f64>]) -> Result<GradientResult>,
    P: FnMut(usize, f64, &[Array2<f64>]),
{
    let mut state = RmspropState::zeros_like(&qs);
    let mut history = Vec::new();
    let mut error = None;
    for t in 1..=config.max_iters {
        let result = match grad_fn(&qs) {
            Ok(r) => r,
            Err(e) => {
                error = Some(format!("iteration {t}: {e}"));
                break;
            }
        };
        history.push(result.value);
        progress(t, result.value, &qs);
        if should_stop(&history, config) {
            break;
        }
        if let Err(e) = rmsprop_step(&mut qs, &result.grads, &mut state, config) {
            error = Some(format!("iteration {t}: {e}"));
            break;
        }
    }
    (history, qs, error)
}

fn failed_record(
    seed: u64,
    started: Instant,
    history: Vec<f64>,
    qs: Vec<Array2<f64>>,
    message: String,
) -> RunRecord {
    RunRecord {
        seed,
        iterations: history.len(),
        history,
        qs,
        ps: Vec::new(),
        metric: f64::NAN,
        penalty: f64::NAN,
        wall_time_s: started.elapsed().as_secs_f64(),
        warnings: Vec::new(),
        error: Some(message),
    }
}

/// One gradient-descent run from the seed's random initialization. Numeric
/// failures (degenerate rows, non-finite steps) are recorded on the
/// returned record; only invalid specs or configs return an error.
pub fn optimize_strategy(spec: &ObjectiveSpec, config: &RunConfig, seed: u64) -> Result<RunRecord> {
    config.validate()?;
    spec.validate()?;
    let started = Instant::now();
    let mut spec = spec.clone();
    spec.alpha = config.alpha;
    spec.power_iters = config.power_iters;

    let n = spec.node_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut qs = Vec::with_capacity(spec.robots);
    for g in &spec.graphs {
        let a = g.adjacency();
        let mut q = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                if a[(i, j)] == 1 {
                    q[(i, j)] = rng.random::<f64>();
                }
            }
        }
        qs.push(q);
    }

    if spec.metric == Metric::Rte {
        let init = ParamMatrix::new(qs[0].clone())
            .and_then(|q| parametrize(&q, spec.graphs[0].adjacency()));
        match init {
            Ok(p) => spec.freeze_rte_horizon(&p)?,
            Err(e) => {
                return Ok(failed_record(
                    seed,
                    started,
                    Vec::new(),
                    qs,
                    format!("initialization: {e}"),
                ))
            }
        }
    }

    let grad_fn = |arrs: &[Array2<f64>]| -> Result<GradientResult> {
        let qms: Vec<ParamMatrix> = arrs
            .iter()
            .map(|a| ParamMatrix::new(a.clone()))
            .collect::<Result<_>>()?;
        grad(&spec, &qms)
    };
    let stride = config.progress_stride;
    let progress = |t: usize, value: f64, arrs: &[Array2<f64>]| {
        if stride > 0 && t % stride == 0 {
            let pen = penalty_of(&spec, arrs);
            eprintln!("seed {seed} iter {t} objective {value:.9e} penalty {pen:.3e}");
        }
    };
    let (history, qs, error) = run_descent(qs, grad_fn, config, progress);
    if let Some(message) = error {
        return Ok(failed_record(seed, started, history, qs, message));
    }

    let finish = || -> Result<(Vec<TransitionMatrix>, f64, f64, Vec<String>)> {
        let qms: Vec<ParamMatrix> = qs
            .iter()
            .map(|a| ParamMatrix::new(a.clone()))
            .collect::<Result<_>>()?;
        let ps: Vec<TransitionMatrix> = qms
            .iter()
            .zip(&spec.graphs)
            .map(|(q, g)| parametrize(q, g.adjacency()))
            .collect::<Result<_>>()?;
        let report = report_metric(&spec, &ps)?;
        let pen = penalty(&spec, &ps);
        Ok((ps, report.value, pen, report.warnings))
    };
    match finish() {
        Ok((ps, metric, pen, warnings)) => Ok(RunRecord {
            seed,
            iterations: history.len(),
            history,
            qs,
            ps,
            metric,
            penalty: pen,
            wall_time_s: started.elapsed().as_secs_f64(),
            warnings,
            error: None,
        }),
        Err(e) => Ok(failed_record(
            seed,
            started,
            history,
            qs,
            format!("final report: {e}"),
        )),
    }
}

fn penalty_of(spec: &ObjectiveSpec, arrs: &[Array2<f64>]) -> f64 {
    let ps: Result<Vec<TransitionMatrix>> = arrs
        .iter()
        .zip(&spec.graphs)
        .map(|(a, g)| ParamMatrix::new(a.clone()).and_then(|q| parametrize(&q, g.adjacency())))
        .collect();
    match ps {
        Ok(ps) => penalty(spec, &ps),
        Err(_) => f64::NAN,
    }
}

#[derive(Debug, Clone)]
pub struct MultiStartResult {
    pub records: Vec<RunRecord>,
    /// Index of the selected run.
    pub best: usize,
}

impl MultiStartResult {
    pub fn best_record(&self) -> &RunRecord {
        &self.records[self.best]
    }
}

/// Independent runs from seeds seed, seed+1, …, in parallel; the selected
/// run has the best reported metric among runs whose penalty is within 10×
/// the median of the successful runs.
pub fn multi_start(spec: &ObjectiveSpec, config: &RunConfig) -> Result<MultiStartResult> {
    config.validate()?;
    spec.validate()?;
    let records: Vec<RunRecord> = (0..config.num_inits)
        .into_par_iter()
        .map(|k| optimize_strategy(spec, config, config.seed.wrapping_add(k as u64)))
        .collect::<Result<_>>()?;
    let best = select_best(spec.metric, &records)?;
    Ok(MultiStartResult { records, best })
}

pub(crate) fn select_best(metric: Metric, records: &[RunRecord]) -> Result<usize> {
    let ok: Vec<usize> = records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.succeeded() && r.metric.is_finite())
        .map(|(i, _)| i)
        .collect();
    if ok.is_empty() {
        return Err(Error::AllRunsFailed);
    }
    let mut pens: Vec<f64> = ok.iter().map(|&i| records[i].penalty).collect();
    pens.sort_by(f64::total_cmp);
    let cutoff = 10.0 * pens[(pens.len() - 1) / 2];
    let pool: Vec<usize> = ok
        .iter()
        .copied()
        .filter(|&i| records[i].penalty <= cutoff)
        .collect();
    let pool = if pool.is_empty() { ok } else { pool };
    Ok(pool
        .into_iter()
        .reduce(|a, b| {
            let better = if metric.maximizing() {
                records[b].metric > records[a].metric
            } else {
                records[b].metric < records[a].metric
            };
            if better {
                b
            } else {
                a
            }
        })
        .expect("pool is nonempty"))
}
