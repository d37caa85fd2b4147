//! Gradients of the optimizer's scalar objective. The objective is rebuilt
//! on the reverse-mode tape with the same composition (and sign convention)
//! as the plain evaluation path, so finite differences of the plain path
//! cross-check the tape.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::chain::{parametrize, ParamMatrix};
use crate::error::{Error, Result};
use crate::objective::{total_objective, Metric, ObjectiveSpec};
use crate::tape::{MVar, SVar, Tape, VVar};

/// Objective value and one gradient per robot, laid out like the parameter
/// matrices. Coordinates masked by the adjacency carry zero gradient.
#[derive(Debug, Clone)]
pub struct GradientResult {
    pub value: f64,
    pub grads: Vec<Array2<f64>>,
}

/// Value and gradient of the total objective (metric with penalty, oriented
/// for minimization) at the given parameters.
pub fn grad(spec: &ObjectiveSpec, qs: &[ParamMatrix]) -> Result<GradientResult> {
    let spec = frozen(spec, qs)?;
    let mut tape = Tape::new();
    let qvars: Vec<MVar> = qs
        .iter()
        .map(|q| tape.leaf_matrix(q.as_array().clone()))
        .collect::<Result<_>>()?;
    let root = build_total(&mut tape, &spec, &qvars)?;
    let value = tape.scalar_value(root);
    let adjoints = tape.backward(root);
    let grads = qvars.iter().map(|&q| tape.grad_of(&adjoints, q)).collect();
    Ok(GradientResult { value, grads })
}

/// Largest relative error between the tape gradient and central finite
/// differences of the plain evaluation, over all coordinates when there are
/// at most 64 and over a fixed-seed random subset of 50 otherwise.
pub fn fd_check(spec: &ObjectiveSpec, qs: &[ParamMatrix], h: f64) -> Result<f64> {
    let spec = frozen(spec, qs)?;
    let result = grad(&spec, qs)?;
    let n = spec.node_count();
    let per_robot = n * n;
    let total = spec.robots * per_robot;
    let coords: Vec<usize> = if total <= 64 {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
        rand::seq::index::sample(&mut rng, total, 50).into_vec()
    };
    let base: Vec<Array2<f64>> = qs.iter().map(|q| q.as_array().clone()).collect();
    let mut worst = 0.0_f64;
    for flat in coords {
        let r = flat / per_robot;
        let i = (flat % per_robot) / n;
        let j = flat % n;
        let eval = |delta: f64| -> Result<f64> {
            let mut arrs = base.clone();
            arrs[r][(i, j)] += delta;
            let perturbed: Vec<ParamMatrix> = arrs
                .into_iter()
                .map(ParamMatrix::new)
                .collect::<Result<_>>()?;
            Ok(total_objective(&spec, &perturbed)?.value)
        };
        let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
        let an = result.grads[r][(i, j)];
        let rel = (fd - an).abs() / f64::max(1e-8, f64::max(fd.abs(), an.abs()));
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Validate and pin the spec so every evaluation (tape and plain) shares one
/// RTE horizon.
fn frozen(spec: &ObjectiveSpec, qs: &[ParamMatrix]) -> Result<ObjectiveSpec> {
    spec.validate()?;
    if qs.len() != spec.robots {
        return Err(Error::DimensionMismatch(format!(
            "{} parameter matrices for {} robots",
            qs.len(),
            spec.robots
        )));
    }
    let mut spec = spec.clone();
    if spec.metric == Metric::Rte && spec.rte_horizon.is_none() {
        let p = parametrize(&qs[0], spec.graphs[0].adjacency())?;
        spec.freeze_rte_horizon(&p)?;
    }
    Ok(spec)
}

fn build_total(tape: &mut Tape, spec: &ObjectiveSpec, qvars: &[MVar]) -> Result<SVar> {
    let n = spec.node_count();
    let pvars: Vec<MVar> = qvars
        .iter()
        .zip(&spec.graphs)
        .map(|(&q, g)| {
            let x = tape.masked_abs(q, g.adjacency())?;
            tape.row_normalize(x)
        })
        .collect::<Result<_>>()?;
    let metric = match spec.metric {
        Metric::Mht => {
            let p = pvars[0];
            let pi = build_pi(tape, spec, p, n)?;
            let pw = tape.mat_const_mul(p, &spec.graphs[0].weights_f64())?;
            let ones = tape.leaf_vector(Array1::ones(n))?;
            let row_cost = tape.mat_vec(pw, ones)?;
            let per_hop = tape.dot(pi, row_cost)?;
            let m = tape.mht_solve(p)?;
            let mp = tape.mat_vec(m, pi)?;
            let kemeny = tape.dot(pi, mp)?;
            tape.s_mul(per_hop, kemeny)?
        }
        Metric::Rte => {
            let p = pvars[0];
            let horizon = spec.rte_horizon.ok_or_else(|| {
                Error::InvalidSpec("return-entropy horizon must be frozen before building".into())
            })?;
            let profile = tape.return_entropy_profile(p, spec.graphs[0].weights(), horizon)?;
            let pi = build_pi(tape, spec, p, n)?;
            let weighted = tape.dot(pi, profile)?;
            tape.s_neg(weighted)?
        }
        Metric::Sg => {
            let tau = spec.tau.as_ref().expect("validated");
            let slices =
                tape.arrival_slices(pvars[0], spec.graphs[0].weights(), tau.max() as usize)?;
            let lambda = tape.capture_from_slices(&slices, tau)?;
            tape.lowest_s_mean(lambda, spec.smoothing)?
        }
        Metric::Sgm => {
            let tau = spec.tau.as_ref().expect("validated");
            let cs: Vec<MVar> = pvars
                .iter()
                .zip(&spec.graphs)
                .map(|(&p, g)| {
                    let slices = tape.arrival_slices(p, g.weights(), tau.max() as usize)?;
                    tape.capture_from_slices(&slices, tau)
                })
                .collect::<Result<_>>()?;
            let lambda = if cs.len() == 1 {
                cs[0]
            } else {
                tape.team_capture(&cs)?
            };
            tape.lowest_s_mean(lambda, spec.smoothing)?
        }
    };
    let signed = if spec.metric.maximizing() {
        tape.s_neg(metric)?
    } else {
        metric
    };
    match build_penalty(tape, spec, &pvars)? {
        Some(pen) => tape.s_add(signed, pen),
        None => Ok(signed),
    }
}

/// Stationary weighting for MHT/RTE: the target as a constant when
/// `pi_from_target` is set, otherwise the unrolled power iteration.
fn build_pi(tape: &mut Tape, spec: &ObjectiveSpec, p: MVar, n: usize) -> Result<VVar> {
    if spec.pi_from_target {
        let t = spec.target.as_ref().expect("validated").as_array().clone();
        tape.leaf_vector(t)
    } else {
        power_iteration(tape, p, spec.power_iters, n)
    }
}

fn power_iteration(tape: &mut Tape, p: MVar, iters: usize, n: usize) -> Result<VVar> {
    let mut pi = tape.leaf_vector(Array1::from_elem(n, 1.0 / n as f64))?;
    for _ in 0..iters {
        let u = tape.vec_mat(pi, p)?;
        pi = tape.normalize_sum(u)?;
    }
    Ok(pi)
}

pub(crate) fn build_penalty(
    tape: &mut Tape,
    spec: &ObjectiveSpec,
    pvars: &[MVar],
) -> Result<Option<SVar>> {
    let Some(target) = &spec.target else {
        return Ok(None);
    };
    if spec.alpha == 0.0 {
        return Ok(None);
    }
    let n = target.len();
    let pen = match spec.metric {
        Metric::Sgm => {
            let mut acc: Option<VVar> = None;
            for &p in pvars {
                let pi = power_iteration(tape, p, spec.power_iters, n)?;
                acc = Some(match acc {
                    None => pi,
                    Some(a) => tape.vec_add(a, pi)?,
                });
            }
            let avg = tape.vec_scale(acc.expect("at least one robot"), 1.0 / pvars.len() as f64)?;
            let t = tape.leaf_vector(target.as_array().clone())?;
            let d = tape.vec_sub(avg, t)?;
            let ss = tape.sum_sq(d)?;
            tape.s_scale(ss, spec.alpha)?
        }
        _ => {
            let t = tape.leaf_vector(target.as_array().clone())?;
            let u = tape.vec_mat(t, pvars[0])?;
            let d = tape.vec_sub(u, t)?;
            let ss = tape.sum_sq(d)?;
            tape.s_scale(ss, spec.alpha)?
        }
    };
    Ok(Some(pen))
}
