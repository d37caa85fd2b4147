//! Greedy placement of a defense budget over attack durations, and the
//! alternation that co-optimizes the patrol strategy with the placement.

use ndarray::Array2;

use crate::chain::{hitting_probs_heterogeneous, TransitionMatrix};
use crate::error::{Error, Result};
use crate::objective::{AttackDurations, Metric, ObjectiveSpec};
use crate::optimize::{multi_start, RunConfig, RunRecord};

/// Result of greedy budget placement: durations, the cumulative capture
/// matrix at those durations, and the budget spent.
#[derive(Debug, Clone)]
pub struct DefenseAllocation {
    pub tau: AttackDurations,
    pub capture: Array2<f64>,
    pub budget_used: u32,
}

/// Greedy defense placement: after seeding one unit per column (so every
/// node stays capturable), each remaining unit goes to the column holding
/// the global minimum of the cumulative capture matrix M, which then grows
/// by the next first-arrival slice of that column. Ties resolve to the
/// lowest column index, then the lowest row index.
pub fn greedy_defense(
    p: &TransitionMatrix,
    w: &Array2<u32>,
    budget: u32,
) -> Result<DefenseAllocation> {
    let n = p.node_count();
    if (budget as usize) < n {
        return Err(Error::BudgetBelowNodeCount { budget, nodes: n });
    }
    let horizon = budget as usize - n + 1;
    let f = hitting_probs_heterogeneous(p, w, horizon);
    let mut tau = vec![1u32; n];
    let mut m = f.slice(1).clone();
    for _ in 0..(budget as usize - n) {
        let mut bj = 0;
        let mut bv = f64::INFINITY;
        for j in 0..n {
            for i in 0..n {
                if m[(i, j)] < bv {
                    bv = m[(i, j)];
                    bj = j;
                }
            }
        }
        tau[bj] += 1;
        let k = tau[bj] as usize;
        for i in 0..n {
            m[(i, bj)] += f.slice(k)[(i, bj)];
        }
    }
    Ok(DefenseAllocation {
        tau: AttackDurations::new(tau)?,
        capture: m,
        budget_used: budget,
    })
}

/// One alternation round of the co-optimization.
#[derive(Debug, Clone)]
pub struct CoOptRound {
    pub tau: Vec<u32>,
    pub metric: f64,
    pub penalty: f64,
}

#[derive(Debug, Clone)]
pub struct CoOptResult {
    pub strategy: TransitionMatrix,
    pub tau: AttackDurations,
    pub record: RunRecord,
    pub rounds: Vec<CoOptRound>,
}

/// Alternating co-optimization of strategy and budget placement: starting
/// from the uniform split of the budget (remainder to the lowest indices),
/// each round multi-starts the capture objective at the current durations
/// and then replaces them with the greedy placement against the round's
/// best strategy, stopping when the durations repeat or after 10 rounds.
/// Seeds advance by `num_inits` per round, so round 1 reproduces a plain
/// multi-start of the same spec and the result is never worse than it.
pub fn co_optimize(
    spec: &ObjectiveSpec,
    budget: u32,
    config: &RunConfig,
) -> Result<CoOptResult> {
    // the input spec's durations are ignored; each round validates its own
    // τ-filled copy through multi_start
    config.validate()?;
    if spec.metric != Metric::Sg {
        return Err(Error::InvalidSpec(
            "co-optimization drives the single-robot capture objective".into(),
        ));
    }
    let n = spec.node_count();
    if (budget as usize) < n {
        return Err(Error::BudgetBelowNodeCount { budget, nodes: n });
    }
    let base = budget / n as u32;
    let remainder = budget as usize % n;
    let mut tau: Vec<u32> = (0..n)
        .map(|j| base + u32::from(j < remainder))
        .collect();
    let mut seen: Vec<Vec<u32>> = vec![tau.clone()];
    let mut rounds = Vec::new();
    let mut best: Option<(TransitionMatrix, AttackDurations, RunRecord)> = None;
    for round in 0..10 {
        let mut round_spec = spec.clone();
        let durations = AttackDurations::new(tau.clone())?;
        round_spec.tau = Some(durations.clone());
        let mut round_config = config.clone();
        round_config.seed = config
            .seed
            .wrapping_add(round as u64 * config.num_inits as u64);
        let ms = multi_start(&round_spec, &round_config)?;
        let record = ms.best_record().clone();
        rounds.push(CoOptRound {
            tau: tau.clone(),
            metric: record.metric,
            penalty: record.penalty,
        });
        let strategy = record.ps[0].clone();
        let replace = match &best {
            None => true,
            Some((_, _, b)) => record.metric > b.metric,
        };
        if replace {
            best = Some((strategy.clone(), durations, record));
        }
        let placed = greedy_defense(&strategy, spec.graphs[0].weights(), budget)?;
        let next = placed.tau.durations().to_vec();
        if seen.contains(&next) {
            break;
        }
        seen.push(next.clone());
        tau = next;
    }
    let (strategy, tau, record) = best.expect("at least one round ran");
    Ok(CoOptResult {
        strategy,
        tau,
        record,
        rounds,
    })
}
