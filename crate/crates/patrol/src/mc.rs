//! Monte Carlo simulator used to cross-check the analytic hitting-time and
//! capture-probability machinery. Every trial draws from its own RNG stream
//! derived from (seed, entry, trial), so results are independent of
//! execution order and reproducible by seed.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chain::TransitionMatrix;
use crate::objective::{config_nodes, AttackDurations};

#[derive(Debug, Clone, Copy)]
pub struct SimConfig {
    pub trials: u64,
    /// Maximum elapsed time periods per trial; later arrivals are censored.
    pub horizon: u64,
    pub seed: u64,
    /// Count elapsed travel time along edges instead of hops.
    pub weighted: bool,
}

/// Empirical first-hitting-time distribution with binomial standard errors.
#[derive(Debug, Clone)]
pub struct HittingSample {
    /// freq[k−1] = fraction of trials arriving at exactly k.
    pub freq: Vec<f64>,
    pub std_err: Vec<f64>,
    /// Fraction of trials that never arrived within the horizon.
    pub censored: f64,
}

/// Precomputed cumulative rows for walk sampling.
struct WalkTable {
    cum: Vec<Vec<f64>>,
    last: Vec<usize>,
}

impl WalkTable {
    fn new(p: &TransitionMatrix) -> Self {
        let n = p.node_count();
        let mut cum = Vec::with_capacity(n);
        let mut last = Vec::with_capacity(n);
        for i in 0..n {
            let mut row = Vec::with_capacity(n);
            let mut acc = 0.0;
            let mut hi = 0;
            for j in 0..n {
                let x = p.as_array()[(i, j)];
                acc += x;
                row.push(acc);
                if x > 0.0 {
                    hi = j;
                }
            }
            cum.push(row);
            last.push(hi);
        }
        Self { cum, last }
    }

    fn step(&self, from: usize, rng: &mut ChaCha8Rng) -> usize {
        let u: f64 = rng.random();
        for (m, &c) in self.cum[from].iter().enumerate() {
            if u < c {
                return m;
            }
        }
        // u landed in the roundoff sliver past the final cumulative value
        self.last[from]
    }
}

fn trial_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Walk from `start` until the first arrival at `target`; returns the
/// elapsed time (k ≥ 1, so starting at the target does not count) or None
/// when the walk exceeds the horizon.
fn sample_hitting_time(
    table: &WalkTable,
    w: &Array2<u32>,
    start: usize,
    target: usize,
    horizon: u64,
    weighted: bool,
    rng: &mut ChaCha8Rng,
) -> Option<u64> {
    let mut x = start;
    let mut elapsed: u64 = 0;
    loop {
        let m = table.step(x, rng);
        elapsed += if weighted { w[(x, m)] as u64 } else { 1 };
        if elapsed > horizon {
            return None;
        }
        if m == target {
            return Some(elapsed);
        }
        x = m;
    }
}

/// Empirical distribution of the first hitting time from `start` to
/// `target` under `cfg.trials` independent walks.
pub fn simulate_hitting(
    p: &TransitionMatrix,
    w: &Array2<u32>,
    start: usize,
    target: usize,
    cfg: &SimConfig,
) -> HittingSample {
    let table = WalkTable::new(p);
    let mut counts = vec![0u64; cfg.horizon as usize];
    let mut censored = 0u64;
    for trial in 0..cfg.trials {
        let mut rng = trial_rng(cfg.seed, trial);
        match sample_hitting_time(&table, w, start, target, cfg.horizon, cfg.weighted, &mut rng)
        {
            Some(k) => counts[k as usize - 1] += 1,
            None => censored += 1,
        }
    }
    let trials = cfg.trials as f64;
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / trials).collect();
    let std_err = freq
        .iter()
        .map(|&f| (f * (1.0 - f) / trials).sqrt())
        .collect();
    HittingSample {
        freq,
        std_err,
        censored: censored as f64 / trials,
    }
}

/// Empirical capture probability for one starting configuration and attack
/// node: the fraction of trials in which at least one robot reaches the
/// attack node within its attack duration. Returns (estimate, std error).
pub fn empirical_capture_entry(
    ps: &[TransitionMatrix],
    ws: &[Array2<u32>],
    tau: &AttackDurations,
    config_index: usize,
    attack: usize,
    cfg: &SimConfig,
) -> (f64, f64) {
    let n = ps[0].node_count();
    let tables: Vec<WalkTable> = ps.iter().map(WalkTable::new).collect();
    let starts = config_nodes(config_index, n, ps.len());
    let budget = tau.durations()[attack] as u64;
    let entry = (config_index * n + attack) as u64;
    let mut captures = 0u64;
    for trial in 0..cfg.trials {
        let mut rng = trial_rng(cfg.seed, entry * cfg.trials + trial);
        let mut caught = false;
        for (r, &start) in starts.iter().enumerate() {
            let hit = sample_hitting_time(
                &tables[r],
                &ws[r],
                start,
                attack,
                budget,
                cfg.weighted,
                &mut rng,
            );
            if hit.is_some() {
                caught = true;
                // remaining robots still consume their draws so the entry's
                // stream usage does not depend on earlier robots' outcomes
            }
        }
        if caught {
            captures += 1;
        }
    }
    let trials = cfg.trials as f64;
    let p_hat = captures as f64 / trials;
    (p_hat, (p_hat * (1.0 - p_hat) / trials).sqrt())
}

/// Full empirical capture matrix (n^R × n) with per-entry standard errors.
pub fn empirical_capture(
    ps: &[TransitionMatrix],
    ws: &[Array2<u32>],
    tau: &AttackDurations,
    cfg: &SimConfig,
) -> (Array2<f64>, Array2<f64>) {
    let n = ps[0].node_count();
    let rows = n.pow(ps.len() as u32);
    let mut est = Array2::<f64>::zeros((rows, n));
    let mut se = Array2::<f64>::zeros((rows, n));
    for c in 0..rows {
        for j in 0..n {
            let (e, s) = empirical_capture_entry(ps, ws, tau, c, j, cfg);
            est[(c, j)] = e;
            se[(c, j)] = s;
        }
    }
    (est, se)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tm(p: Array2<f64>) -> TransitionMatrix {
        TransitionMatrix::new(p).unwrap()
    }

    #[test]
    fn deterministic_cycle_has_unit_mass_at_one_step() {
        let p = tm(array![[0.0, 1.0], [1.0, 0.0]]);
        let w = Array2::<u32>::ones((2, 2));
        let cfg = SimConfig {
            trials: 200,
            horizon: 5,
            seed: 7,
            weighted: false,
        };
        let s = simulate_hitting(&p, &w, 0, 1, &cfg);
        assert_eq!(s.freq[0], 1.0);
        assert_eq!(s.censored, 0.0);
    }

    #[test]
    fn geometric_return_law_within_three_sigma() {
        let p = tm(array![[0.5, 0.5], [0.5, 0.5]]);
        let w = Array2::<u32>::ones((2, 2));
        let cfg = SimConfig {
            trials: 200_000,
            horizon: 30,
            seed: 11,
            weighted: false,
        };
        let s = simulate_hitting(&p, &w, 0, 0, &cfg);
        for k in 1..=8usize {
            let expect = 0.5f64.powi(k as i32);
            let sigma = (expect * (1.0 - expect) / cfg.trials as f64).sqrt();
            assert!(
                (s.freq[k - 1] - expect).abs() <= 3.0 * sigma,
                "k={k}: {} vs {expect}",
                s.freq[k - 1]
            );
        }
    }

    #[test]
    fn weighted_legs_return_in_exactly_four_periods() {
        let p = tm(array![[0.0, 1.0], [1.0, 0.0]]);
        let w = array![[0u32, 2], [2, 0]];
        let cfg = SimConfig {
            trials: 500,
            horizon: 6,
            seed: 3,
            weighted: true,
        };
        let s = simulate_hitting(&p, &w, 0, 0, &cfg);
        assert_eq!(s.freq[3], 1.0, "deterministic two-minute legs");
    }

    #[test]
    fn capture_certain_for_deterministic_cycle() {
        let p = tm(array![[0.0, 1.0], [1.0, 0.0]]);
        let w = Array2::<u32>::ones((2, 2));
        let tau = AttackDurations::uniform(2, 2).unwrap();
        let cfg = SimConfig {
            trials: 300,
            horizon: 4,
            seed: 5,
            weighted: false,
        };
        let (est, _) = empirical_capture(
            std::slice::from_ref(&p),
            std::slice::from_ref(&w),
            &tau,
            &cfg,
        );
        assert_eq!(est, Array2::<f64>::ones((2, 2)));
    }

    #[test]
    fn two_robot_capture_matches_hand_enumeration() {
        // uniform chains, τ = [1,1], configuration (0,1), attack node 0:
        // each robot independently arrives with probability 1/2, so the
        // team captures with probability 0.75
        let p = tm(array![[0.5, 0.5], [0.5, 0.5]]);
        let w = Array2::<u32>::ones((2, 2));
        let tau = AttackDurations::uniform(2, 1).unwrap();
        let cfg = SimConfig {
            trials: 200_000,
            horizon: 1,
            seed: 13,
            weighted: false,
        };
        let config_01 = 1;
        let (est, se) = empirical_capture_entry(
            &[p.clone(), p],
            &[w.clone(), w],
            &tau,
            config_01,
            0,
            &cfg,
        );
        assert!((est - 0.75).abs() <= 3.0 * se, "{est}");
    }

    #[test]
    fn same_seed_reproduces_identical_estimates() {
        let p = tm(array![[0.2, 0.8], [0.6, 0.4]]);
        let w = Array2::<u32>::ones((2, 2));
        let cfg = SimConfig {
            trials: 5_000,
            horizon: 40,
            seed: 42,
            weighted: false,
        };
        let a = simulate_hitting(&p, &w, 0, 1, &cfg);
        let b = simulate_hitting(&p, &w, 0, 1, &cfg);
        assert_eq!(a.freq, b.freq);
        let other = SimConfig { seed: 43, ..cfg };
        let c = simulate_hitting(&p, &w, 0, 1, &other);
        assert_ne!(a.freq, c.freq);
    }
}
