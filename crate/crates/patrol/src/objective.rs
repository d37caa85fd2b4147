//! Surveillance metrics over patrol strategies: weighted mean hitting time,
//! truncated return-time entropy, Stackelberg capture probabilities (single
//! and multi-robot), stationary-distribution penalties, and the composed
//! scalar objective the optimizer minimizes.

use ndarray::{Array1, Array2};

use crate::chain::{
    self, first_arrival_step, hitting_probs_heterogeneous, HittingProbTensor, ParamMatrix,
    TransitionMatrix,
};
use crate::error::{Error, Result};
use crate::graph::{PatrolGraph, TargetDistribution};

/// Large-but-finite value reported for a metric that is undefined at the
/// evaluated point (reducible chain); keeps multi-start runs alive.
pub const SENTINEL: f64 = 1e9;

/// Time periods an attacker must dwell at each node for the attack to
/// succeed; doubles as the per-node defense strength.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttackDurations {
    tau: Vec<u32>,
}

impl AttackDurations {
    pub fn new(tau: Vec<u32>) -> Result<Self> {
        if tau.is_empty() {
            return Err(Error::InvalidSpec("empty attack durations".into()));
        }
        if let Some(i) = tau.iter().position(|&t| t < 1) {
            return Err(Error::InvalidSpec(format!(
                "attack duration at node {i} must be a positive integer"
            )));
        }
        Ok(Self { tau })
    }

    pub fn uniform(n: usize, t: u32) -> Result<Self> {
        Self::new(vec![t; n])
    }

    pub fn durations(&self) -> &[u32] {
        &self.tau
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn max(&self) -> u32 {
        *self.tau.iter().max().expect("nonempty")
    }

    pub fn total(&self) -> u64 {
        self.tau.iter().map(|&t| t as u64).sum()
    }
}

/// Capture probabilities per starting configuration (rows) and attack node
/// (columns). Single robot: n×n. R robots: n^R × n with rows indexed by the
/// lexicographic order of (i_1,…,i_R), robot 1 most significant.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureMatrix {
    lambda: Array2<f64>,
}

impl CaptureMatrix {
    fn new(lambda: Array2<f64>) -> Self {
        debug_assert!(lambda.iter().all(|&x| (-1e-9..=1.0 + 1e-9).contains(&x)));
        Self { lambda }
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.lambda
    }

    pub fn min_entry(&self) -> f64 {
        lowest_s_mean(&self.lambda, 1)
    }
}

/// Decode a configuration row index into per-robot nodes (robot 1 first).
pub fn config_nodes(index: usize, n: usize, robots: usize) -> Vec<usize> {
    let mut nodes = vec![0usize; robots];
    let mut c = index;
    for slot in (0..robots).rev() {
        nodes[slot] = c % n;
        c /= n;
    }
    nodes
}

/// Source of the visit-frequency vector π used to weight MHT and RTE.
#[derive(Clone, Copy)]
pub enum PiMode<'a> {
    /// Power iteration on the evaluated chain (the metric definitions).
    Computed { iters: usize },
    /// A fixed vector, typically the design target.
    Fixed(&'a Array1<f64>),
}

/// A metric value plus any soft diagnostics (poor stationary residual,
/// sentinel substitution) that must not abort an optimization run.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluated {
    pub value: f64,
    pub warnings: Vec<String>,
}

impl Evaluated {
    fn clean(value: f64) -> Self {
        Self {
            value,
            warnings: Vec::new(),
        }
    }
}

/// Truncation horizon K_η = ⌈w_max/(η·π_min)⌉ − 1 for the return-time
/// entropy; discarded tail mass is bounded by η.
pub fn k_eta(w_max: u32, eta: f64, pi_min: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&eta) || eta == 0.0 {
        return Err(Error::InvalidSpec(format!("eta = {eta} outside (0,1)")));
    }
    if pi_min <= 0.0 {
        return Err(Error::InvalidSpec(format!(
            "nonpositive minimum visit frequency {pi_min}"
        )));
    }
    Ok((w_max as f64 / (eta * pi_min)).ceil() as usize - 1)
}

fn max_edge_weight(w: &Array2<u32>) -> u32 {
    w.iter().copied().max().unwrap_or(1).max(1)
}

/// Weighted mean hitting time (π^T (P∘W) 1) · (π^T M π); lower is better.
/// A reducible chain yields the sentinel value plus a warning instead of an
/// error so a multi-start run can continue past a bad iterate.
pub fn j_mht(p: &TransitionMatrix, w: &Array2<f64>, pi: PiMode) -> Evaluated {
    let mut warnings = Vec::new();
    let pi = resolve_pi(p, pi, &mut warnings);
    let m = match chain::mean_hitting_hops(p) {
        Ok(m) => m,
        Err(_) => {
            warnings.push("mean hitting times undefined (reducible chain); sentinel used".into());
            return Evaluated {
                value: SENTINEL,
                warnings,
            };
        }
    };
    let n = p.node_count();
    let mut per_hop = 0.0;
    let mut kemeny = 0.0;
    for i in 0..n {
        for j in 0..n {
            per_hop += pi[i] * p.as_array()[(i, j)] * w[(i, j)];
            kemeny += pi[i] * m[(i, j)] * pi[j];
        }
    }
    Evaluated {
        value: per_hop * kemeny,
        warnings,
    }
}

fn resolve_pi(p: &TransitionMatrix, pi: PiMode, warnings: &mut Vec<String>) -> Array1<f64> {
    match pi {
        PiMode::Fixed(v) => v.clone(),
        PiMode::Computed { iters } => {
            let sd = chain::stationary_power(p, iters);
            if sd.residual() >= 1e-6 {
                warnings.push(format!(
                    "stationary residual {:e} exceeds 1e-6 after {iters} power iterations",
                    sd.residual()
                ));
            }
            sd.into_array()
        }
    }
}

/// Truncated return-time entropy −Σ_i π_i Σ_{k≤K_η} F_k(i,i) ln F_k(i,i);
/// higher is better. The horizon follows from `eta` and the smallest entry
/// of the supplied π.
pub fn j_rte(p: &TransitionMatrix, w: &Array2<u32>, pi: &Array1<f64>, eta: f64) -> Result<f64> {
    let pi_min = pi.iter().cloned().fold(f64::INFINITY, f64::min);
    let horizon = k_eta(max_edge_weight(w), eta, pi_min)?;
    Ok(j_rte_truncated(p, w, pi, horizon))
}

/// Return-time entropy truncated at an explicit horizon. Runs the
/// first-arrival recursion with a ring buffer of the last w_max slices;
/// terms with F below 1e-300 are left out of the sum (0·log 0 = 0).
pub fn j_rte_truncated(
    p: &TransitionMatrix,
    w: &Array2<u32>,
    pi: &Array1<f64>,
    horizon: usize,
) -> f64 {
    let n = p.node_count();
    let depth = max_edge_weight(w) as usize;
    let mut ring: Vec<Array2<f64>> = Vec::with_capacity(depth);
    let mut node_sum = vec![0.0; n];
    for k in 1..=horizon {
        let recent: Vec<&Array2<f64>> = ring.iter().collect();
        let f = first_arrival_step(p.as_array(), w, k as u32, &recent);
        for i in 0..n {
            let fi = f[(i, i)];
            if fi >= 1e-300 {
                node_sum[i] += fi * fi.ln();
            }
        }
        if ring.len() == depth {
            ring.remove(0);
        }
        ring.push(f);
    }
    let mut total = 0.0;
    for i in 0..n {
        total += pi[i] * node_sum[i];
    }
    -total
}

/// Λ(i,j) = Σ_{k≤τ_j} F_k(i,j): probability of reaching the attack node
/// within the attack duration, per starting node.
pub fn capture_matrix(f: &HittingProbTensor, tau: &AttackDurations) -> Result<CaptureMatrix> {
    let needed = tau.max() as usize;
    if f.horizon() < needed {
        return Err(Error::HorizonTooSmall {
            needed,
            have: f.horizon(),
        });
    }
    let n = f.slice(1).nrows();
    if tau.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} attack durations for {n} nodes",
            tau.len()
        )));
    }
    let mut lambda = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        for k in 1..=tau.durations()[j] as usize {
            for i in 0..n {
                lambda[(i, j)] += f.slice(k)[(i, j)];
            }
        }
    }
    Ok(CaptureMatrix::new(lambda))
}

/// Mean of the s smallest entries; ties resolve to the lowest row-major
/// index, matching the subgradient choice in the gradient module.
pub fn lowest_s_mean(values: &Array2<f64>, s: usize) -> f64 {
    let picked = lowest_s_indices(values, s);
    let sum: f64 = picked.iter().map(|&(i, j)| values[(i, j)]).sum();
    sum / picked.len() as f64
}

/// Positions of the s smallest entries in (value, row-major index) order.
pub fn lowest_s_indices(values: &Array2<f64>, s: usize) -> Vec<(usize, usize)> {
    let mut order: Vec<(f64, usize, usize)> = values
        .indexed_iter()
        .map(|((i, j), &v)| (v, i, j))
        .collect();
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    order
        .into_iter()
        .take(s.max(1).min(values.len()))
        .map(|(_, i, j)| (i, j))
        .collect()
}

/// Stackelberg capture objective: with s = 1 the minimum entry of Λ (the
/// omniscient attacker's best response), with s > 1 the smoothed mean of
/// the s smallest entries used during optimization. Higher is better.
pub fn j_sg(p: &TransitionMatrix, w: &Array2<u32>, tau: &AttackDurations, s: usize) -> Result<f64> {
    let lambda = sg_capture(p, w, tau)?;
    Ok(lowest_s_mean(lambda.as_array(), s))
}

/// Single-robot capture matrix at the given attack durations.
pub fn sg_capture(
    p: &TransitionMatrix,
    w: &Array2<u32>,
    tau: &AttackDurations,
) -> Result<CaptureMatrix> {
    let f = hitting_probs_heterogeneous(p, w, tau.max() as usize);
    capture_matrix(&f, tau)
}

/// Multi-robot capture matrix: per-robot cumulative capture probabilities
/// C^r are precomputed once, then Λ((i_1..i_R), j) = 1 − Π_r (1 − C^r(i_r, j))
/// over all n^R configurations. R = 1 returns C^1 itself so the reduction
/// to the single-robot objective is exact.
pub fn sgm_capture(
    ps: &[TransitionMatrix],
    ws: &[Array2<u32>],
    tau: &AttackDurations,
) -> Result<CaptureMatrix> {
    let robots = ps.len();
    if robots == 0 || ws.len() != robots {
        return Err(Error::DimensionMismatch(format!(
            "{robots} strategies with {} weight matrices",
            ws.len()
        )));
    }
    let n = ps[0].node_count();
    if ps.iter().any(|p| p.node_count() != n) || ws.iter().any(|w| w.nrows() != n || w.ncols() != n)
    {
        return Err(Error::DimensionMismatch(
            "robots must share one node set".into(),
        ));
    }
    let cumulative: Vec<CaptureMatrix> = ps
        .iter()
        .zip(ws)
        .map(|(p, w)| sg_capture(p, w, tau))
        .collect::<Result<_>>()?;
    if robots == 1 {
        return Ok(cumulative.into_iter().next().expect("one robot"));
    }
    let rows = n.pow(robots as u32);
    let mut lambda = Array2::<f64>::zeros((rows, n));
    for c in 0..rows {
        let nodes = config_nodes(c, n, robots);
        for j in 0..n {
            let mut miss = 1.0;
            for (r, &i) in nodes.iter().enumerate() {
                miss *= 1.0 - cumulative[r].as_array()[(i, j)];
            }
            lambda[(c, j)] = 1.0 - miss;
        }
    }
    Ok(CaptureMatrix::new(lambda))
}

/// Team Stackelberg capture objective; reduces to `j_sg` at R = 1.
pub fn j_sgm(
    ps: &[TransitionMatrix],
    ws: &[Array2<u32>],
    tau: &AttackDurations,
    s: usize,
) -> Result<f64> {
    let lambda = sgm_capture(ps, ws, tau)?;
    Ok(lowest_s_mean(lambda.as_array(), s))
}

/// Soft stationary-distribution constraint α‖π_target^T P − π_target^T‖₂².
pub fn penalty_single(p: &TransitionMatrix, pi_target: &Array1<f64>, alpha: f64) -> f64 {
    let n = p.node_count();
    let mut acc = 0.0;
    for j in 0..n {
        let mut prod = 0.0;
        for i in 0..n {
            prod += pi_target[i] * p.as_array()[(i, j)];
        }
        let d = prod - pi_target[j];
        acc += d * d;
    }
    alpha * acc
}

/// Team variant α‖π_avg − π_target‖₂² with per-robot stationary
/// distributions from fixed-length power iteration.
pub fn penalty_multi(
    ps: &[TransitionMatrix],
    pi_target: &Array1<f64>,
    alpha: f64,
    power_iters: usize,
) -> f64 {
    let n = pi_target.len();
    let mut avg = Array1::<f64>::zeros(n);
    for p in ps {
        let pi = chain::stationary_power(p, power_iters).into_array();
        avg += &pi;
    }
    avg.mapv_inplace(|x| x / ps.len() as f64);
    let mut acc = 0.0;
    for j in 0..n {
        let d = avg[j] - pi_target[j];
        acc += d * d;
    }
    alpha * acc
}

/// Which surveillance metric an objective optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Mht,
    Rte,
    Sg,
    Sgm,
}

impl Metric {
    /// True when larger metric values are better (the optimizer then
    /// minimizes the negated value).
    pub fn maximizing(self) -> bool {
        !matches!(self, Metric::Mht)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Mht => "mht",
            Metric::Rte => "rte",
            Metric::Sg => "sg",
            Metric::Sgm => "sgm",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mht" => Ok(Metric::Mht),
            "rte" => Ok(Metric::Rte),
            "sg" => Ok(Metric::Sg),
            "sgm" => Ok(Metric::Sgm),
            other => Err(Error::InvalidSpec(format!("unknown metric `{other}`"))),
        }
    }
}

/// Everything needed to evaluate one objective: metric, environment(s),
/// target distribution, penalty weight and metric parameters.
#[derive(Debug, Clone)]
pub struct ObjectiveSpec {
    pub metric: Metric,
    /// One graph per robot, all on a common node set.
    pub graphs: Vec<PatrolGraph>,
    pub target: Option<TargetDistribution>,
    /// Penalty weight α ≥ 0.
    pub alpha: f64,
    /// Attack durations (SG/SGM only).
    pub tau: Option<AttackDurations>,
    /// Return-time entropy truncation accuracy in (0,1).
    pub eta: f64,
    /// Smoothing count for the SG/SGM min during optimization; reporting
    /// always uses s = 1.
    pub smoothing: usize,
    pub robots: usize,
    /// Weight MHT/RTE by the target π instead of the computed stationary
    /// distribution.
    pub pi_from_target: bool,
    /// Power-iteration length for computed stationary distributions.
    pub power_iters: usize,
    /// Frozen RTE horizon; when unset it is derived from η and π_min at
    /// evaluation time (the optimizer freezes it once per run).
    pub rte_horizon: Option<usize>,
}

impl ObjectiveSpec {
    /// Single-robot spec with the documented defaults (α = 1, η = 0.1,
    /// s = 4 for SG, 100 power iterations).
    pub fn new(metric: Metric, graph: PatrolGraph) -> Self {
        Self {
            metric,
            graphs: vec![graph],
            target: None,
            alpha: 1.0,
            tau: None,
            eta: 0.1,
            smoothing: if metric == Metric::Sg { 4 } else { 1 },
            robots: 1,
            pi_from_target: false,
            power_iters: 100,
            rte_horizon: None,
        }
    }

    /// Team spec: one graph per robot, default smoothing s = 1.
    pub fn team(graphs: Vec<PatrolGraph>) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::InvalidSpec("team needs at least one robot".into()));
        }
        let robots = graphs.len();
        let mut spec = Self::new(Metric::Sgm, graphs[0].clone());
        spec.graphs = graphs;
        spec.robots = robots;
        spec.smoothing = 1;
        Ok(spec)
    }

    pub fn node_count(&self) -> usize {
        self.graphs[0].node_count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.robots < 1 {
            return Err(Error::InvalidSpec("robot count must be ≥ 1".into()));
        }
        if self.graphs.len() != self.robots {
            return Err(Error::InvalidSpec(format!(
                "{} graphs for {} robots",
                self.graphs.len(),
                self.robots
            )));
        }
        let n = self.node_count();
        if self.graphs.iter().any(|g| g.node_count() != n) {
            return Err(Error::InvalidSpec(
                "per-robot graphs must share one node set".into(),
            ));
        }
        if self.metric != Metric::Sgm && self.robots != 1 {
            return Err(Error::InvalidSpec(format!(
                "metric {} is single-robot",
                self.metric.as_str()
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidSpec(format!("alpha = {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.eta) || self.eta == 0.0 {
            return Err(Error::InvalidSpec(format!("eta = {}", self.eta)));
        }
        if self.smoothing < 1 {
            return Err(Error::InvalidSpec("smoothing count must be ≥ 1".into()));
        }
        if self.power_iters < 1 {
            return Err(Error::InvalidSpec("power_iters must be ≥ 1".into()));
        }
        if let Some(t) = &self.target {
            if t.len() != n {
                return Err(Error::InvalidSpec(format!(
                    "target distribution has {} entries for {n} nodes",
                    t.len()
                )));
            }
        }
        if self.pi_from_target && self.target.is_none() {
            return Err(Error::InvalidSpec(
                "pi_from_target requires a target distribution".into(),
            ));
        }
        match self.metric {
            Metric::Sg | Metric::Sgm => match &self.tau {
                None => {
                    return Err(Error::InvalidSpec(
                        "capture metrics need attack durations".into(),
                    ))
                }
                Some(tau) if tau.len() != n => {
                    return Err(Error::InvalidSpec(format!(
                        "{} attack durations for {n} nodes",
                        tau.len()
                    )))
                }
                _ => {}
            },
            Metric::Mht | Metric::Rte => {}
        }
        if self.alpha > 0.0 && self.target.is_none() && self.metric != Metric::Mht {
            // Permitted: penalty silently inactive without a target.
        }
        Ok(())
    }

    fn pi_mode(&self) -> PiMode<'_> {
        if self.pi_from_target {
            PiMode::Fixed(self.target.as_ref().expect("validated").as_array())
        } else {
            PiMode::Computed {
                iters: self.power_iters,
            }
        }
    }

    /// Resolve the RTE horizon: the frozen value if set, else K_η from the
    /// target π_min (when a target exists) or the computed π of `p`.
    pub fn resolve_rte_horizon(&self, p: &TransitionMatrix) -> Result<usize> {
        if let Some(h) = self.rte_horizon {
            return Ok(h);
        }
        let w_max = self.graphs[0].max_weight();
        let pi_min = match &self.target {
            Some(t) => t.min_entry(),
            None => chain::stationary_power(p, self.power_iters)
                .as_array()
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min),
        };
        k_eta(w_max, self.eta, pi_min)
    }

    /// Freeze the RTE horizon so every evaluation in a run shares it.
    pub fn freeze_rte_horizon(&mut self, p: &TransitionMatrix) -> Result<()> {
        if self.metric == Metric::Rte && self.rte_horizon.is_none() {
            self.rte_horizon = Some(self.resolve_rte_horizon(p)?);
        }
        Ok(())
    }
}

/// Metric value at the given smoothing count (penalty excluded, natural
/// sign: MHT lower-better, the rest higher-better).
pub fn metric_value(spec: &ObjectiveSpec, ps: &[TransitionMatrix], s: usize) -> Result<Evaluated> {
    spec.validate()?;
    if ps.len() != spec.robots {
        return Err(Error::DimensionMismatch(format!(
            "{} strategies for {} robots",
            ps.len(),
            spec.robots
        )));
    }
    match spec.metric {
        Metric::Mht => Ok(j_mht(
            &ps[0],
            &spec.graphs[0].weights_f64(),
            spec.pi_mode(),
        )),
        Metric::Rte => {
            let mut warnings = Vec::new();
            let pi = resolve_pi(&ps[0], spec.pi_mode(), &mut warnings);
            let horizon = spec.resolve_rte_horizon(&ps[0])?;
            let value = j_rte_truncated(&ps[0], spec.graphs[0].weights(), &pi, horizon);
            Ok(Evaluated { value, warnings })
        }
        Metric::Sg => {
            let tau = spec.tau.as_ref().expect("validated");
            let value = j_sg(&ps[0], spec.graphs[0].weights(), tau, s)?;
            Ok(Evaluated::clean(value))
        }
        Metric::Sgm => {
            let tau = spec.tau.as_ref().expect("validated");
            let ws: Vec<Array2<u32>> = spec.graphs.iter().map(|g| g.weights().clone()).collect();
            let value = j_sgm(ps, &ws, tau, s)?;
            Ok(Evaluated::clean(value))
        }
    }
}

/// Reported metric: always s = 1.
pub fn report_metric(spec: &ObjectiveSpec, ps: &[TransitionMatrix]) -> Result<Evaluated> {
    metric_value(spec, ps, 1)
}

/// Penalty value for the spec's metric family (Eq-5 style for single-robot
/// metrics, averaged-stationary for teams); 0 without a target.
pub fn penalty(spec: &ObjectiveSpec, ps: &[TransitionMatrix]) -> f64 {
    let Some(target) = &spec.target else {
        return 0.0;
    };
    if spec.alpha == 0.0 {
        return 0.0;
    }
    match spec.metric {
        Metric::Sgm => penalty_multi(ps, target.as_array(), spec.alpha, spec.power_iters),
        _ => penalty_single(&ps[0], target.as_array(), spec.alpha),
    }
}

/// The scalar the optimizer minimizes: metric at the spec's smoothing count
/// with the penalty applied in the metric's direction (added for
/// minimization metrics, subtracted from maximization metrics before the
/// sign flip).
pub fn total_objective(spec: &ObjectiveSpec, qs: &[ParamMatrix]) -> Result<Evaluated> {
    spec.validate()?;
    if qs.len() != spec.robots {
        return Err(Error::DimensionMismatch(format!(
            "{} parameter matrices for {} robots",
            qs.len(),
            spec.robots
        )));
    }
    let ps: Vec<TransitionMatrix> = qs
        .iter()
        .zip(&spec.graphs)
        .map(|(q, g)| chain::parametrize(q, g.adjacency()))
        .collect::<Result<_>>()?;
    let m = metric_value(spec, &ps, spec.smoothing)?;
    let pen = penalty(spec, &ps);
    let value = if spec.metric.maximizing() {
        -m.value + pen
    } else {
        m.value + pen
    };
    Ok(Evaluated {
        value,
        warnings: m.warnings,
    })
}
