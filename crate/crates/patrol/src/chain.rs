//! Core Markov-chain machinery: the constraint parametrization, stationary
//! distributions, first-arrival probability recursions and mean hitting
//! times.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::linalg::Lu;

/// Unconstrained optimization variables; one entry per potential edge.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMatrix(Array2<f64>);

impl ParamMatrix {
    pub fn new(q: Array2<f64>) -> Result<Self> {
        if q.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("param_matrix"));
        }
        Ok(Self(q))
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }
}

/// Row-stochastic transition matrix. Rows sum to 1 within 1e-12 and entries
/// are nonnegative; entries on disallowed edges are exactly zero when built
/// by `parametrize`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    p: Array2<f64>,
}

impl TransitionMatrix {
    /// Validate an externally supplied matrix. Rows off by more than 1e-9
    /// are rejected; rows off by more than 1e-12 are renormalized. Rows
    /// already meeting the tight invariant pass through bit-identical, so
    /// saving and reloading a computed strategy is lossless.
    pub fn new(p: Array2<f64>) -> Result<Self> {
        let n = p.nrows();
        if p.ncols() != n {
            return Err(Error::InvalidTransitionMatrix(format!(
                "matrix is {}x{}, expected square",
                p.nrows(),
                p.ncols()
            )));
        }
        if n == 0 {
            return Err(Error::InvalidTransitionMatrix("empty matrix".into()));
        }
        let mut p = p;
        for i in 0..n {
            let mut sum = 0.0;
            for j in 0..n {
                let x = p[(i, j)];
                if !x.is_finite() || x < 0.0 {
                    return Err(Error::InvalidTransitionMatrix(format!(
                        "entry ({i},{j}) = {x}"
                    )));
                }
                sum += x;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidTransitionMatrix(format!(
                    "row {i} sums to {sum}"
                )));
            }
            if (sum - 1.0).abs() > 1e-12 {
                for j in 0..n {
                    p[(i, j)] /= sum;
                }
            }
        }
        Ok(Self { p })
    }

    /// Wrap a matrix already known to be row-stochastic (parametrize output
    /// and test fixtures); validity is only debug-asserted.
    pub(crate) fn from_normalized(p: Array2<f64>) -> Self {
        debug_assert!(p
            .rows()
            .into_iter()
            .all(|r| (r.sum() - 1.0).abs() <= 1e-12 && r.iter().all(|&x| x >= 0.0)));
        Self { p }
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.p
    }

    pub fn node_count(&self) -> usize {
        self.p.nrows()
    }
}

/// Left fixed vector of P together with the residual ‖π^T P − π^T‖₂ it
/// achieves; callers decide whether the residual is acceptable.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryDistribution {
    pi: Array1<f64>,
    residual: f64,
}

impl StationaryDistribution {
    pub fn as_array(&self) -> &Array1<f64> {
        &self.pi
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn into_array(self) -> Array1<f64> {
        self.pi
    }
}

/// First-arrival probabilities F_k(i,j) = P[T_ij = k] for k = 1..=horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct HittingProbTensor {
    slices: Vec<Array2<f64>>,
    heterogeneous: bool,
}

impl HittingProbTensor {
    /// F_k as a matrix; k is 1-based.
    pub fn slice(&self, k: usize) -> &Array2<f64> {
        &self.slices[k - 1]
    }

    pub fn slices(&self) -> &[Array2<f64>] {
        &self.slices
    }

    pub fn horizon(&self) -> usize {
        self.slices.len()
    }

    pub fn is_heterogeneous(&self) -> bool {
        self.heterogeneous
    }
}

/// P = rownormalize(|Q ∘ A|): mask by the adjacency, take absolute values,
/// divide each row by its sum.
pub fn parametrize(q: &ParamMatrix, a: &Array2<u8>) -> Result<TransitionMatrix> {
    let n = q.as_array().nrows();
    if a.nrows() != n || a.ncols() != n || q.as_array().ncols() != n {
        return Err(Error::DimensionMismatch(format!(
            "Q is {}x{}, A is {}x{}",
            q.as_array().nrows(),
            q.as_array().ncols(),
            a.nrows(),
            a.ncols()
        )));
    }
    let mut p = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let mut sum = 0.0;
        for j in 0..n {
            if a[(i, j)] == 1 {
                let v = q.as_array()[(i, j)].abs();
                p[(i, j)] = v;
                sum += v;
            }
        }
        if sum < 1e-30 {
            return Err(Error::DegenerateRow(i));
        }
        for j in 0..n {
            p[(i, j)] /= sum;
        }
    }
    Ok(TransitionMatrix::from_normalized(p))
}

/// Power iteration π ← π^T P / sum(π^T P) from the uniform vector, run for
/// exactly `max_iter` steps (no early exit, so reruns and the unrolled
/// gradient see the identical computation). Non-convergence shows up in the
/// reported residual rather than as an error.
pub fn stationary_power(p: &TransitionMatrix, max_iter: usize) -> StationaryDistribution {
    let n = p.node_count();
    let mut pi = Array1::<f64>::from_elem(n, 1.0 / n as f64);
    for _ in 0..max_iter {
        let next = left_multiply(&pi, p.as_array());
        let sum = next.sum();
        pi = next.mapv(|x| x / sum);
    }
    let residual = stationary_residual(&pi, p.as_array());
    StationaryDistribution { pi, residual }
}

/// Exact stationary distribution via the linear system {π^T(P−I) = 0,
/// π^T 1 = 1}, solved by replacing one row of the transposed system with
/// the normalization constraint.
pub fn stationary_direct(p: &TransitionMatrix) -> Result<StationaryDistribution> {
    let n = p.node_count();
    let mut a = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = p.as_array()[(j, i)] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = Array1::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let lu = Lu::factor(&a).map_err(|_| reducible("direct stationary solve is singular"))?;
    let pi = lu.solve(&b);
    if pi.iter().any(|&x| !x.is_finite() || x < -1e-12) {
        return Err(reducible("direct stationary solve left the simplex"));
    }
    let residual = stationary_residual(&pi, p.as_array());
    if residual > 1e-12 {
        return Err(reducible(&format!(
            "direct stationary residual {residual:e}"
        )));
    }
    Ok(StationaryDistribution { pi, residual })
}

fn reducible(detail: &str) -> Error {
    Error::ReducibleChain(detail.to_string())
}

fn left_multiply(pi: &Array1<f64>, p: &Array2<f64>) -> Array1<f64> {
    let n = p.nrows();
    let mut out = Array1::<f64>::zeros(n);
    for j in 0..n {
        let mut acc = 0.0;
        for i in 0..n {
            acc += pi[i] * p[(i, j)];
        }
        out[j] = acc;
    }
    out
}

fn stationary_residual(pi: &Array1<f64>, p: &Array2<f64>) -> f64 {
    let prod = left_multiply(pi, p);
    let mut acc = 0.0;
    for j in 0..p.nrows() {
        let d = prod[j] - pi[j];
        acc += d * d;
    }
    acc.sqrt()
}

/// One slice of the first-arrival recursion:
///
///   F_k(i,l) = P(i,l)·1{w_il = k} + Σ_{j≠l, 1 ≤ w_ij < k} P(i,j)·F_{k−w_ij}(j,l)
///
/// `recent` holds F_{k−recent.len()}, …, F_{k−1} in ascending order and must
/// cover at least min(k−1, max edge weight) slices, so F_{k−w} is
/// `recent[recent.len()−w]`. Entries with w = 0 mark absent edges. The
/// homogeneous recursion is this same function with an all-ones weight
/// matrix, which keeps the two travel-time modes bitwise identical there;
/// term order (direct arrival first, then j ascending) is part of that
/// contract.
pub(crate) fn first_arrival_step(
    p: &Array2<f64>,
    w: &Array2<u32>,
    k: u32,
    recent: &[&Array2<f64>],
) -> Array2<f64> {
    let n = p.nrows();
    let depth = recent.len();
    let mut f = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for l in 0..n {
            let mut acc = 0.0;
            if w[(i, l)] == k {
                acc += p[(i, l)];
            }
            for j in 0..n {
                if j == l {
                    continue;
                }
                let wij = w[(i, j)] as usize;
                if wij == 0 || wij > depth {
                    continue;
                }
                acc += p[(i, j)] * recent[depth - wij][(j, l)];
            }
            f[(i, l)] = acc;
        }
    }
    f
}

fn hitting_probs_impl(p: &Array2<f64>, w: &Array2<u32>, horizon: usize) -> Vec<Array2<f64>> {
    let mut slices: Vec<Array2<f64>> = Vec::with_capacity(horizon);
    for k in 1..=horizon {
        let recent: Vec<&Array2<f64>> = slices.iter().collect();
        slices.push(first_arrival_step(p, w, k as u32, &recent));
    }
    slices
}

/// First-arrival probabilities under unit travel times: F_1 = P and
/// F_k(i,j) = Σ_{m≠j} P(i,m) F_{k−1}(m,j).
pub fn hitting_probs_homogeneous(p: &TransitionMatrix, horizon: usize) -> HittingProbTensor {
    let n = p.node_count();
    let w = Array2::<u32>::ones((n, n));
    HittingProbTensor {
        slices: hitting_probs_impl(p.as_array(), &w, horizon),
        heterogeneous: false,
    }
}

/// First-arrival probabilities under integer travel times; the horizon
/// counts elapsed time periods, not hops.
pub fn hitting_probs_heterogeneous(
    p: &TransitionMatrix,
    w: &Array2<u32>,
    horizon: usize,
) -> HittingProbTensor {
    HittingProbTensor {
        slices: hitting_probs_impl(p.as_array(), w, horizon),
        heterogeneous: true,
    }
}

/// Mean hitting times in hops: column j solves
/// M(i,j) = Σ_m P(i,m)(1 + 1{m≠j} M(m,j)), one LU solve per target.
pub fn mean_hitting_hops(p: &TransitionMatrix) -> Result<Array2<f64>> {
    let n = p.node_count();
    let ones = Array2::<f64>::ones((n, n));
    mean_hitting_impl(p.as_array(), &ones)
}

/// Mean elapsed travel time to first arrival: column j solves
/// N(i,j) = Σ_m P(i,m)(w_im + 1{m≠j} N(m,j)).
pub fn mean_hitting_weighted(p: &TransitionMatrix, w: &Array2<f64>) -> Result<Array2<f64>> {
    mean_hitting_impl(p.as_array(), w)
}

fn mean_hitting_impl(p: &Array2<f64>, w: &Array2<f64>) -> Result<Array2<f64>> {
    let n = p.nrows();
    let mut rhs = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut acc = 0.0;
        for m in 0..n {
            acc += p[(i, m)] * w[(i, m)];
        }
        rhs[i] = acc;
    }
    let mut out = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        // A_j = I − P with column j zeroed; singular A_j means j is not
        // reachable from somewhere, i.e. the chain is reducible.
        let mut a = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for m in 0..n {
                let masked = if m == j { 0.0 } else { p[(i, m)] };
                a[(i, m)] = if i == m { 1.0 - masked } else { -masked };
            }
        }
        let lu = Lu::factor(&a)?;
        let col = lu.solve(&rhs);
        for i in 0..n {
            out[(i, j)] = col[i];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tm(p: Array2<f64>) -> TransitionMatrix {
        TransitionMatrix::new(p).unwrap()
    }

    #[test]
    fn parametrize_three_steps_by_hand() {
        let q = ParamMatrix::new(array![[1.0, -2.0], [3.0, 0.0]]).unwrap();
        let a = array![[1, 1], [1, 1]];
        let p = parametrize(&q, &a).unwrap();
        let expect = array![[1.0 / 3.0, 2.0 / 3.0], [1.0, 0.0]];
        assert_eq!(p.as_array(), &expect);
    }

    #[test]
    fn parametrize_uniform_by_symmetry() {
        let q = ParamMatrix::new(Array2::ones((3, 3))).unwrap();
        let a = Array2::<u8>::ones((3, 3));
        let p = parametrize(&q, &a).unwrap();
        for x in p.as_array() {
            assert_eq!(*x, 1.0 / 3.0);
        }
    }

    #[test]
    fn parametrize_degenerate_row_is_an_error() {
        let q = ParamMatrix::new(array![[0.0, 1.0], [0.0, 7.0]]).unwrap();
        let a = array![[1, 1], [1, 0]];
        let err = parametrize(&q, &a).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow(1)), "{err}");
    }

    #[test]
    fn power_iteration_keeps_uniform_fixed_for_doubly_stochastic() {
        let p = tm(Array2::from_elem((4, 4), 0.25));
        for iters in [0, 1, 17] {
            let pi = stationary_power(&p, iters);
            assert_eq!(pi.as_array(), &Array1::from_elem(4, 0.25));
        }
        let cycle = tm(array![[0.0, 1.0], [1.0, 0.0]]);
        let pi = stationary_power(&cycle, 200);
        assert_eq!(pi.as_array(), &array![0.5, 0.5]);
    }

    #[test]
    fn power_iteration_matches_hand_solved_fixed_point() {
        let p = tm(array![[0.9, 0.1], [0.5, 0.5]]);
        let pi = stationary_power(&p, 200);
        assert!((pi.as_array()[0] - 5.0 / 6.0).abs() < 1e-12);
        assert!((pi.as_array()[1] - 1.0 / 6.0).abs() < 1e-12);
        assert!(pi.residual() < 1e-12);
    }

    #[test]
    fn direct_solve_matches_hand_solved_fixed_point() {
        let p = tm(array![[0.9, 0.1], [0.5, 0.5]]);
        let pi = stationary_direct(&p).unwrap();
        assert!((pi.as_array()[0] - 5.0 / 6.0).abs() < 1e-14);
        assert!((pi.as_array()[1] - 1.0 / 6.0).abs() < 1e-14);
        let uniform = tm(Array2::from_elem((3, 3), 1.0 / 3.0));
        let pi = stationary_direct(&uniform).unwrap();
        for x in pi.as_array() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn direct_solve_rejects_reducible_chain() {
        let p = tm(array![[1.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(
            stationary_direct(&p),
            Err(Error::ReducibleChain(_))
        ));
    }

    #[test]
    fn homogeneous_two_step_arrivals_by_path_enumeration() {
        let p = tm(array![[0.5, 0.5], [0.5, 0.5]]);
        let f = hitting_probs_homogeneous(&p, 2);
        assert_eq!(f.slice(1), p.as_array());
        for x in f.slice(2) {
            assert_eq!(*x, 0.25);
        }
    }

    #[test]
    fn homogeneous_deterministic_cycle() {
        let p = tm(array![[0.0, 1.0], [1.0, 0.0]]);
        let f = hitting_probs_homogeneous(&p, 2);
        assert_eq!(f.slice(1), &array![[0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(f.slice(2), &array![[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn heterogeneous_two_minute_legs() {
        let p = tm(array![[0.0, 1.0], [1.0, 0.0]]);
        let w = array![[0u32, 2], [2, 0]];
        let f = hitting_probs_heterogeneous(&p, &w, 4);
        assert_eq!(f.slice(2)[(0, 1)], 1.0);
        assert_eq!(f.slice(4)[(0, 0)], 1.0);
        let total: f64 = (1..=4).map(|k| f.slice(k).sum()).sum();
        assert_eq!(total, 4.0, "only the four deterministic arrivals");
    }

    #[test]
    fn heterogeneous_with_unit_weights_is_bitwise_homogeneous() {
        let q = ParamMatrix::new(array![
            [0.3, 1.7, 0.2, 0.9, 0.4],
            [1.1, 0.6, 0.8, 0.1, 0.5],
            [0.7, 0.9, 1.3, 0.2, 0.8],
            [0.2, 0.4, 0.6, 0.8, 1.0],
            [1.5, 0.3, 0.9, 0.7, 0.1],
        ])
        .unwrap();
        let a = Array2::<u8>::ones((5, 5));
        let p = parametrize(&q, &a).unwrap();
        let hom = hitting_probs_homogeneous(&p, 20);
        let het = hitting_probs_heterogeneous(&p, &Array2::<u32>::ones((5, 5)), 20);
        for k in 1..=20 {
            let (h, g) = (hom.slice(k), het.slice(k));
            for (x, y) in h.iter().zip(g.iter()) {
                assert_eq!(x.to_bits(), y.to_bits(), "k={k}");
            }
        }
    }

    #[test]
    fn cumulative_arrival_mass_is_monotone_and_bounded() {
        let p = tm(array![[0.2, 0.8], [0.6, 0.4]]);
        let f = hitting_probs_homogeneous(&p, 60);
        for i in 0..2 {
            for j in 0..2 {
                let mut cum = 0.0;
                for k in 1..=60 {
                    cum += f.slice(k)[(i, j)];
                    assert!(cum <= 1.0 + 1e-12);
                }
                assert!(cum > 0.999);
            }
        }
    }

    #[test]
    fn mean_hitting_hops_hand_solves() {
        let cycle = tm(array![[0.0, 1.0], [1.0, 0.0]]);
        let m = mean_hitting_hops(&cycle).unwrap();
        assert_eq!(m, array![[2.0, 1.0], [1.0, 2.0]]);
        let uniform = tm(array![[0.5, 0.5], [0.5, 0.5]]);
        let m = mean_hitting_hops(&uniform).unwrap();
        for x in &m {
            assert!((x - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_hitting_weighted_two_minute_legs() {
        let cycle = tm(array![[0.0, 1.0], [1.0, 0.0]]);
        let w = array![[0.0, 2.0], [2.0, 0.0]];
        let n = mean_hitting_weighted(&cycle, &w).unwrap();
        assert_eq!(n, array![[4.0, 2.0], [2.0, 4.0]]);
        let ones = Array2::<f64>::ones((2, 2));
        let m = mean_hitting_hops(&cycle).unwrap();
        assert_eq!(mean_hitting_weighted(&cycle, &ones).unwrap(), m);
    }

    #[test]
    fn mean_hitting_consistent_with_arrival_distribution() {
        let p = tm(array![[0.2, 0.8], [0.6, 0.4]]);
        let m = mean_hitting_hops(&p).unwrap();
        let horizon = 400;
        let f = hitting_probs_homogeneous(&p, horizon);
        for i in 0..2 {
            for j in 0..2 {
                let mut mean = 0.0;
                let mut mass = 0.0;
                for k in 1..=horizon {
                    mean += k as f64 * f.slice(k)[(i, j)];
                    mass += f.slice(k)[(i, j)];
                }
                assert!(1.0 - mass < 1e-6, "tail mass {}", 1.0 - mass);
                assert!((mean - m[(i, j)]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn mean_hitting_rejects_reducible_chain() {
        let p = tm(array![[1.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(
            mean_hitting_hops(&p),
            Err(Error::ReducibleChain(_))
        ));
    }

    #[test]
    fn transition_matrix_validation() {
        assert!(TransitionMatrix::new(array![[0.5, 0.6], [0.5, 0.5]]).is_err());
        assert!(TransitionMatrix::new(array![[-0.1, 1.1], [0.5, 0.5]]).is_err());
        let nearly = array![[0.5 + 3e-10, 0.5], [0.5, 0.5]];
        let p = TransitionMatrix::new(nearly).unwrap();
        for i in 0..2 {
            let s: f64 = (0..2).map(|j| p.as_array()[(i, j)]).sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }
}
