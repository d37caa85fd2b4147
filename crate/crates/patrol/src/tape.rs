//! Reverse-mode tape over matrix-level primitives. The objective graphs are
//! shallow and fixed-shape, so each node stores its forward value and a
//! closure that scatters the node's adjoint to its parents; every output is
//! checked finite as it is produced so a failing primitive is named.

use std::rc::Rc;

use ndarray::{Array1, Array2};

use crate::chain::first_arrival_step;
use crate::error::{Error, Result};
use crate::linalg::Lu;
use crate::objective::{config_nodes, lowest_s_indices, AttackDurations};

#[derive(Debug, Clone)]
pub(crate) enum Value {
    Scalar(f64),
    Vector(Array1<f64>),
    Matrix(Array2<f64>),
}

impl Value {
    fn zero_like(&self) -> Value {
        match self {
            Value::Scalar(_) => Value::Scalar(0.0),
            Value::Vector(v) => Value::Vector(Array1::zeros(v.len())),
            Value::Matrix(m) => Value::Matrix(Array2::zeros(m.dim())),
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            Value::Scalar(s) => s.is_finite(),
            Value::Vector(v) => v.iter().all(|x| x.is_finite()),
            Value::Matrix(m) => m.iter().all(|x| x.is_finite()),
        }
    }

    fn scalar(&self) -> f64 {
        match self {
            Value::Scalar(s) => *s,
            _ => unreachable!("scalar node expected"),
        }
    }

    fn vector(&self) -> &Array1<f64> {
        match self {
            Value::Vector(v) => v,
            _ => unreachable!("vector node expected"),
        }
    }

    fn matrix(&self) -> &Array2<f64> {
        match self {
            Value::Matrix(m) => m,
            _ => unreachable!("matrix node expected"),
        }
    }

    fn scalar_mut(&mut self) -> &mut f64 {
        match self {
            Value::Scalar(s) => s,
            _ => unreachable!("scalar node expected"),
        }
    }

    fn vector_mut(&mut self) -> &mut Array1<f64> {
        match self {
            Value::Vector(v) => v,
            _ => unreachable!("vector node expected"),
        }
    }

    fn matrix_mut(&mut self) -> &mut Array2<f64> {
        match self {
            Value::Matrix(m) => m,
            _ => unreachable!("matrix node expected"),
        }
    }
}

/// Scatters a node's adjoint into its parents' adjoints, given all forward
/// values, the node's own adjoint (cloned before the call so the slice may
/// be mutated), and the adjoint array.
type BackFn = Box<dyn Fn(&[Value], &Value, &mut [Value])>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct MVar(usize);
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct VVar(usize);
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct SVar(usize);

#[derive(Default)]
pub(crate) struct Tape {
    values: Vec<Value>,
    backs: Vec<Option<BackFn>>,
    ops: Vec<&'static str>,
}

/// Checkpoint stride for the fused return-entropy recursion: forward
/// slices are recomputed per 64-step segment in the backward pass.
const ENTROPY_STRIDE: usize = 64;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: &'static str, value: Value, back: Option<BackFn>) -> Result<usize> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op));
        }
        self.values.push(value);
        self.backs.push(back);
        self.ops.push(op);
        Ok(self.values.len() - 1)
    }

    pub fn scalar_value(&self, s: SVar) -> f64 {
        self.values[s.0].scalar()
    }

    #[cfg(test)]
    pub fn matrix_value(&self, m: MVar) -> &Array2<f64> {
        self.values[m.0].matrix()
    }

    /// Run the backward sweep from `root` and return all adjoints.
    pub fn backward(&self, root: SVar) -> Vec<Value> {
        let mut adjoints: Vec<Value> = self.values.iter().map(Value::zero_like).collect();
        *adjoints[root.0].scalar_mut() = 1.0;
        for i in (0..=root.0).rev() {
            if let Some(back) = &self.backs[i] {
                let own = adjoints[i].clone();
                back(&self.values, &own, &mut adjoints);
            }
        }
        adjoints
    }

    pub fn grad_of(&self, adjoints: &[Value], var: MVar) -> Array2<f64> {
        adjoints[var.0].matrix().clone()
    }

    pub fn leaf_matrix(&mut self, m: Array2<f64>) -> Result<MVar> {
        Ok(MVar(self.push("leaf_matrix", Value::Matrix(m), None)?))
    }

    pub fn leaf_vector(&mut self, v: Array1<f64>) -> Result<VVar> {
        Ok(VVar(self.push("leaf_vector", Value::Vector(v), None)?))
    }

    /// Y = |Q| ∘ A. The subgradient of |·| at 0 takes the positive branch.
    pub fn masked_abs(&mut self, q: MVar, a: &Array2<u8>) -> Result<MVar> {
        let qv = self.values[q.0].matrix();
        let n = qv.nrows();
        let mut y = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                if a[(i, j)] == 1 {
                    y[(i, j)] = qv[(i, j)].abs();
                }
            }
        }
        let qid = q.0;
        let a = a.clone();
        let back: BackFn = Box::new(move |values, adj, adjoints| {
            let g = adj.matrix();
            let qv = values[qid].matrix();
            let mut qbar = Array2::<f64>::zeros(qv.dim());
            for i in 0..qv.nrows() {
                for j in 0..qv.ncols() {
                    if a[(i, j)] == 1 {
                        let sign = if qv[(i, j)] >= 0.0 { 1.0 } else { -1.0 };
                        qbar[(i, j)] = sign * g[(i, j)];
                    }
                }
            }
            *adjoints[qid].matrix_mut() += &qbar;
        });
        Ok(MVar(self.push("masked_abs", Value::Matrix(y), Some(back))?))
    }

    /// P(i,j) = X(i,j) / Σ_m X(i,m); a row summing below 1e-30 is an error.
    pub fn row_normalize(&mut self, x: MVar) -> Result<MVar> {
        let xv = self.values[x.0].matrix();
        let n = xv.nrows();
        let mut p = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += xv[(i, j)];
            }
            if s < 1e-30 {
                return Err(Error::DegenerateRow(i));
            }
            for j in 0..n {
                p[(i, j)] = xv[(i, j)] / s;
            }
        }
        let xid = x.0;
        let id = self.values.len();
        let back: BackFn = Box::new(move |values, adj, adjoints| {
            let g = adj.matrix();
            let xv = values[xid].matrix();
            let pv = values[id].matrix();
            let n = xv.nrows();
            let mut xbar = Array2::<f64>::zeros((n, n));
            for i in 0..n {
                let mut s = 0.0;
                let mut gdotp = 0.0;
                for j in 0..n {
                    s += xv[(i, j)];
                    gdotp += g[(i, j)] * pv[(i, j)];
                }
                for m in 0..n {
                    xbar[(i, m)] = (g[(i, m)] - gdotp) / s;
                }
            }
            *adjoints[xid].matrix_mut() += &xbar;
        });
        Ok(MVar(self.push("row_normalize", Value::Matrix(p), Some(back))?))
    }

    /// Elementwise product with a constant matrix.
    pub fn mat_const_mul(&mut self, x: MVar, w: &Array2<f64>) -> Result<MVar> {
        let y = self.values[x.0].matrix() * w;
        let xid = x.0;
        let w = w.clone();
        let back: BackFn = Box::new(move |_values, adj, adjoints| {
            let g = adj.matrix();
            *adjoints[xid].matrix_mut() += &(g * &w);
        });
        Ok(MVar(self.push("mat_const_mul", Value::Matrix(y), Some(back))?))
    }

    /// y = M v.
    pub fn mat_vec(&mut self, m: MVar, v: VVar) -> Result<VVar> {
        let mv = self.values[m.0].matrix();
        let vv = self.values[v.0].vector();
        let n = mv.nrows();
        let mut y = Array1::<f64>::zeros(n);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..mv.ncols() {
                acc += mv[(i, j)] * vv[j];
            }
            y[i] = acc;
        }
        let (mid, vid) = (m.0, v.0);
        let back: BackFn = Box::new(move |values, adj, adjoints| {
            let g = adj.vector();
            let mv = values[mid].matrix();
            let vv = values[vid].vector();
            let (r, c) = mv.dim();
            let mut mbar = Array2::<f64>::zeros((r, c));
            let mut vbar = Array1::<f64>::zeros(c);
            for i in 0..r {
                for j in 0..c {
                    mbar[(i, j)] = g[i] * vv[j];
                    vbar[j] += mv[(i, j)] * g[i];
                }
            }
            *adjoints[mid].matrix_mut() += &mbar;
            *adjoints[vid].vector_mut() += &vbar;
        });
        Ok(VVar(self.push("mat_vec", Value::Vector(y), Some(back))?))
    }

    /// u = v^T M (one power-iteration multiply).
    pub fn vec_mat(&mut self, v: VVar, m: MVar) -> Result<VVar> {
        let vv = self.values[v.0].vector();
        let mv = self.values[m.0].matrix();
        let n = mv.ncols();
        let mut u = Array1::<f64>::zeros(n);
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..mv.nrows() {
                acc += vv[i] * mv[(i, j)];
            }
            u[j] = acc;
        }
        let (vid, mid) = (v.0, m.0);
        let back: BackFn = Box::new(move |values, adj, adjoints| {
            let g = adj.vector();
            let vv = values[vid].vector();
            let mv = values[mid].matrix();
            let (r, c) = mv.dim();
            let mut vbar = Array1::<f64>::zeros(r);
            let mut mbar = Array2::<f64>::zeros((r, c));
            for i in 0..r {
                let mut acc = 0.0;
                for j in 0..c {
                    acc += mv[(i, j)] * g[j];
                    mbar[(i, j)] = vv[i] * g[j];
                }
                vbar[i] = acc;
            }
            *adjoints[vid].vector_mut() += &vbar;
            *adjoints[mid].matrix_mut() += &mbar;
        });
        Ok(VVar(self.push("vec_mat", Value::Vector(u), Some(back))?))
    }

    /// y = v / Σ_i v_i (the power-iteration normalization).
    pub fn normalize_sum(&mut self, v: VVar) -> Result<VVar> {
        let vv = self.values[v.0].vector();
        let s = vv.sum();
        let y = vv.mapv(|x| x / s);
        let vid = v.0;
        let id = self.values.len();
        let back: BackFn = Box::new(move |values, adj, adjoints| {
            let g = adj.vector();
            let vv = values[vid].vector();
            let yv = values[id].vector();
            let s: f64 = vv.sum();
            let gdoty: f64 = g.iter().zip(yv.iter()).map(|(a, b)| a * b).sum();
            let mut vbar = Array1::<f64>::zeros(vv.len());
            for i in 0..vv.len() {
                vbar[i] = (g[i] - gdoty) / s;
            }
            *adjoints[vid].vector_mut() += &vbar;
        });
        Ok(VVar(self.push(
            "normalize_sum",
            Value::Vector(y),
            Some(back),
        )?))
    }

    pub fn vec_add(&mut self, a: VVar, b: VVar) -> Result<VVar> {
        let y = self.values[a.0].vector() + self.values[b.0].vector();
        let (aid, bid) = (a.0, b.0);
        let back: BackFn = Box::new(move |_values, adj, adjoints| {
            let g = adj.vector().clone();
            *adjoints[aid].vector_mut() += &g;
            *adjoints[bid].vector_mut() += &g;
        });
        Ok(VVar(self.push("vec_add", Value::Vector(y), Some(back))?))
    }

    pub fn vec_sub(&mut self, a: VVar, b: VVar) -> Result<VVar> {
        let y = self.values[a.0].vector() - self.values[b.0].vector();
        let (aid, bid) = (a.0, b.0);
        let back: BackFn = Box::new(move |_values, adj, adjoints| {
            let g = adj.vector().clone();
            *adjoints[aid].vector_mut() += &g;
            *adjoints[bid].vector_mut() -= &g;
        });
        Ok(VVar(self.push("vec_sub", Value::Vector(y), Some(back))?))
    }

    pub fn vec_scale(&mut self, v: VVar, c: f64) -> Result<VVar> {
        let y = self.values[v.0].vector().mapv(|x| c * x);
        let vid = v.0;
        let back: BackFn = Box::new(move |_values, adj, adjoints| {
            let g = adj.vector().mapv(|x| c * x);
            *adjoints[vid].vector_mut() += &g;
        });
        Ok(VVar(self.push("vec_scale", Value::Vector(y), Some(back))?))
    }

    pub fn dot(&mut self, a: VVar, b: VVar) -> Result<SVar> {
        let av = self.values[a.0].vector();
        let bv = self.values[b.0].vector();
        let y: f64 = av.iter().zip(bv.iter()).map(|(x, z)| x * z).sum();
        let (aid, bid) = (a.0, b.0);
        let back: BackFn = Box::new(move |values, adj, adjoints| {
            let g = adj.scalar();
            let av = values[aid].vector().clone();
            let bv = values[bid].vector().clone();
            *adjoints[aid].vector_mut() += &bv.mapv(|x| g * x);
            *adjoints[bid].vector_mut() += &av.mapv(|x| g * x);
        });
        Ok(SVar(self.push("dot", Value::Scalar(y), Some(back))?))
    }

    pub fn sum_sq(&mut self, v: VVar) -> Result<SVar> {
        let y: f64 = self.values[v.0].vector().iter().map(|x| x * x).sum();
        let vid = v.0;
        let back: BackFn = Box::new(move |values, adj, adjoints| {
            let g = adj.scalar();
            let vv = values[vid].vector().mapv(|x| 2.0 * g * x);
            *adjoints[vid].vector_mut() += &vv;
        });
        Ok(SVar(self.push("sum_sq", Value::Scalar(y), Some(back))?))
    }

    pub fn s_add(&mut self, a: SVar, b: SVar) -> Result<SVar> {
        let y = self.values[a.0].scalar() + self.values[b.0].scalar();
        let (aid, bid) = (a.0, b.0);
        let back: BackFn = Box::new(move |_values, adj, adjoints| {
            let g = adj.scalar();
            *adjoints[aid].scalar_mut() += g;
            *adjoints[bid].scalar_mut() += g;
        });
        Ok(SVar(self.push("s_add", Value::Scalar(y), Some(back))?))
    }

    pub fn s_mul(&mut self, a: SVar, b: SVar) -> Result<SVar> {
        let y = self.values[a.0].scalar() * self.values[b.0].scalar();
        let (aid, bid) = (a.0, b.0);
        let back: BackFn = Box::new(move |values, adj, adjoints| {
            let g = adj.scalar();
            let av = values[aid].scalar();
            let bv = values[bid].scalar();
            *adjoints[aid].scalar_mut() += g * bv;
            *adjoints[bid].scalar_mut() += g * av;
        });
        Ok(SVar(self.push("s_mul", Value::Scalar(y), Some(back))?))
    }

    pub fn s_scale(&mut self, a: SVar, c: f64) -> Result<SVar> {
        let y = c * self.values[a.0].scalar();
        let aid = a.0;
        let back: BackFn = Box::new(move |_values, adj, adjoints| {
            *adjoints[aid].scalar_mut() += c * adj.scalar();
        });
        Ok(SVar(self.push("s_scale", Value::Scalar(y), Some(back))?))
    }

    pub fn s_neg(&mut self, a: SVar) -> Result<SVar> {
        self.s_scale(a, -1.0)
    }

    /// Mean hitting times in hops: column j of the output solves
    /// (I − P·D_j) x = 1 with D_j zeroing column j. Backward: with
    /// g_j = A_j^{-T} M̄(:,j), scatter P̄(i,m) += g_j(i)·M(m,j) for m ≠ j.
    pub fn mht_solve(&mut self, p: MVar) -> Result<MVar> {
        let pv = self.values[p.0].matrix();
        let n = pv.nrows();
        let mut m = Array2::<f64>::zeros((n, n));
        let ones = Array1::<f64>::ones(n);
        for j in 0..n {
            let a = hitting_system(pv, j, false);
            let lu = Lu::factor(&a)?;
            let col = lu.solve(&ones);
            for i in 0..n {
                m[(i, j)] = col[i];
            }
        }
        let pid = p.0;
        let id = self.values.len();
        let back: BackFn = Box::new(move |values, adj, adjoints| {
            let g = adj.matrix();
            let pv = values[pid].matrix();
            let mv = values[id].matrix();
            let n = pv.nrows();
            let mut pbar = Array2::<f64>::zeros((n, n));
            for j in 0..n {
                let at = hitting_system(pv, j, true);
                let lu = Lu::factor(&at).expect("forward solve succeeded");
                let gcol = Array1::from_iter((0..n).map(|i| g[(i, j)]));
                let gj = lu.solve(&gcol);
                for i in 0..n {
                    for mcol in 0..n {
                        if mcol != j {
                            pbar[(i, mcol)] += gj[i] * mv[(mcol, j)];
                        }
                    }
                }
            }
            *adjoints[pid].matrix_mut() += &pbar;
        });
        Ok(MVar(self.push("mht_solve", Value::Matrix(m), Some(back))?))
    }

    /// First-arrival slices F_1..F_horizon as individual nodes (used by the
    /// capture objectives whose horizons are short).
    pub fn arrival_slices(
        &mut self,
        p: MVar,
        w: &Array2<u32>,
        horizon: usize,
    ) -> Result<Vec<MVar>> {
        let w = Rc::new(w.clone());
        let depth = w.iter().copied().max().unwrap_or(1).max(1) as usize;
        let mut out: Vec<MVar> = Vec::with_capacity(horizon);
        for k in 1..=horizon {
            let lo = out.len().saturating_sub(depth);
            let recent_ids: Vec<usize> = out[lo..].iter().map(|v| v.0).collect();
            let f = {
                let recent: Vec<&Array2<f64>> = recent_ids
                    .iter()
                    .map(|&rid| self.values[rid].matrix())
                    .collect();
                first_arrival_step(self.values[p.0].matrix(), &w, k as u32, &recent)
            };
            let pid = p.0;
            let wc = Rc::clone(&w);
            let rids = recent_ids;
            let ku = k as u32;
            let back: BackFn = Box::new(move |values, adj, adjoints| {
                let g = adj.matrix();
                let pv = values[pid].matrix();
                let n = pv.nrows();
                let depth = rids.len();
                let mut pbar = Array2::<f64>::zeros((n, n));
                let mut fbars: Vec<Array2<f64>> =
                    rids.iter().map(|_| Array2::zeros((n, n))).collect();
                for i in 0..n {
                    for l in 0..n {
                        let gil = g[(i, l)];
                        if gil == 0.0 {
                            continue;
                        }
                        if wc[(i, l)] == ku {
                            pbar[(i, l)] += gil;
                        }
                        for j in 0..n {
                            if j == l {
                                continue;
                            }
                            let wij = wc[(i, j)] as usize;
                            if wij == 0 || wij > depth {
                                continue;
                            }
                            let back_idx = depth - wij;
                            pbar[(i, j)] += gil * values[rids[back_idx]].matrix()[(j, l)];
                            fbars[back_idx][(j, l)] += pv[(i, j)] * gil;
                        }
                    }
                }
                *adjoints[pid].matrix_mut() += &pbar;
                for (idx, fb) in rids.iter().zip(fbars) {
                    *adjoints[*idx].matrix_mut() += &fb;
                }
            });
            let id = self.push("arrival_step", Value::Matrix(f), Some(back))?;
            out.push(MVar(id));
        }
        Ok(out)
    }

    /// Λ(i,j) = Σ_{k≤τ_j} F_k(i,j) from per-slice nodes.
    pub fn capture_from_slices(
        &mut self,
        slices: &[MVar],
        tau: &AttackDurations,
    ) -> Result<MVar> {
        let needed = tau.max() as usize;
        if slices.len() < needed {
            return Err(Error::HorizonTooSmall {
                needed,
                have: slices.len(),
            });
        }
        let n = self.values[slices[0].0].matrix().nrows();
        let mut lambda = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            for k in 1..=tau.durations()[j] as usize {
                for i in 0..n {
                    lambda[(i, j)] += self.values[slices[k - 1].0].matrix()[(i, j)];
                }
            }
        }
        let sids: Vec<usize> = slices.iter().map(|s| s.0).collect();
        let tau = tau.clone();
        let back: BackFn = Box::new(move |_values, adj, adjoints| {
            let g = adj.matrix();
            let n = g.nrows();
            for (k0, &sid) in sids.iter().enumerate() {
                let k = (k0 + 1) as u32;
                let mut any = false;
                let mut fbar = Array2::<f64>::zeros((n, n));
                for j in 0..n {
                    if tau.durations()[j] >= k {
                        any = true;
                        for i in 0..n {
                            fbar[(i, j)] = g[(i, j)];
                        }
                    }
                }
                if any {
                    *adjoints[sid].matrix_mut() += &fbar;
                }
            }
        });
        Ok(MVar(self.push(
            "capture_cumsum",
            Value::Matrix(lambda),
            Some(back),
        )?))
    }

    /// Team capture matrix Λ((i_1..i_R), j) = 1 − Π_r (1 − C^r(i_r, j))
    /// over lexicographic configurations; inputs are the per-robot
    /// cumulative capture matrices.
    pub fn team_capture(&mut self, cs: &[MVar]) -> Result<MVar> {
        let robots = cs.len();
        let n = self.values[cs[0].0].matrix().nrows();
        let rows = n.pow(robots as u32);
        let mut lambda = Array2::<f64>::zeros((rows, n));
        for c in 0..rows {
            let nodes = config_nodes(c, n, robots);
            for j in 0..n {
                let mut miss = 1.0;
                for (r, &i) in nodes.iter().enumerate() {
                    miss *= 1.0 - self.values[cs[r].0].matrix()[(i, j)];
                }
                lambda[(c, j)] = 1.0 - miss;
            }
        }
        let cids: Vec<usize> = cs.iter().map(|c| c.0).collect();
        let back: BackFn = Box::new(move |values, adj, adjoints| {
            let g = adj.matrix();
            let robots = cids.len();
            let n = values[cids[0]].matrix().nrows();
            let rows = n.pow(robots as u32);
            let mut cbars: Vec<Array2<f64>> =
                cids.iter().map(|_| Array2::zeros((n, n))).collect();
            for c in 0..rows {
                let nodes = config_nodes(c, n, robots);
                for j in 0..n {
                    let gcj = g[(c, j)];
                    if gcj == 0.0 {
                        continue;
                    }
                    for r in 0..robots {
                        let mut others = 1.0;
                        for (r2, &i2) in nodes.iter().enumerate() {
                            if r2 != r {
                                others *= 1.0 - values[cids[r2]].matrix()[(i2, j)];
                            }
                        }
                        cbars[r][(nodes[r], j)] += gcj * others;
                    }
                }
            }
            for (cid, cb) in cids.iter().zip(cbars) {
                *adjoints[*cid].matrix_mut() += &cb;
            }
        });
        Ok(MVar(self.push(
            "team_capture",
            Value::Matrix(lambda),
            Some(back),
        )?))
    }

    /// Mean of the s smallest entries; the selection is fixed at forward
    /// time (lowest row-major indices on ties), so the backward pass is the
    /// subgradient through the selected entries.
    pub fn lowest_s_mean(&mut self, lam: MVar, s: usize) -> Result<SVar> {
        let lv = self.values[lam.0].matrix();
        let picked = lowest_s_indices(lv, s);
        let y: f64 = picked.iter().map(|&(i, j)| lv[(i, j)]).sum::<f64>() / picked.len() as f64;
        let lid = lam.0;
        let back: BackFn = Box::new(move |_values, adj, adjoints| {
            let g = adj.scalar() / picked.len() as f64;
            let m = adjoints[lid].matrix_mut();
            for &(i, j) in &picked {
                m[(i, j)] += g;
            }
        });
        Ok(SVar(self.push("lowest_s_mean", Value::Scalar(y), Some(back))?))
    }

    /// Per-node return statistic S_i = Σ_{k≤horizon} F_k(i,i) ln F_k(i,i),
    /// fused over the whole recursion. Forward keeps a ring of the last
    /// w_max slices plus checkpoints every 64 steps; backward walks the
    /// segments in reverse, recomputing slice values between checkpoints
    /// and carrying slice adjoints across segment boundaries.
    pub fn return_entropy_profile(
        &mut self,
        p: MVar,
        w: &Array2<u32>,
        horizon: usize,
    ) -> Result<VVar> {
        let w = Rc::new(w.clone());
        let pv = self.values[p.0].matrix();
        let n = pv.nrows();
        let depth = w.iter().copied().max().unwrap_or(1).max(1) as usize;
        let mut ring: Vec<Array2<f64>> = Vec::new();
        let mut checkpoints: Vec<Vec<Array2<f64>>> = vec![ring.clone()];
        let mut s = Array1::<f64>::zeros(n);
        for k in 1..=horizon {
            let f = {
                let recent: Vec<&Array2<f64>> = ring.iter().collect();
                first_arrival_step(pv, &w, k as u32, &recent)
            };
            for i in 0..n {
                let v = f[(i, i)];
                if v >= 1e-300 {
                    s[i] += v * v.ln();
                }
            }
            if ring.len() == depth {
                ring.remove(0);
            }
            ring.push(f);
            if k % ENTROPY_STRIDE == 0 && k < horizon {
                checkpoints.push(ring.clone());
            }
        }
        let pid = p.0;
        let back: BackFn = Box::new(move |values, adj, adjoints| {
            let sbar = adj.vector();
            let pv = values[pid].matrix();
            let n = pv.nrows();
            let mut pbar = Array2::<f64>::zeros((n, n));
            // slice adjoints indexed by absolute k; only entries within
            // w_max of the current position are ever live
            let mut fbar: Vec<Option<Array2<f64>>> = vec![None; horizon + 1];
            let segments = checkpoints.len();
            for seg in (0..segments).rev() {
                let seg_start = seg * ENTROPY_STRIDE + 1;
                let seg_end = ((seg + 1) * ENTROPY_STRIDE).min(horizon);
                // recompute F_base..F_seg_end where base covers the ring
                let mut vals: Vec<Array2<f64>> = checkpoints[seg].clone();
                let base = seg_start - vals.len();
                for k in seg_start..=seg_end {
                    let need = (k - 1).min(depth);
                    let have = k - base;
                    let f = {
                        let recent: Vec<&Array2<f64>> =
                            vals[have - need..have].iter().collect();
                        first_arrival_step(pv, &w, k as u32, &recent)
                    };
                    vals.push(f);
                }
                for k in (seg_start..=seg_end).rev() {
                    let mut a = fbar[k]
                        .take()
                        .unwrap_or_else(|| Array2::zeros((n, n)));
                    let fk = &vals[k - base];
                    for i in 0..n {
                        let v = fk[(i, i)];
                        if v >= 1e-300 {
                            a[(i, i)] += sbar[i] * (v.ln() + 1.0);
                        }
                    }
                    let ku = k as u32;
                    for i in 0..n {
                        for l in 0..n {
                            let gil = a[(i, l)];
                            if gil == 0.0 {
                                continue;
                            }
                            if w[(i, l)] == ku {
                                pbar[(i, l)] += gil;
                            }
                            for j in 0..n {
                                if j == l {
                                    continue;
                                }
                                let wij = w[(i, j)] as usize;
                                if wij == 0 || wij >= k {
                                    continue;
                                }
                                pbar[(i, j)] += gil * vals[k - wij - base][(j, l)];
                                fbar[k - wij]
                                    .get_or_insert_with(|| Array2::zeros((n, n)))
                                    [(j, l)] += pv[(i, j)] * gil;
                            }
                        }
                    }
                }
            }
            *adjoints[pid].matrix_mut() += &pbar;
        });
        Ok(VVar(self.push(
            "return_entropy",
            Value::Vector(s),
            Some(back),
        )?))
    }
}

/// (I − P·D_j) or its transpose; D_j zeroes column j of P.
fn hitting_system(p: &Array2<f64>, j: usize, transpose: bool) -> Array2<f64> {
    let n = p.nrows();
    let mut a = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for m in 0..n {
            let masked = if m == j { 0.0 } else { p[(i, m)] };
            let v = if i == m { 1.0 - masked } else { -masked };
            if transpose {
                a[(m, i)] = v;
            } else {
                a[(i, m)] = v;
            }
        }
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference gradient of a tape-built scalar with respect to
    /// one leaf matrix.
    fn fd_grad(
        build: &dyn Fn(&mut Tape, MVar) -> SVar,
        q0: &Array2<f64>,
        h: f64,
    ) -> Array2<f64> {
        let mut g = Array2::<f64>::zeros(q0.dim());
        for i in 0..q0.nrows() {
            for j in 0..q0.ncols() {
                let eval = |delta: f64| {
                    let mut q = q0.clone();
                    q[(i, j)] += delta;
                    let mut tape = Tape::new();
                    let qv = tape.leaf_matrix(q).unwrap();
                    let root = build(&mut tape, qv);
                    tape.scalar_value(root)
                };
                g[(i, j)] = (eval(h) - eval(-h)) / (2.0 * h);
            }
        }
        g
    }

    fn tape_grad(build: &dyn Fn(&mut Tape, MVar) -> SVar, q0: &Array2<f64>) -> Array2<f64> {
        let mut tape = Tape::new();
        let qv = tape.leaf_matrix(q0.clone()).unwrap();
        let root = build(&mut tape, qv);
        let adj = tape.backward(root);
        tape.grad_of(&adj, qv)
    }

    fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs() / f64::max(1e-8, f64::max(x.abs(), y.abs())))
            .fold(0.0, f64::max)
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        // ‖Q‖² through sum_sq of the rows: gradient 2Q, exact to roundoff
        let build = |tape: &mut Tape, q: MVar| {
            let n = tape.matrix_value(q).nrows();
            let mut total = None;
            for i in 0..n {
                // row i extracted as e_i^T Q, squared and accumulated
                let ei = Array1::from_shape_fn(n, |k| if k == i { 1.0 } else { 0.0 });
                let e = tape.leaf_vector(ei).unwrap();
                let r = tape.vec_mat(e, q).unwrap();
                let sq = tape.sum_sq(r).unwrap();
                total = Some(match total {
                    None => sq,
                    Some(t) => tape.s_add(t, sq).unwrap(),
                });
            }
            total.unwrap()
        };
        let q = array![[1.5, -2.0], [0.3, 4.0]];
        let g = tape_grad(&build, &q);
        let expect = q.mapv(|x| 2.0 * x);
        assert!(max_rel_err(&g, &expect) < 1e-12);
        let fd = fd_grad(&build, &q, 1e-5);
        assert!(max_rel_err(&g, &fd) < 1e-9);
    }

    #[test]
    fn parametrization_gradient_matches_finite_differences() {
        let a = array![[1u8, 1, 1], [1, 0, 1], [1, 1, 1]];
        let build = move |tape: &mut Tape, q: MVar| {
            let x = tape.masked_abs(q, &a).unwrap();
            let p = tape.row_normalize(x).unwrap();
            let v = tape
                .leaf_vector(array![0.2, 0.5, 0.3])
                .unwrap();
            let u = tape.vec_mat(v, p).unwrap();
            let t = tape.leaf_vector(array![1.0, -2.0, 0.5]).unwrap();
            tape.dot(u, t).unwrap()
        };
        let q = array![[0.7, -1.2, 0.4], [0.9, 5.0, 1.1], [-0.3, 0.8, 0.6]];
        let g = tape_grad(&build, &q);
        let fd = fd_grad(&build, &q, 1e-6);
        assert!(max_rel_err(&g, &fd) < 1e-7, "{}", max_rel_err(&g, &fd));
        // masked coordinate carries no gradient
        assert_eq!(g[(1, 1)], 0.0);
    }

    #[test]
    fn mean_hitting_solve_gradient_matches_finite_differences() {
        let a = Array2::<u8>::ones((3, 3));
        let build = move |tape: &mut Tape, q: MVar| {
            let x = tape.masked_abs(q, &a).unwrap();
            let p = tape.row_normalize(x).unwrap();
            let m = tape.mht_solve(p).unwrap();
            let pi = tape.leaf_vector(array![0.5, 0.3, 0.2]).unwrap();
            let mp = tape.mat_vec(m, pi).unwrap();
            tape.dot(pi, mp).unwrap()
        };
        let q = array![[0.8, 0.4, 1.2], [0.5, 0.9, 0.3], [1.1, 0.2, 0.7]];
        let g = tape_grad(&build, &q);
        let fd = fd_grad(&build, &q, 1e-6);
        assert!(max_rel_err(&g, &fd) < 1e-6, "{}", max_rel_err(&g, &fd));
    }

    #[test]
    fn capture_pipeline_gradient_matches_finite_differences() {
        let a = Array2::<u8>::ones((3, 3));
        let mut w = Array2::<u32>::ones((3, 3));
        w[(0, 1)] = 2;
        w[(2, 0)] = 3;
        let tau = AttackDurations::new(vec![3, 2, 4]).unwrap();
        let build = move |tape: &mut Tape, q: MVar| {
            let x = tape.masked_abs(q, &a).unwrap();
            let p = tape.row_normalize(x).unwrap();
            let slices = tape.arrival_slices(p, &w, 4).unwrap();
            let lam = tape.capture_from_slices(&slices, &tau).unwrap();
            tape.lowest_s_mean(lam, 4).unwrap()
        };
        let q = array![[0.6, 1.4, 0.8], [0.9, 0.2, 1.3], [0.5, 1.0, 0.4]];
        let g = tape_grad(&build, &q);
        let fd = fd_grad(&build, &q, 1e-6);
        assert!(max_rel_err(&g, &fd) < 1e-6, "{}", max_rel_err(&g, &fd));
    }

    #[test]
    fn team_capture_gradient_matches_finite_differences() {
        // differentiate with respect to robot 1 while robot 2 stays fixed
        let a = Array2::<u8>::ones((2, 2));
        let w = Array2::<u32>::ones((2, 2));
        let tau = AttackDurations::uniform(2, 2).unwrap();
        let q2 = array![[0.3, 0.9], [1.1, 0.5]];
        let build = move |tape: &mut Tape, q: MVar| {
            let p1 = {
                let x = tape.masked_abs(q, &a).unwrap();
                tape.row_normalize(x).unwrap()
            };
            let q2v = tape.leaf_matrix(q2.clone()).unwrap();
            let p2 = {
                let x = tape.masked_abs(q2v, &a).unwrap();
                tape.row_normalize(x).unwrap()
            };
            let c1 = {
                let s = tape.arrival_slices(p1, &w, 2).unwrap();
                tape.capture_from_slices(&s, &tau).unwrap()
            };
            let c2 = {
                let s = tape.arrival_slices(p2, &w, 2).unwrap();
                tape.capture_from_slices(&s, &tau).unwrap()
            };
            let lam = tape.team_capture(&[c1, c2]).unwrap();
            tape.lowest_s_mean(lam, 2).unwrap()
        };
        let q = array![[0.7, 0.4], [0.6, 1.2]];
        let g = tape_grad(&build, &q);
        let fd = fd_grad(&build, &q, 1e-6);
        assert!(max_rel_err(&g, &fd) < 1e-6, "{}", max_rel_err(&g, &fd));
    }

    #[test]
    fn unrolled_power_iteration_gradient_matches_finite_differences() {
        let a = Array2::<u8>::ones((3, 3));
        let build = move |tape: &mut Tape, q: MVar| {
            let x = tape.masked_abs(q, &a).unwrap();
            let p = tape.row_normalize(x).unwrap();
            let mut pi = tape
                .leaf_vector(Array1::from_elem(3, 1.0 / 3.0))
                .unwrap();
            for _ in 0..40 {
                let u = tape.vec_mat(pi, p).unwrap();
                pi = tape.normalize_sum(u).unwrap();
            }
            let t = tape.leaf_vector(array![2.0, -1.0, 0.4]).unwrap();
            tape.dot(pi, t).unwrap()
        };
        let q = array![[0.9, 0.5, 1.3], [0.4, 1.1, 0.6], [0.8, 0.3, 1.0]];
        let g = tape_grad(&build, &q);
        let fd = fd_grad(&build, &q, 1e-6);
        assert!(max_rel_err(&g, &fd) < 1e-6, "{}", max_rel_err(&g, &fd));
    }

    #[test]
    fn fused_entropy_matches_per_slice_values_and_finite_differences() {
        // horizon spans several checkpoint segments to cover recomputation
        let a = Array2::<u8>::ones((3, 3));
        let mut w = Array2::<u32>::ones((3, 3));
        w[(0, 2)] = 2;
        w[(1, 0)] = 3;
        let horizon = 200;
        let pi = array![0.5, 0.25, 0.25];
        let build = {
            let w = w.clone();
            let pi = pi.clone();
            move |tape: &mut Tape, q: MVar| {
                let x = tape.masked_abs(q, &a).unwrap();
                let p = tape.row_normalize(x).unwrap();
                let s = tape.return_entropy_profile(p, &w, horizon).unwrap();
                let piv = tape.leaf_vector(pi.clone()).unwrap();
                let d = tape.dot(piv, s).unwrap();
                tape.s_neg(d).unwrap()
            }
        };
        let q = array![[0.8, 1.2, 0.5], [0.6, 0.9, 1.4], [1.0, 0.3, 0.7]];

        // value agrees with the plain streaming evaluation
        let mut tape = Tape::new();
        let qv = tape.leaf_matrix(q.clone()).unwrap();
        let root = build(&mut tape, qv);
        let qm = crate::chain::ParamMatrix::new(q.clone()).unwrap();
        let p = crate::chain::parametrize(&qm, &Array2::<u8>::ones((3, 3))).unwrap();
        let plain = crate::objective::j_rte_truncated(&p, &w, &pi, horizon);
        assert!((tape.scalar_value(root) - plain).abs() < 1e-12);

        let g = tape_grad(&build, &q);
        let fd = fd_grad(&build, &q, 1e-6);
        assert!(max_rel_err(&g, &fd) < 1e-6, "{}", max_rel_err(&g, &fd));
    }

    #[test]
    fn nonfinite_forward_names_the_operation() {
        let mut tape = Tape::new();
        let q = tape.leaf_matrix(array![[1e308, 1e308], [1.0, 1.0]]).unwrap();
        let v = tape.leaf_vector(array![1e308, 1.0]).unwrap();
        let err = tape.mat_vec(q, v).unwrap_err();
        match err {
            Error::NonFinite(op) => assert_eq!(op, "mat_vec"),
            other => panic!("unexpected error {other}"),
        }
    }
}
