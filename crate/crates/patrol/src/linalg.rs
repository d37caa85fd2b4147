//! Small dense linear-algebra helpers: LU factorization with partial
//! pivoting and triangular solves. Problem sizes here are tiny (n ≈ 12),
//! so exactness and determinism matter more than speed.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// LU factorization with partial pivoting, stored in-place.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Array2<f64>,
    perm: Vec<usize>,
}

const PIVOT_TOL: f64 = 1e-13;

impl Lu {
    /// Factor a square matrix. Fails on a (numerically) singular pivot.
    pub fn factor(a: &Array2<f64>) -> Result<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "LU requires a square matrix");
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();

        for col in 0..n {
            let mut pivot_row = col;
            let mut pivot_val = lu[(col, col)].abs();
            for row in col + 1..n {
                let v = lu[(row, col)].abs();
                if v > pivot_val {
                    pivot_val = v;
                    pivot_row = row;
                }
            }
            if pivot_val < PIVOT_TOL {
                return Err(Error::ReducibleChain(format!(
                    "singular linear system (pivot {pivot_val:.3e} at column {col})"
                )));
            }
            if pivot_row != col {
                perm.swap(col, pivot_row);
                for k in 0..n {
                    let tmp = lu[(col, k)];
                    lu[(col, k)] = lu[(pivot_row, k)];
                    lu[(pivot_row, k)] = tmp;
                }
            }
            let inv_pivot = 1.0 / lu[(col, col)];
            for row in col + 1..n {
                let factor = lu[(row, col)] * inv_pivot;
                lu[(row, col)] = factor;
                for k in col + 1..n {
                    lu[(row, k)] -= factor * lu[(col, k)];
                }
            }
        }
        Ok(Self { lu, perm })
    }

    /// Solve A x = b.
    pub fn solve(&self, b: &Array1<f64>) -> Array1<f64> {
        let n = self.lu.nrows();
        let mut x = Array1::zeros(n);
        for i in 0..n {
            x[i] = b[self.perm[i]];
        }
        // forward substitution (unit lower triangle)
        for i in 1..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s;
        }
        // back substitution
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[(i, j)] * x[j];
            }
            x[i] = s / self.lu[(i, i)];
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn solve(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
        Ok(Lu::factor(a)?.solve(b))
    }

    #[test]
    fn solves_small_system() {
        let a = array![[2.0, 1.0], [1.0, 3.0]];
        let b = array![3.0, 5.0];
        let x = solve(&a, &b).unwrap();
        // exact solution [4/5, 7/5]
        assert!((x[0] - 0.8).abs() < 1e-14);
        assert!((x[1] - 1.4).abs() < 1e-14);
    }

    #[test]
    fn rejects_singular() {
        let a = array![[1.0, 2.0], [2.0, 4.0]];
        let b = array![1.0, 2.0];
        assert!(solve(&a, &b).is_err());
    }

    #[test]
    fn transpose_solve_matches_explicit_transpose() {
        let a = array![[4.0, 1.0, 0.5], [0.0, 3.0, 1.0], [2.0, 0.0, 5.0]];
        let b = array![1.0, 2.0, 3.0];
        let x = Lu::factor(&a.t().to_owned()).unwrap().solve(&b);
        let r = a.t().dot(&x);
        for i in 0..3 {
            assert!((r[i] - b[i]).abs() < 1e-12);
        }
    }
}
