//! Small dense linear-algebra kernels: Householder QR with thin-Q formation,
//! partially pivoted LU, and power iteration. Problem sizes here stay in the
//! hundreds, so dense routines are the right tool.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Relative tolerance on the R diagonal below which a matrix is declared
/// rank deficient.
pub const RANK_TOL: f64 = 1e-10;

/// Thin QR factorization of an m x n matrix (m >= n) by Householder
/// reflections: `a = q * r` with `q` m x n orthonormal and `r` n x n upper
/// triangular.
pub fn householder_qr(a: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (m, n) = a.dim();
    assert!(m >= n, "householder_qr requires m >= n, got {m} x {n}");
    let mut work = a.clone();
    // Reflector k lives in column k, rows k.., with its scale in betas[k].
    let mut betas = vec![0.0_f64; n];
    for k in 0..n {
        let mut norm2 = 0.0;
        for i in k..m {
            norm2 += work[[i, k]] * work[[i, k]];
        }
        let norm = norm2.sqrt();
        if norm == 0.0 {
            betas[k] = 0.0;
            continue;
        }
        let alpha = if work[[k, k]] >= 0.0 { -norm } else { norm };
        let v0 = work[[k, k]] - alpha;
        // v = (x - alpha e1), normalized so v[0] = 1.
        let mut vtv = 1.0;
        for i in k + 1..m {
            let vi = work[[i, k]] / v0;
            work[[i, k]] = vi;
            vtv += vi * vi;
        }
        betas[k] = 2.0 / vtv;
        work[[k, k]] = alpha;
        for j in k + 1..n {
            let mut dot = work[[k, j]];
            for i in k + 1..m {
                dot += work[[i, k]] * work[[i, j]];
            }
            let scale = betas[k] * dot;
            work[[k, j]] -= scale;
            for i in k + 1..m {
                let vik = work[[i, k]];
                work[[i, j]] -= scale * vik;
            }
        }
    }
    let mut r = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            r[[i, j]] = work[[i, j]];
        }
    }
    // Form the thin Q by applying H_0 .. H_{n-1} to the first n columns of I
    // in reverse order.
    let mut q = Array2::zeros((m, n));
    for j in 0..n {
        q[[j, j]] = 1.0;
    }
    for k in (0..n).rev() {
        if betas[k] == 0.0 {
            continue;
        }
        for j in 0..n {
            let mut dot = q[[k, j]];
            for i in k + 1..m {
                dot += work[[i, k]] * q[[i, j]];
            }
            let scale = betas[k] * dot;
            q[[k, j]] -= scale;
            for i in k + 1..m {
                let vik = work[[i, k]];
                q[[i, j]] -= scale * vik;
            }
        }
    }
    (q, r)
}

/// Checks the R diagonal of a QR factorization for rank deficiency.
pub fn check_rank(r: &Array2<f64>, rank_tol: f64) -> Result<()> {
    let n = r.nrows();
    let mut largest = 0.0_f64;
    for k in 0..n {
        largest = largest.max(r[[k, k]].abs());
    }
    for k in 0..n {
        let d = r[[k, k]].abs();
        if d <= rank_tol * largest {
            return Err(Error::RankDeficient { index: k, value: d });
        }
    }
    Ok(())
}

/// Solves `r * x = b` for upper-triangular `r`, overwriting nothing.
pub fn solve_upper(r: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = r.nrows();
    let mut x = b.clone();
    for i in (0..n).rev() {
        let mut s = x[i];
        for j in i + 1..n {
            s -= r[[i, j]] * x[j];
        }
        x[i] = s / r[[i, i]];
    }
    x
}

/// Solves `r' * x = b` (forward substitution on the transpose).
pub fn solve_upper_transposed(r: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = r.nrows();
    let mut x = b.clone();
    for i in 0..n {
        let mut s = x[i];
        for j in 0..i {
            s -= r[[j, i]] * x[j];
        }
        x[i] = s / r[[i, i]];
    }
    x
}

/// Moore-Penrose pseudo-inverse of a full-column-rank m x n matrix via QR:
/// `b = r^-1 q'`, so that `b * a = I` to working precision.
pub fn pinv_full_rank(a: &Array2<f64>, rank_tol: f64) -> Result<Array2<f64>> {
    let (m, n) = a.dim();
    if m < n {
        return Err(Error::DimensionMismatch(format!(
            "pseudo-inverse needs at least as many rows as columns, got {m} x {n}"
        )));
    }
    let (q, r) = householder_qr(a);
    check_rank(&r, rank_tol)?;
    let qt = q.t();
    let mut b = Array2::zeros((n, m));
    for col in 0..m {
        let rhs = qt.column(col).to_owned();
        let x = solve_upper(&r, &rhs);
        b.column_mut(col).assign(&x);
    }
    Ok(b)
}

/// LU factorization with partial pivoting; solves `a * x = b` for one or
/// more right-hand sides. Returns `SingularJacobian` when a pivot collapses.
pub struct LuFactor {
    lu: Array2<f64>,
    perm: Vec<usize>,
}

impl LuFactor {
    pub fn new(a: &Array2<f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::DimensionMismatch(format!(
                "LU needs a square matrix, got {} x {}",
                a.nrows(),
                a.ncols()
            )));
        }
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale: f64 = lu.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()));
        let tiny = f64::EPSILON * scale.max(1e-300) * n as f64;
        for k in 0..n {
            let mut pivot_row = k;
            let mut pivot_val = lu[[k, k]].abs();
            for i in k + 1..n {
                let v = lu[[i, k]].abs();
                if v > pivot_val {
                    pivot_val = v;
                    pivot_row = i;
                }
            }
            if pivot_val <= tiny {
                return Err(Error::SingularJacobian);
            }
            if pivot_row != k {
                perm.swap(k, pivot_row);
                for j in 0..n {
                    let tmp = lu[[k, j]];
                    lu[[k, j]] = lu[[pivot_row, j]];
                    lu[[pivot_row, j]] = tmp;
                }
            }
            let inv_pivot = 1.0 / lu[[k, k]];
            for i in k + 1..n {
                let factor = lu[[i, k]] * inv_pivot;
                lu[[i, k]] = factor;
                if factor != 0.0 {
                    for j in k + 1..n {
                        let lkj = lu[[k, j]];
                        lu[[i, j]] -= factor * lkj;
                    }
                }
            }
        }
        Ok(LuFactor { lu, perm })
    }

    pub fn solve(&self, b: &Array1<f64>) -> Array1<f64> {
        let n = self.lu.nrows();
        let mut x = Array1::zeros(n);
        for i in 0..n {
            x[i] = b[self.perm[i]];
        }
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[[i, j]] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[[i, j]] * x[j];
            }
            x[i] = s / self.lu[[i, i]];
        }
        x
    }
}

pub fn lu_solve(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    Ok(LuFactor::new(a)?.solve(b))
}

/// Largest eigenvalue of the symmetric positive semidefinite operator
/// `x -> op(x)` on R^dim, estimated by `iters` power-iteration steps from a
/// deterministic start vector.
pub fn power_iteration_lambda_max<F>(dim: usize, iters: usize, op: F) -> f64
where
    F: Fn(&Array1<f64>) -> Array1<f64>,
{
    // Small index-dependent tilt so the start is never orthogonal to the
    // dominant eigenvector by symmetry.
    let mut x = Array1::from_shape_fn(dim, |i| 1.0 + 1e-3 * i as f64);
    let norm = x.dot(&x).sqrt();
    x.mapv_inplace(|v| v / norm);
    let mut lambda = 0.0;
    for _ in 0..iters {
        let y = op(&x);
        lambda = x.dot(&y);
        let ynorm = y.dot(&y).sqrt();
        if ynorm == 0.0 {
            return 0.0;
        }
        x = y / ynorm;
    }
    lambda
}
