//! Small dense symmetric linear algebra: Cholesky factorization and a cyclic
//! Jacobi eigensolver. Matrices are row-major `Vec<f64>` with explicit
//! dimension; everything here is O(n³) and intended for n ≤ a few hundred.

use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor L with A = L·Lᵀ.
///
/// Fails with the offending diagonal value if A is not positive definite.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::NotPositiveDefinite { min_eigenvalue: s });
                }
                l[i * n + j] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solves A x = b given the Cholesky factor L (forward then back substitution).
pub fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Dense inverse from the Cholesky factor, solving against unit vectors.
pub fn cholesky_inverse(l: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = cholesky_solve(l, n, &e);
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
        e[j] = 0.0;
    }
    inv
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns (eigenvalues descending, eigenvectors as row-major n×n with
/// column k the k-th eigenvector). Sweeps until the largest off-diagonal
/// magnitude falls below `tol`; errors after `max_sweeps`.
pub fn jacobi_eigen(
    a: &[f64],
    n: usize,
    tol: f64,
    max_sweeps: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let max_off = |m: &[f64]| -> f64 {
        let mut mx = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                mx = mx.max(m[p * n + q].abs());
            }
        }
        mx
    };

    let mut sweeps = 0;
    while max_off(&m) > tol {
        if sweeps >= max_sweeps {
            return Err(Error::NoConvergence(format!(
                "jacobi eigensolver: off-diagonal {:.3e} after {max_sweeps} sweeps",
                max_off(&m)
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= tol {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                // Smaller-angle rotation for stability.
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap());

    let eigvals: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut eigvecs = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        // Deterministic sign: largest-magnitude component positive.
        let mut best = 0;
        for r in 1..n {
            if v[r * n + old_col].abs() > v[best * n + old_col].abs() {
                best = r;
            }
        }
        let sign = if v[best * n + old_col] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            eigvecs[r * n + new_col] = sign * v[r * n + old_col];
        }
    }
    Ok((eigvals, eigvecs))
}

/// C = A·B for row-major square-free matrices (ra×ka)(ka×cb).
pub fn matmul(a: &[f64], ra: usize, ca: usize, b: &[f64], cb: usize) -> Vec<f64> {
    let mut out = vec![0.0; ra * cb];
    for i in 0..ra {
        for p in 0..ca {
            let av = a[i * ca + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..cb {
                out[i * cb + j] += av * b[p * cb + j];
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub fn matvec(a: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for i in 0..rows {
        let mut s = 0.0;
        for j in 0..cols {
            s += a[i * cols + j] * x[j];
        }
        out[i] = s;
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Gram–Schmidt orthonormalization of the rows of a (rows×cols, rows ≤ cols).
pub fn orthonormalize_rows(a: &mut [f64], rows: usize, cols: usize) -> Result<()> {
    for i in 0..rows {
        for j in 0..i {
            let proj = dot(&a[i * cols..(i + 1) * cols], &a[j * cols..(j + 1) * cols]);
            for k in 0..cols {
                a[i * cols + k] -= proj * a[j * cols + k];
            }
        }
        let nrm = norm2(&a[i * cols..(i + 1) * cols]);
        if nrm < 1e-12 {
            return Err(Error::Invalid(
                "orthonormalize_rows: rank-deficient input".into(),
            ));
        }
        for k in 0..cols {
            a[i * cols + k] /= nrm;
        }
    }
    Ok(())
}
