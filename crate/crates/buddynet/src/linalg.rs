//! Small dense linear algebra for the re-ranking plug-ins: Gauss-Jordan
//! inversion with partial pivoting and a cyclic Jacobi eigensolver for
//! symmetric matrices. Databases here are at most a few thousand entries, so
//! O(n³) closed forms double as exact oracles.

use crate::error::{Error, Result};

/// Invert a row-major n×n matrix. Errors on singular systems.
pub fn invert(a: &[f64], n: usize) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        // partial pivot
        let mut pivot = col;
        let mut best = m[col * n + col].abs();
        for row in col + 1..n {
            let v = m[row * n + col].abs();
            if v > best {
                best = v;
                pivot = row;
            }
        }
        if best < 1e-12 {
            return Err(Error::Domain {
                op: "invert",
                detail: format!("singular matrix (pivot {best:.3e} at column {col})"),
            });
        }
        if pivot != col {
            for j in 0..n {
                m.swap(col * n + j, pivot * n + j);
                inv.swap(col * n + j, pivot * n + j);
            }
        }
        let diag = m[col * n + col];
        for j in 0..n {
            m[col * n + j] /= diag;
            inv[col * n + j] /= diag;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = m[row * n + col];
            if factor == 0.0 {
                continue;
            }
            for j in 0..n {
                m[row * n + j] -= factor * m[col * n + j];
                inv[row * n + j] -= factor * inv[col * n + j];
            }
        }
    }
    Ok(inv)
}

/// y = A·x for row-major A.
pub fn mat_vec(a: &[f64], x: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = a[i * n..(i + 1) * n].iter().zip(x).map(|(m, v)| m * v).sum();
    }
    y
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns of a row-major matrix).
pub fn jacobi_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off: f64 = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if off.sqrt() < 1e-13 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
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
    let eigvals: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    (eigvals, v)
}

/// exp(-t·A)·x for symmetric A, via eigendecomposition.
pub fn sym_matrix_exp_apply(a: &[f64], n: usize, t: f64, x: &[f64]) -> Vec<f64> {
    let (vals, vecs) = jacobi_eigen(a, n);
    // coords = Qᵀ x
    let mut coords = vec![0.0; n];
    for j in 0..n {
        coords[j] = (0..n).map(|i| vecs[i * n + j] * x[i]).sum();
    }
    for (c, lam) in coords.iter_mut().zip(&vals) {
        *c *= (-t * lam).exp();
    }
    // y = Q coords
    let mut y = vec![0.0; n];
    for i in 0..n {
        y[i] = (0..n).map(|j| vecs[i * n + j] * coords[j]).sum();
    }
    y
}
