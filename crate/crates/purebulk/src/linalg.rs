//! Dense linear algebra kernels: LU solve and a symmetric eigensolver.
//!
//! Small and self-contained on purpose; the matrices here are at most a few
//! hundred square (Newton systems, sample-by-sample Gram matrices).

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Solve `a x = b` by LU decomposition with partial pivoting.
pub fn lu_solve(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::ShapeMismatch(format!(
            "lu_solve needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if b.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "lu_solve: matrix is {n}x{n} but rhs has length {}",
            b.len()
        )));
    }
    let mut lu = a.clone();
    let mut x = b.clone();
    // a pivot this small relative to the matrix scale means rank deficiency
    let scale = lu.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let tol = 1e-13 * scale;

    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_abs = lu[[col, col]].abs();
        for r in col + 1..n {
            let v = lu[[r, col]].abs();
            if v > pivot_abs {
                pivot_abs = v;
                pivot_row = r;
            }
        }
        if pivot_abs <= tol {
            return Err(Error::Numerical("singular matrix in lu_solve".into()));
        }
        if pivot_row != col {
            for c in 0..n {
                lu.swap([col, c], [pivot_row, c]);
            }
            x.swap(col, pivot_row);
        }
        for r in col + 1..n {
            let f = lu[[r, col]] / lu[[col, col]];
            lu[[r, col]] = f;
            for c in col + 1..n {
                lu[[r, c]] -= f * lu[[col, c]];
            }
            x[r] -= f * x[col];
        }
    }
    for col in (0..n).rev() {
        x[col] /= lu[[col, col]];
        for r in 0..col {
            x[r] -= lu[[r, col]] * x[col];
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("lu_solve produced a non-finite solution".into()));
    }
    Ok(x)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order with matching eigenvector columns.
/// Each eigenvector is sign-fixed so its largest-magnitude entry is positive,
/// which keeps decompositions comparable across runs.
pub fn symmetric_eigen(a: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::ShapeMismatch(format!(
            "symmetric_eigen needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let sym_err = a
        .iter()
        .zip(a.t().iter())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if sym_err > 1e-10 * scale {
        return Err(Error::InvalidInput(format!(
            "symmetric_eigen: matrix is asymmetric by {sym_err:e}"
        )));
    }

    let mut m = a.clone();
    let mut v: Array2<f64> = Array2::eye(n);
    let off = |m: &Array2<f64>| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[[i, j]] * m[[i, j]];
                }
            }
        }
        s.sqrt()
    };
    let tol = 1e-14 * scale * n as f64;

    let mut converged = false;
    for _sweep in 0..100 {
        if off(&m) <= tol {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq.abs() <= tol / (n as f64 * n as f64).max(1.0) {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                let app = m[[p, p]];
                let aqq = m[[q, q]];
                m[[p, p]] = c * c * app - 2.0 * s * c * apq + s * s * aqq;
                m[[q, q]] = s * s * app + 2.0 * s * c * apq + c * c * aqq;
                m[[p, q]] = 0.0;
                m[[q, p]] = 0.0;
                for k in 0..n {
                    if k != p && k != q {
                        let akp = m[[k, p]];
                        let akq = m[[k, q]];
                        m[[k, p]] = c * akp - s * akq;
                        m[[p, k]] = m[[k, p]];
                        m[[k, q]] = s * akp + c * akq;
                        m[[q, k]] = m[[k, q]];
                    }
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged && off(&m) > tol {
        return Err(Error::Numerical(
            "symmetric_eigen did not converge in 100 sweeps".into(),
        ));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[[j, j]]
            .partial_cmp(&m[[i, i]])
            .expect("eigenvalues are finite")
    });
    let eigenvalues = Array1::from_iter(order.iter().map(|&i| m[[i, i]]));
    let mut eigenvectors = Array2::zeros((n, n));
    for (c, &i) in order.iter().enumerate() {
        let mut col = v.column(i).to_owned();
        let lead = col
            .iter()
            .enumerate()
            .fold((0usize, 0.0f64), |(bi, bv), (k, &x)| {
                if x.abs() > bv {
                    (k, x.abs())
                } else {
                    (bi, bv)
                }
            })
            .0;
        if col[lead] < 0.0 {
            col.mapv_inplace(|x| -x);
        }
        eigenvectors.column_mut(c).assign(&col);
    }
    Ok((eigenvalues, eigenvectors))
}
