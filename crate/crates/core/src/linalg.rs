//! Small dense linear-algebra routines: solving, rank, spectral radius.
//!
//! Everything here is value-level (no tape involvement); matrices are at
//! most a few dozen rows, so plain Gaussian elimination is plenty.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Solve A X = B with partial-pivoted Gaussian elimination.
/// A is n x n, B is n x m (multiple right-hand sides).
pub fn solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.cols() != n {
        return Err(CoreError::shape(format!(
            "solve: matrix must be square, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if b.rows() != n {
        return Err(CoreError::shape(format!(
            "solve: rhs has {} rows, expected {}",
            b.rows(),
            n
        )));
    }
    let m = b.cols();
    let mut aug = a.data().to_vec();
    let mut rhs = b.data().to_vec();
    let scale = a.max_abs().max(1.0);

    for col in 0..n {
        let mut piv = col;
        let mut best = aug[col * n + col].abs();
        for r in col + 1..n {
            let v = aug[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-12 * scale {
            return Err(CoreError::numerical(format!(
                "solve: singular matrix (pivot {:.3e} at column {})",
                best, col
            )));
        }
        if piv != col {
            for j in 0..n {
                aug.swap(col * n + j, piv * n + j);
            }
            for j in 0..m {
                rhs.swap(col * m + j, piv * m + j);
            }
        }
        let d = aug[col * n + col];
        for r in col + 1..n {
            let f = aug[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                aug[r * n + j] -= f * aug[col * n + j];
            }
            for j in 0..m {
                rhs[r * m + j] -= f * rhs[col * m + j];
            }
        }
    }
    for col in (0..n).rev() {
        let d = aug[col * n + col];
        for j in 0..m {
            let mut s = rhs[col * m + j];
            for k in col + 1..n {
                s -= aug[col * n + k] * rhs[k * m + j];
            }
            rhs[col * m + j] = s / d;
        }
    }
    Tensor::new(vec![n, m], rhs)
}

/// Numerical rank by Gaussian elimination with full pivoting.
pub fn rank(a: &Tensor, rel_tol: f64) -> usize {
    let (n, m) = (a.rows(), a.cols());
    let mut w = a.data().to_vec();
    let scale = a.max_abs();
    if scale == 0.0 {
        return 0;
    }
    let tol = rel_tol * scale;
    let mut row_alive: Vec<usize> = (0..n).collect();
    let mut col_alive: Vec<usize> = (0..m).collect();
    let mut r = 0;
    while !row_alive.is_empty() && !col_alive.is_empty() {
        let mut best = 0.0;
        let (mut bi, mut bj) = (0, 0);
        for (ri, &i) in row_alive.iter().enumerate() {
            for (cj, &j) in col_alive.iter().enumerate() {
                let v = w[i * m + j].abs();
                if v > best {
                    best = v;
                    bi = ri;
                    bj = cj;
                }
            }
        }
        if best <= tol {
            break;
        }
        let pi = row_alive[bi];
        let pj = col_alive[bj];
        let pivot = w[pi * m + pj];
        row_alive.swap_remove(bi);
        col_alive.swap_remove(bj);
        for &i in &row_alive {
            let f = w[i * m + pj] / pivot;
            if f == 0.0 {
                continue;
            }
            for &j in &col_alive {
                w[i * m + j] -= f * w[pi * m + j];
            }
        }
        r += 1;
    }
    r
}

/// Stack lag matrices A_1..A_L into the dL x dL companion form
/// [A_1 .. A_L; I 0; 0 I 0; ...].
pub fn companion_matrix(mats: &[Tensor]) -> Result<Tensor> {
    if mats.is_empty() {
        return Err(CoreError::shape("companion_matrix: no lag matrices".to_string()));
    }
    let d = mats[0].rows();
    for m in mats {
        if m.rows() != d || m.cols() != d {
            return Err(CoreError::shape(format!(
                "companion_matrix: lag matrix {}x{}, expected {}x{}",
                m.rows(),
                m.cols(),
                d,
                d
            )));
        }
    }
    let l = mats.len();
    let n = d * l;
    let mut data = vec![0.0; n * n];
    for (tau, m) in mats.iter().enumerate() {
        for i in 0..d {
            for j in 0..d {
                data[i * n + tau * d + j] = m.at(i, j);
            }
        }
    }
    for i in 0..d * (l - 1) {
        data[(d + i) * n + i] = 1.0;
    }
    Tensor::new(vec![n, n], data)
}

/// Spectral radius via Gelfand's formula: repeatedly square a normalized
/// copy and accumulate the log of the norms, giving ||A^(2^k)||^(1/2^k).
pub fn spectral_radius(a: &Tensor) -> Result<f64> {
    let n = a.rows();
    if a.cols() != n {
        return Err(CoreError::shape(format!(
            "spectral_radius: {}x{} not square",
            a.rows(),
            a.cols()
        )));
    }
    if n == 1 {
        return Ok(a.data()[0].abs());
    }
    let frob = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut b = a.data().to_vec();
    let nb = frob(&b);
    if nb == 0.0 {
        return Ok(0.0);
    }
    for v in &mut b {
        *v /= nb;
    }
    let mut log_scale = nb.ln();
    let mut pow: f64 = 1.0;
    let mut tmp = vec![0.0; n * n];
    for _ in 0..32 {
        tmp.iter_mut().for_each(|v| *v = 0.0);
        crate::tensor::matmul_into(&b, &b, &mut tmp, n, n, n);
        let nn = frob(&tmp);
        if nn == 0.0 {
            return Ok(0.0);
        }
        for (bv, tv) in b.iter_mut().zip(tmp.iter()) {
            *bv = tv / nn;
        }
        log_scale = 2.0 * log_scale + nn.ln();
        pow *= 2.0;
    }
    Ok((log_scale / pow).exp())
}

/// Replace the columns of `a` (rows >= cols) with an orthonormal basis of
/// their span via modified Gram-Schmidt. Errors if the columns are
/// numerically dependent.
pub fn orthonormalize_columns(a: &mut Tensor) -> Result<()> {
    let (n, m) = (a.rows(), a.cols());
    if n < m {
        return Err(CoreError::shape(format!(
            "orthonormalize_columns: {}x{} has more columns than rows",
            n, m
        )));
    }
    let data = a.data_mut();
    for j in 0..m {
        for k in 0..j {
            let mut dot = 0.0;
            for i in 0..n {
                dot += data[i * m + j] * data[i * m + k];
            }
            for i in 0..n {
                data[i * m + j] -= dot * data[i * m + k];
            }
        }
        let norm: f64 = (0..n).map(|i| data[i * m + j] * data[i * m + j]).sum::<f64>().sqrt();
        if norm < 1e-10 {
            return Err(CoreError::numerical(format!(
                "orthonormalize_columns: column {} is dependent",
                j
            )));
        }
        for i in 0..n {
            data[i * m + j] /= norm;
        }
    }
    Ok(())
}
