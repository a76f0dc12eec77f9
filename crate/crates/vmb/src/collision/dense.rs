//! Dense test oracles for the linearized collision operator.
//!
//! Direct-mode kernels expose the gain table beta(l, m), from which the full
//! collocation matrix of L_M (including the conservation projection) can be
//! assembled with two batched FFT passes. A bordered LU factorization then
//! provides an independent dense solve to check the iterative micro-space
//! inversion, and a Jacobi eigensolver cross-checks the coercivity gap at
//! small grids.

use super::kernel::{CollisionKernel, KernelMode};
use super::ops::LinearizedOperator;
use crate::error::{Result, VmbError};
use crate::fft::to_complex;
use crate::grids::VelocityGrid;
use crate::maxwellian::FluidMoments;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;

/// Assemble the dense collocation matrix of L_M (with conservation fix).
///
/// Row-major n^3 x n^3; memory is 16 n^6 bytes transiently, so this is
/// guarded to n_v <= 16.
pub fn dense_lm_matrix(
    kernel: &CollisionKernel,
    grid: &VelocityGrid,
    m: &FluidMoments,
) -> Result<Vec<f64>> {
    if kernel.params.mode != KernelMode::Direct {
        return Err(VmbError::Config(
            "dense assembly requires a direct-mode kernel".into(),
        ));
    }
    let n = grid.n_v;
    let n3 = grid.len();
    let beta = kernel.beta_table().expect("direct kernel");
    let loss = kernel.loss_multiplier();

    let maxw = crate::maxwellian::eval_maxwellian(grid, m);
    let mut mhat = Vec::with_capacity(n3);
    to_complex(&maxw, &mut mhat);
    grid.fft3().forward(&mut mhat);
    let scale = 1.0 / n3 as f64;
    for z in mhat.iter_mut() {
        *z *= scale;
    }

    let wrap_sub = |k: usize, l: usize| -> usize {
        // (k - l) mod n per axis.
        let (k0, k1, k2) = (k / (n * n), (k / n) % n, k % n);
        let (l0, l1, l2) = (l / (n * n), (l / n) % n, l % n);
        let s0 = (k0 + n - l0) % n;
        let s1 = (k1 + n - l1) % n;
        let s2 = (k2 + n - l2) % n;
        (s0 * n + s1) * n + s2
    };

    // Mode-space matrix.
    let mut mode: Vec<Complex64> = vec![Complex64::default(); n3 * n3];
    mode.par_chunks_mut(n3).enumerate().for_each(|(k, row)| {
        for (l, r) in row.iter_mut().enumerate() {
            let d = wrap_sub(k, l);
            let coeff = beta[l * n3 + d] + beta[d * n3 + l] - loss[d] - loss[l];
            *r = mhat[d] * coeff;
        }
    });

    // Conjugate to collocation: rows get a forward FFT (normalized by n^3),
    // columns an inverse FFT; the two normalizations cancel, so use the
    // plain forward on rows and the normalized inverse on columns.
    let fft = grid.fft3();
    mode.par_chunks_mut(n3).for_each(|row| {
        fft.forward(row);
    });
    let cols: Vec<Vec<Complex64>> = (0..n3)
        .into_par_iter()
        .map(|l| {
            let mut col: Vec<Complex64> = (0..n3).map(|k| mode[k * n3 + l]).collect();
            fft.inverse(&mut col);
            col
        })
        .collect();
    let mut dense = vec![0.0_f64; n3 * n3];
    let mut max_imag = 0.0_f64;
    for (l, col) in cols.iter().enumerate() {
        for k in 0..n3 {
            dense[k * n3 + l] = col[k].re;
            max_imag = max_imag.max(col[k].im.abs());
        }
    }
    drop(mode);
    if max_imag > 1e-8 {
        return Err(VmbError::Eigensolve(format!(
            "dense assembly lost realness: max imaginary part {max_imag:.3e}"
        )));
    }

    // Conservation fix as a rank-5 update: C <- C - B (W C).
    let (fix_basis, w_rows) = kernel.fix_operator(grid);
    let mut wc = vec![0.0_f64; 5 * n3];
    wc.par_chunks_mut(n3).enumerate().for_each(|(i, out)| {
        let wi = &w_rows[i];
        for l in 0..n3 {
            let mut acc = 0.0;
            for k in 0..n3 {
                acc += wi[k] * dense[k * n3 + l];
            }
            out[l] = acc;
        }
    });
    dense.par_chunks_mut(n3).enumerate().for_each(|(k, row)| {
        for i in 0..5 {
            let b = fix_basis[i][k];
            if b != 0.0 {
                let wi = &wc[i * n3..(i + 1) * n3];
                for (r, w) in row.iter_mut().zip(wi) {
                    *r -= b * w;
                }
            }
        }
    });
    Ok(dense)
}

/// Solve the bordered system [A X; X^T 0] [g; lam] = [rhs; 0] where the
/// columns of X span N_M, pinning the micro-space solution of A g = rhs.
pub fn bordered_solve(
    a: &[f64],
    n: usize,
    null_basis: &[Vec<f64>],
    rhs: &[f64],
) -> Result<Vec<f64>> {
    let p = null_basis.len();
    let dim = n + p;
    let mut m = vec![0.0_f64; dim * dim];
    for k in 0..n {
        m[k * dim..k * dim + n].copy_from_slice(&a[k * n..(k + 1) * n]);
        for (j, b) in null_basis.iter().enumerate() {
            m[k * dim + n + j] = b[k];
        }
    }
    for (j, b) in null_basis.iter().enumerate() {
        for k in 0..n {
            m[(n + j) * dim + k] = b[k];
        }
    }
    let mut x = vec![0.0_f64; dim];
    x[..n].copy_from_slice(rhs);
    lu_solve_in_place(&mut m, dim, &mut x)?;
    Ok(x[..n].to_vec())
}

/// Partial-pivot LU solve, parallelized over trailing rows.
fn lu_solve_in_place(m: &mut [f64], dim: usize, b: &mut [f64]) -> Result<()> {
    for col in 0..dim {
        let (pivot, pmax) = (col..dim)
            .map(|r| (r, m[r * dim + col].abs()))
            .max_by(|a, c| a.1.partial_cmp(&c.1).unwrap())
            .unwrap();
        if pmax < 1e-300 {
            return Err(VmbError::Eigensolve(format!(
                "singular bordered matrix at column {col}"
            )));
        }
        if pivot != col {
            for j in 0..dim {
                m.swap(col * dim + j, pivot * dim + j);
            }
            b.swap(col, pivot);
        }
        let inv = 1.0 / m[col * dim + col];
        let (upper, lower) = m.split_at_mut((col + 1) * dim);
        let prow = &upper[col * dim..col * dim + dim];
        let bc = b[col];
        let updates: Vec<(usize, f64)> = lower
            .par_chunks_mut(dim)
            .enumerate()
            .map(|(i, row)| {
                let f = row[col] * inv;
                if f != 0.0 {
                    for j in col + 1..dim {
                        row[j] -= f * prow[j];
                    }
                    row[col] = 0.0;
                }
                (col + 1 + i, f * bc)
            })
            .collect();
        for (r, delta) in updates {
            b[r] -= delta;
        }
    }
    // Back substitution.
    for col in (0..dim).rev() {
        b[col] /= m[col * dim + col];
        let xc = b[col];
        for r in 0..col {
            b[r] -= m[r * dim + col] * xc;
        }
    }
    Ok(())
}

/// Dense collocation matrix of an operator by unit-vector application.
/// Only sensible for small grids (n_v <= 10).
pub fn dense_by_application(
    grid: &VelocityGrid,
    mut apply: impl FnMut(&[f64]) -> Vec<f64>,
) -> Vec<f64> {
    let n3 = grid.len();
    let mut dense = vec![0.0_f64; n3 * n3];
    let mut e = vec![0.0_f64; n3];
    for j in 0..n3 {
        e[j] = 1.0;
        let col = apply(&e);
        e[j] = 0.0;
        for k in 0..n3 {
            dense[k * n3 + j] = col[k];
        }
    }
    dense
}

/// All eigenvalues of a symmetric matrix by cyclic Jacobi. Test-oracle only.
pub fn jacobi_eigenvalues(a: &[f64], n: usize, sweeps: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for _ in 0..sweeps {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off < 1e-24 {
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
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|k| m[k * n + k]).collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eig
}

/// Dense-solve oracle for lm_inverse: factorize the bordered system and
/// return the micro solution of L_M g = h.
pub fn dense_lm_solve(
    kernel: &CollisionKernel,
    grid: &VelocityGrid,
    op: &LinearizedOperator,
    h: &[f64],
) -> Result<Vec<f64>> {
    let dense = dense_lm_matrix(kernel, grid, &op.moments)?;
    let null: Vec<Vec<f64>> = op.projector.chi.iter().map(|c| c.to_vec()).collect();
    bordered_solve(&dense, grid.len(), &null, h)
}
