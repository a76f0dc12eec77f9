//! Thin wrappers around rustfft for the 1D spatial grid and the 3D velocity
//! grid.
//!
//! All transforms are unnormalized forward / normalized inverse, so that
//! `inverse(forward(f)) = f`. Velocity-grid transforms flatten the cube in
//! row-major order with axis 0 slowest: index `k = (k0 * n + k1) * n + k2`.

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Planned complex FFTs of a single length, shared between field operations.
pub struct FftPlan {
    pub len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl FftPlan {
    pub fn new(len: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            len,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
        }
    }

    pub fn forward(&self, buf: &mut [Complex64]) {
        debug_assert_eq!(buf.len(), self.len);
        self.forward.process(buf);
    }

    /// Inverse transform including the 1/len normalization.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        debug_assert_eq!(buf.len(), self.len);
        self.inverse.process(buf);
        let scale = 1.0 / self.len as f64;
        for z in buf.iter_mut() {
            *z *= scale;
        }
    }

    /// Signed integer frequency for bin `m` of an `len`-point transform.
    #[inline]
    pub fn signed_freq(len: usize, m: usize) -> i64 {
        if m < len.div_ceil(2) {
            m as i64
        } else {
            m as i64 - len as i64
        }
    }
}

/// 3D complex FFT on an n x n x n cube, performed as batched 1D passes.
pub struct Fft3 {
    pub n: usize,
    plan: FftPlan,
}

impl Fft3 {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            plan: FftPlan::new(n),
        }
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, true);
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, false);
        let scale = 1.0 / (self.n * self.n * self.n) as f64;
        for z in data.iter_mut() {
            *z *= scale;
        }
    }

    fn transform(&self, data: &mut [Complex64], fwd: bool) {
        let n = self.n;
        debug_assert_eq!(data.len(), n * n * n);
        let mut line = vec![Complex64::default(); n];
        // Axis 2: contiguous lines.
        for chunk in data.chunks_exact_mut(n) {
            if fwd {
                self.plan.forward.process(chunk);
            } else {
                self.plan.inverse.process(chunk);
            }
        }
        // Axis 1: stride n within each n*n plane.
        for plane in data.chunks_exact_mut(n * n) {
            for k2 in 0..n {
                for k1 in 0..n {
                    line[k1] = plane[k1 * n + k2];
                }
                if fwd {
                    self.plan.forward.process(&mut line);
                } else {
                    self.plan.inverse.process(&mut line);
                }
                for k1 in 0..n {
                    plane[k1 * n + k2] = line[k1];
                }
            }
        }
        // Axis 0: stride n*n.
        let nn = n * n;
        for rest in 0..nn {
            for k0 in 0..n {
                line[k0] = data[k0 * nn + rest];
            }
            if fwd {
                self.plan.forward.process(&mut line);
            } else {
                self.plan.inverse.process(&mut line);
            }
            for k0 in 0..n {
                data[k0 * nn + rest] = line[k0];
            }
        }
    }
}

/// Copy a real field into a complex buffer.
pub fn to_complex(src: &[f64], dst: &mut Vec<Complex64>) {
    dst.clear();
    dst.extend(src.iter().map(|&x| Complex64::new(x, 0.0)));
}

/// Real parts of a complex buffer.
pub fn real_parts(src: &[Complex64], dst: &mut [f64]) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d = s.re;
    }
}
