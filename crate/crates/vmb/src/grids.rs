//! Velocity and spatial grids with their quadrature and differentiation
//! primitives.
//!
//! Velocity space is a truncated cube [-l_v, l_v]^3 with uniform cell-centered
//! nodes and midpoint quadrature; physical space is a 1D periodic interval of
//! length l_x resolved by a power-of-two number of cells so derivatives can be
//! taken by Fourier collocation. Distributions are not periodic in v, so
//! velocity derivatives use 4th-order central differences with zero ghost
//! values outside the box.

use crate::error::{Result, VmbError};
use crate::fft::{FftPlan, to_complex};
use rustfft::num_complex::Complex64;
use std::sync::Arc;

/// Gas constant R = 2/3, so that internal energy e = theta.
pub const R_GAS: f64 = 2.0 / 3.0;

/// Uniform ion background density.
pub const N_B: f64 = 1.0;

/// Cell-centered uniform cube grid in velocity space.
#[derive(Clone)]
pub struct VelocityGrid {
    /// Nodes per axis (even).
    pub n_v: usize,
    /// Box half-width.
    pub l_v: f64,
    /// Node spacing 2 l_v / n_v.
    pub dv: f64,
    /// 1D node coordinates, identical on all three axes.
    pub axis: Vec<f64>,
    /// Quadrature weight dv^3 per node.
    pub weight: f64,
    fft: Arc<crate::fft::Fft3>,
}

impl VelocityGrid {
    /// Build a grid without calibration checks (test grids may be
    /// deliberately under-resolved). Use [`VelocityGrid::check_calibration`]
    /// or construct through the run configuration for validated grids.
    pub fn new(n_v: usize, l_v: f64) -> Result<Self> {
        if n_v < 4 || n_v % 2 != 0 {
            return Err(VmbError::Config(format!(
                "n_v must be an even integer >= 4, got {n_v}"
            )));
        }
        if !(l_v > 0.0) {
            return Err(VmbError::Config(format!("l_v must be positive, got {l_v}")));
        }
        let dv = 2.0 * l_v / n_v as f64;
        let axis: Vec<f64> = (0..n_v).map(|k| -l_v + (k as f64 + 0.5) * dv).collect();
        Ok(Self {
            n_v,
            l_v,
            dv,
            axis,
            weight: dv * dv * dv,
            fft: Arc::new(crate::fft::Fft3::new(n_v)),
        })
    }

    /// Total number of velocity nodes n_v^3.
    #[inline]
    pub fn len(&self) -> usize {
        self.n_v * self.n_v * self.n_v
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Node coordinates for flat index `k` (axis 0 slowest).
    #[inline]
    pub fn node(&self, k: usize) -> [f64; 3] {
        let n = self.n_v;
        [
            self.axis[k / (n * n)],
            self.axis[(k / n) % n],
            self.axis[k % n],
        ]
    }

    /// Evaluate `f(v)` on every node.
    pub fn fill(&self, mut f: impl FnMut([f64; 3]) -> f64) -> Vec<f64> {
        let n = self.n_v;
        let mut out = Vec::with_capacity(self.len());
        for i0 in 0..n {
            for i1 in 0..n {
                for i2 in 0..n {
                    out.push(f([self.axis[i0], self.axis[i1], self.axis[i2]]));
                }
            }
        }
        out
    }

    /// Midpoint quadrature of a velocity-grid function: dv^3 sum g(v_k).
    ///
    /// Rejects non-finite inputs, naming the offending node.
    pub fn integrate(&self, g: &[f64]) -> Result<f64> {
        debug_assert_eq!(g.len(), self.len());
        for (k, &x) in g.iter().enumerate() {
            if !x.is_finite() {
                return Err(VmbError::NonFinite {
                    context: format!("integrate_v (value {x})"),
                    node: k,
                });
            }
        }
        Ok(self.weight * g.iter().sum::<f64>())
    }

    /// Quadrature without the finiteness scan, for hot inner loops.
    #[inline]
    pub fn integrate_unchecked(&self, g: &[f64]) -> f64 {
        self.weight * g.iter().sum::<f64>()
    }

    /// L2(dv) norm.
    pub fn norm_l2(&self, g: &[f64]) -> f64 {
        (self.weight * g.iter().map(|x| x * x).sum::<f64>()).sqrt()
    }

    /// Plain L2(dv) inner product.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        self.weight * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
    }

    /// Verifies that the global Maxwellian integrates to 1 on this grid.
    /// This is the (n_v, l_v) calibration criterion.
    pub fn check_calibration(&self, tol_quad: f64) -> Result<()> {
        let mu = self.fill(crate::maxwellian::global_maxwellian);
        let mass = self.integrate(&mu)?;
        if (mass - 1.0).abs() > tol_quad {
            return Err(VmbError::Config(format!(
                "velocity grid (n_v = {}, l_v = {}) fails calibration: \
                 quadrature of the global Maxwellian is {mass:.12e} (tol {tol_quad:.1e})",
                self.n_v, self.l_v
            )));
        }
        Ok(())
    }

    /// 4th-order central difference along `axis` (0, 1 or 2) with zero
    /// ghost values outside the box.
    pub fn fd_dv(&self, g: &[f64], axis: usize) -> Vec<f64> {
        debug_assert!(axis < 3);
        debug_assert_eq!(g.len(), self.len());
        let n = self.n_v;
        let stride = match axis {
            0 => n * n,
            1 => n,
            _ => 1,
        };
        let c1 = 8.0 / (12.0 * self.dv);
        let c2 = 1.0 / (12.0 * self.dv);
        let mut out = vec![0.0; g.len()];
        let idx_along = |k: usize| -> usize {
            match axis {
                0 => k / (n * n),
                1 => (k / n) % n,
                _ => k % n,
            }
        };
        for k in 0..g.len() {
            let i = idx_along(k);
            let gm2 = if i >= 2 { g[k - 2 * stride] } else { 0.0 };
            let gm1 = if i >= 1 { g[k - stride] } else { 0.0 };
            let gp1 = if i + 1 < n { g[k + stride] } else { 0.0 };
            let gp2 = if i + 2 < n { g[k + 2 * stride] } else { 0.0 };
            out[k] = c1 * (gp1 - gm1) - c2 * (gp2 - gm2);
        }
        out
    }

    /// Signed Fourier frequencies (pi/l_v) * m for the periodized box.
    pub fn freqs(&self) -> Vec<f64> {
        let base = std::f64::consts::PI / self.l_v;
        (0..self.n_v)
            .map(|m| base * FftPlan::signed_freq(self.n_v, m) as f64)
            .collect()
    }

    /// Shared 3D FFT plan for this grid size.
    pub fn fft3(&self) -> &crate::fft::Fft3 {
        &self.fft
    }
}

/// 1D periodic spatial grid with n_x uniform cells.
#[derive(Clone)]
pub struct SpatialGrid {
    pub n_x: usize,
    pub l_x: f64,
    pub dx: f64,
    pub nodes: Vec<f64>,
    plan: Arc<FftPlan>,
}

impl SpatialGrid {
    pub fn new(n_x: usize, l_x: f64) -> Result<Self> {
        if n_x < 2 || !n_x.is_power_of_two() {
            return Err(VmbError::Config(format!(
                "n_x must be a power of two >= 2, got {n_x}"
            )));
        }
        if !(l_x > 0.0) {
            return Err(VmbError::Config(format!("l_x must be positive, got {l_x}")));
        }
        let dx = l_x / n_x as f64;
        Ok(Self {
            n_x,
            l_x,
            dx,
            nodes: (0..n_x).map(|j| j as f64 * dx).collect(),
            plan: Arc::new(FftPlan::new(n_x)),
        })
    }

    /// Signed wavenumbers (2 pi / l_x) * m.
    pub fn wavenumbers(&self) -> Vec<f64> {
        let base = 2.0 * std::f64::consts::PI / self.l_x;
        (0..self.n_x)
            .map(|m| base * FftPlan::signed_freq(self.n_x, m) as f64)
            .collect()
    }

    /// Fourier-collocation derivative of the requested order.
    ///
    /// Orders above n_x/4 are rejected: they have no spectral headroom on
    /// the grid and would only amplify round-off.
    pub fn spectral_dx(&self, field: &[f64], order: usize) -> Result<Vec<f64>> {
        debug_assert_eq!(field.len(), self.n_x);
        if order > self.n_x / 4 {
            return Err(VmbError::SizeGuard(format!(
                "derivative order {order} exceeds resolution guard n_x/4 = {}",
                self.n_x / 4
            )));
        }
        let mut buf = Vec::new();
        to_complex(field, &mut buf);
        self.plan.forward(&mut buf);
        let ks = self.wavenumbers();
        let nyquist = self.n_x / 2;
        for (m, z) in buf.iter_mut().enumerate() {
            // The unpaired Nyquist mode has no well-defined odd derivative.
            if m == nyquist {
                *z = Complex64::default();
                continue;
            }
            let ik = Complex64::new(0.0, ks[m]);
            *z *= ik.powu(order as u32);
        }
        self.plan.inverse(&mut buf);
        Ok(buf.iter().map(|z| z.re).collect())
    }

    /// Mean-zero antiderivative: returns the unique zero-mean `u` with
    /// spectral_dx(u, 1) = field, requiring `field` to have zero mean.
    pub fn spectral_antiderivative(&self, field: &[f64], mean_tol: f64) -> Result<Vec<f64>> {
        let mean = field.iter().sum::<f64>() / self.n_x as f64;
        let scale = field.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1.0);
        if mean.abs() > mean_tol * scale {
            return Err(VmbError::Compatibility(format!(
                "antiderivative requires zero mean; got mean {mean:.3e}"
            )));
        }
        let mut buf = Vec::new();
        to_complex(field, &mut buf);
        self.plan.forward(&mut buf);
        let ks = self.wavenumbers();
        let nyquist = self.n_x / 2;
        for (m, z) in buf.iter_mut().enumerate() {
            if m == 0 || m == nyquist {
                *z = Complex64::default();
            } else {
                *z /= Complex64::new(0.0, ks[m]);
            }
        }
        self.plan.inverse(&mut buf);
        Ok(buf.iter().map(|z| z.re).collect())
    }

    /// L2(dx) norm over the periodic interval.
    pub fn norm_l2(&self, field: &[f64]) -> f64 {
        (self.dx * field.iter().map(|x| x * x).sum::<f64>()).sqrt()
    }

    /// dx * sum, the total of a density over the torus.
    pub fn integrate(&self, field: &[f64]) -> f64 {
        self.dx * field.iter().sum::<f64>()
    }

    pub fn plan(&self) -> &FftPlan {
        &self.plan
    }
}
