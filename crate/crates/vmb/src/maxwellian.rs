//! Fluid moments, local Maxwellians and the macro/micro projections.
//!
//! A kinetic density F is split per spatial cell as F = M + G where
//! M = M_[rho,u,theta] carries the five conserved moments of F and
//! G = P1 F is orthogonal to the collision invariants {1, v, |v|^2/2}.
//! The projection basis chi_i is orthonormal in the 1/M-weighted inner
//! product; since each chi_i = p_i(v) M with p_i a low-degree polynomial,
//! all inner products are evaluated as plain quadratures against p_i and
//! no division by M ever occurs.

use crate::error::{Result, VmbError};
use crate::grids::{R_GAS, VelocityGrid};

/// The five collision invariants psi = (1, v1, v2, v3, |v|^2/2) at a node.
#[inline]
pub fn collision_invariants(v: [f64; 3]) -> [f64; 5] {
    [
        1.0,
        v[0],
        v[1],
        v[2],
        0.5 * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]),
    ]
}

/// Normalized global Maxwellian mu = M_[1,0,3/2]: (2 pi)^{-3/2} exp(-|v|^2/2).
#[inline]
pub fn global_maxwellian(v: [f64; 3]) -> f64 {
    let q = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    (2.0 * std::f64::consts::PI).powf(-1.5) * (-0.5 * q).exp()
}

/// Per-cell fluid state (mass density, bulk velocity, temperature).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluidMoments {
    pub rho: f64,
    pub u: [f64; 3],
    pub theta: f64,
}

impl FluidMoments {
    pub fn new(rho: f64, u: [f64; 3], theta: f64) -> Result<Self> {
        let m = Self { rho, u, theta };
        m.validate(usize::MAX)?;
        Ok(m)
    }

    /// Rejects densities and temperatures outside (0, inf).
    pub fn validate(&self, cell: usize) -> Result<()> {
        if !(self.rho > 0.0) || !self.rho.is_finite() || !(self.theta > 0.0) || !self.theta.is_finite()
        {
            return Err(VmbError::Degenerate {
                cell,
                rho: self.rho,
                theta: self.theta,
            });
        }
        Ok(())
    }

    /// Thermal variance R*theta per axis.
    #[inline]
    pub fn r_theta(&self) -> f64 {
        R_GAS * self.theta
    }

    /// Maxwellian density at one velocity node.
    #[inline]
    pub fn maxwellian_at(&self, v: [f64; 3]) -> f64 {
        let rt = self.r_theta();
        let dx = v[0] - self.u[0];
        let dy = v[1] - self.u[1];
        let dz = v[2] - self.u[2];
        let q = dx * dx + dy * dy + dz * dz;
        self.rho * (2.0 * std::f64::consts::PI * rt).powf(-1.5) * (-q / (2.0 * rt)).exp()
    }
}

/// Evaluate the local Maxwellian M_[rho,u,theta] on the grid.
pub fn eval_maxwellian(grid: &VelocityGrid, m: &FluidMoments) -> Vec<f64> {
    grid.fill(|v| m.maxwellian_at(v))
}

/// Recover (rho, u, theta) from a velocity-grid density by quadrature.
pub fn moments_of(grid: &VelocityGrid, f: &[f64], cell: usize) -> Result<FluidMoments> {
    let mut s = [0.0_f64; 5];
    let n = grid.n_v;
    let mut k = 0;
    for i0 in 0..n {
        let v0 = grid.axis[i0];
        for i1 in 0..n {
            let v1 = grid.axis[i1];
            for i2 in 0..n {
                let v2 = grid.axis[i2];
                let w = f[k];
                s[0] += w;
                s[1] += v0 * w;
                s[2] += v1 * w;
                s[3] += v2 * w;
                s[4] += 0.5 * (v0 * v0 + v1 * v1 + v2 * v2) * w;
                k += 1;
            }
        }
    }
    for v in s.iter_mut() {
        *v *= grid.weight;
    }
    let rho = s[0];
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(VmbError::Degenerate {
            cell,
            rho,
            theta: f64::NAN,
        });
    }
    let u = [s[1] / rho, s[2] / rho, s[3] / rho];
    let kinetic = 0.5 * (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]);
    // rho (e + |u|^2/2) = integral of |v|^2 F / 2 and e = theta for R = 2/3.
    let theta = s[4] / rho - kinetic;
    let m = FluidMoments { rho, u, theta };
    m.validate(cell)?;
    Ok(m)
}

/// Kinetic density on the full (x, v) grid, tagged with its Knudsen number.
#[derive(Clone)]
pub struct DistributionField {
    /// Row-major [cell][velocity node].
    pub values: Vec<f64>,
    pub n_cells: usize,
    pub n_v3: usize,
    pub eps: f64,
}

impl DistributionField {
    pub fn new(values: Vec<f64>, n_cells: usize, n_v3: usize, eps: f64) -> Result<Self> {
        if values.len() != n_cells * n_v3 {
            return Err(VmbError::Config(format!(
                "distribution field size {} does not match {n_cells} cells x {n_v3} nodes",
                values.len()
            )));
        }
        if !(eps > 0.0) {
            return Err(VmbError::Config(format!("eps must be positive, got {eps}")));
        }
        Ok(Self {
            values,
            n_cells,
            n_v3,
            eps,
        })
    }

    #[inline]
    pub fn cell(&self, j: usize) -> &[f64] {
        &self.values[j * self.n_v3..(j + 1) * self.n_v3]
    }

    #[inline]
    pub fn cell_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.values[j * self.n_v3..(j + 1) * self.n_v3]
    }

    /// Per-cell fluid moments; fails on the first degenerate cell.
    pub fn moments(&self, grid: &VelocityGrid) -> Result<Vec<FluidMoments>> {
        (0..self.n_cells)
            .map(|j| moments_of(grid, self.cell(j), j))
            .collect()
    }
}

/// Which reference state a microscopic function is orthogonal against.
#[derive(Debug, Clone, PartialEq)]
pub enum MicroReference {
    /// Element of N_M-perp: plain moments against psi_i vanish (per cell).
    LocalMaxwellian(FluidMoments),
    /// Element of (ker L)-perp: moments against sqrt(mu) psi_i vanish.
    SqrtMu,
}

/// A velocity-grid function certified orthogonal to the collision invariants.
#[derive(Clone)]
pub struct MicroFunction {
    pub values: Vec<f64>,
    pub reference: MicroReference,
}

impl MicroFunction {
    /// Validates the orthogonality defect against `tol_micro` (relative to
    /// the function's norm) before accepting the data.
    pub fn new(
        grid: &VelocityGrid,
        values: Vec<f64>,
        reference: MicroReference,
        tol_micro: f64,
    ) -> Result<Self> {
        let defects = micro_defects(grid, &values, &reference);
        let scale = grid.norm_l2(&values).max(1e-300);
        for (i, d) in defects.iter().enumerate() {
            if d.abs() > tol_micro * scale.max(1.0) {
                return Err(VmbError::MicroDefect {
                    defect: d.abs(),
                    tol: tol_micro * scale.max(1.0),
                    index: i,
                });
            }
        }
        Ok(Self { values, reference })
    }
}

/// Raw orthogonality defects of `g` against the five invariants.
pub fn micro_defects(grid: &VelocityGrid, g: &[f64], reference: &MicroReference) -> [f64; 5] {
    let mut out = [0.0_f64; 5];
    match reference {
        MicroReference::LocalMaxwellian(_) => {
            for (k, &val) in g.iter().enumerate() {
                let psi = collision_invariants(grid.node(k));
                for i in 0..5 {
                    out[i] += psi[i] * val;
                }
            }
        }
        MicroReference::SqrtMu => {
            for (k, &val) in g.iter().enumerate() {
                let v = grid.node(k);
                let w = global_maxwellian(v).sqrt();
                let psi = collision_invariants(v);
                for i in 0..5 {
                    out[i] += psi[i] * w * val;
                }
            }
        }
    }
    for v in out.iter_mut() {
        *v *= grid.weight;
    }
    out
}

/// The orthonormal macroscopic basis chi_i = p_i(v) M and its projections.
///
/// Stores both the Maxwellian-weighted basis and the bare polynomials so the
/// 1/M-weighted inner products reduce to plain quadratures.
pub struct Projector {
    pub moments: FluidMoments,
    /// chi_i on the grid.
    pub chi: [Vec<f64>; 5],
    /// p_i = chi_i / M on the grid (polynomials; exact, no division).
    pub poly: [Vec<f64>; 5],
    /// Gram defect max |<chi_i, chi_j/M> - delta_ij| before any correction.
    pub raw_gram_defect: f64,
}

impl Projector {
    /// Build the basis of the five macroscopic directions at state `m`.
    ///
    /// If the raw quadrature Gram matrix deviates from the identity by more
    /// than `tol_gram`, one Gram-Schmidt pass in the 1/M inner product
    /// restores orthonormality so that P0 stays an exact projection.
    pub fn new(grid: &VelocityGrid, m: &FluidMoments, tol_gram: f64) -> Result<Self> {
        m.validate(usize::MAX)?;
        let rt = m.r_theta();
        let maxw = eval_maxwellian(grid, m);
        let sr_rho = m.rho.sqrt();
        let sr_rrt = (m.rho * rt).sqrt();
        let sr_6rho = (6.0 * m.rho).sqrt();

        let mut poly: [Vec<f64>; 5] = Default::default();
        for (i, p) in poly.iter_mut().enumerate() {
            *p = grid.fill(|v| {
                let dx = v[0] - m.u[0];
                let dy = v[1] - m.u[1];
                let dz = v[2] - m.u[2];
                match i {
                    0 => 1.0 / sr_rho,
                    1 => dx / sr_rrt,
                    2 => dy / sr_rrt,
                    3 => dz / sr_rrt,
                    _ => ((dx * dx + dy * dy + dz * dz) / rt - 3.0) / sr_6rho,
                }
            });
        }

        // Gram in the 1/M inner product: <p_a M, p_b M / M> = int p_a p_b M.
        let gram = |pa: &[f64], pb: &[f64]| -> f64 {
            grid.weight
                * pa.iter()
                    .zip(pb)
                    .zip(&maxw)
                    .map(|((a, b), w)| a * b * w)
                    .sum::<f64>()
        };
        let mut raw_defect = 0.0_f64;
        for i in 0..5 {
            for j in 0..5 {
                let g = gram(&poly[i], &poly[j]);
                let target = if i == j { 1.0 } else { 0.0 };
                raw_defect = raw_defect.max((g - target).abs());
            }
        }

        if raw_defect > tol_gram {
            // Modified Gram-Schmidt on the polynomial factors.
            for i in 0..5 {
                for j in 0..i {
                    let c = gram(&poly[i], &poly[j]);
                    let (head, tail) = poly.split_at_mut(i);
                    let pj = &head[j];
                    for (x, y) in tail[0].iter_mut().zip(pj) {
                        *x -= c * y;
                    }
                }
                let nrm = gram(&poly[i], &poly[i]).sqrt();
                if !(nrm > 0.0) {
                    return Err(VmbError::Config(
                        "projection basis degenerated during re-orthonormalization".into(),
                    ));
                }
                for x in poly[i].iter_mut() {
                    *x /= nrm;
                }
            }
        }

        let chi = std::array::from_fn(|i| {
            poly[i]
                .iter()
                .zip(&maxw)
                .map(|(p, w)| p * w)
                .collect::<Vec<f64>>()
        });

        Ok(Self {
            moments: *m,
            chi,
            poly,
            raw_gram_defect: raw_defect,
        })
    }

    /// Coefficients <h, chi_i/M> of the macroscopic part of `h`.
    pub fn coefficients(&self, grid: &VelocityGrid, h: &[f64]) -> [f64; 5] {
        std::array::from_fn(|i| grid.inner(h, &self.poly[i]))
    }

    /// Macroscopic projection P0 h.
    pub fn p0(&self, grid: &VelocityGrid, h: &[f64]) -> Vec<f64> {
        let c = self.coefficients(grid, h);
        let mut out = vec![0.0; h.len()];
        for i in 0..5 {
            for (o, x) in out.iter_mut().zip(&self.chi[i]) {
                *o += c[i] * x;
            }
        }
        out
    }

    /// Microscopic projection P1 h = h - P0 h.
    pub fn p1(&self, grid: &VelocityGrid, h: &[f64]) -> Vec<f64> {
        let p0 = self.p0(grid, h);
        h.iter().zip(&p0).map(|(a, b)| a - b).collect()
    }

    /// In-place microscopic projection, for solver inner loops.
    pub fn project_micro_inplace(&self, grid: &VelocityGrid, h: &mut [f64]) {
        let c: [f64; 5] = std::array::from_fn(|i| grid.inner(h, &self.poly[i]));
        for i in 0..5 {
            for (o, x) in h.iter_mut().zip(&self.chi[i]) {
                *o -= c[i] * x;
            }
        }
    }
}

/// Result of the macro-micro decomposition of one kinetic field.
pub struct MacroMicro {
    pub moments: Vec<FluidMoments>,
    /// Local Maxwellian field M (same layout as the input field).
    pub maxwellian: Vec<f64>,
    /// Micro remainder G = F - M.
    pub micro: Vec<f64>,
    /// Largest plain-moment defect of G over all cells and invariants.
    pub max_micro_defect: f64,
}

/// Decompose F = M + G per cell and verify that G is microscopic.
///
/// The defect check uses tol_micro relative to the per-cell norm of F; a
/// violation indicates a quadrature calibration problem on the velocity grid.
pub fn macro_micro_split(
    grid: &VelocityGrid,
    f: &DistributionField,
    tol_micro: f64,
) -> Result<MacroMicro> {
    let moments = f.moments(grid)?;
    let mut maxwellian = vec![0.0; f.values.len()];
    let mut micro = vec![0.0; f.values.len()];
    let mut max_defect = 0.0_f64;
    for (j, m) in moments.iter().enumerate() {
        let mloc = eval_maxwellian(grid, m);
        let base = j * f.n_v3;
        for (k, &mv) in mloc.iter().enumerate() {
            maxwellian[base + k] = mv;
            micro[base + k] = f.values[base + k] - mv;
        }
        let g = &micro[base..base + f.n_v3];
        let defects = micro_defects(grid, g, &MicroReference::LocalMaxwellian(*m));
        let scale = grid.norm_l2(f.cell(j)).max(1.0);
        for (i, d) in defects.iter().enumerate() {
            if d.abs() > tol_micro * scale {
                return Err(VmbError::MicroDefect {
                    defect: d.abs(),
                    tol: tol_micro * scale,
                    index: i,
                });
            }
            max_defect = max_defect.max(d.abs());
        }
    }
    Ok(MacroMicro {
        moments,
        maxwellian,
        micro,
        max_micro_defect: max_defect,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> VelocityGrid {
        VelocityGrid::new(24, 7.5).unwrap()
    }

    #[test]
    fn mu_has_unit_moments() {
        let g = grid();
        let mu = g.fill(global_maxwellian);
        let m = moments_of(&g, &mu, 0).unwrap();
        assert!((m.rho - 1.0).abs() < 1e-8);
        assert!(m.u.iter().all(|c| c.abs() < 1e-8));
        assert!((m.theta - 1.5).abs() < 1e-8);
    }

    #[test]
    fn moments_scale_linearly() {
        let g = grid();
        let mu2: Vec<f64> = g.fill(global_maxwellian).iter().map(|x| 2.0 * x).collect();
        let m = moments_of(&g, &mu2, 0).unwrap();
        assert!((m.rho - 2.0).abs() < 1e-8);
        assert!((m.theta - 1.5).abs() < 1e-8);
    }

    #[test]
    fn maxwellian_roundtrip() {
        let g = grid();
        let m0 = FluidMoments::new(1.0, [0.3, 0.0, 0.0], 1.2).unwrap();
        let f = eval_maxwellian(&g, &m0);
        let m = moments_of(&g, &f, 0).unwrap();
        assert!((m.rho - 1.0).abs() < 1e-8);
        assert!((m.u[0] - 0.3).abs() < 1e-8);
        assert!((m.theta - 1.2).abs() < 1e-8);
    }

    #[test]
    fn maxwellian_peak_value() {
        let m = FluidMoments::new(1.0, [0.0; 3], 1.5).unwrap();
        let expected = (2.0 * std::f64::consts::PI).powf(-1.5);
        assert!((m.maxwellian_at([0.0; 3]) - expected).abs() < 1e-12);
        assert!((expected - 0.063493).abs() < 1e-6);
    }

    #[test]
    fn maxwellian_scales_with_rho() {
        let g = VelocityGrid::new(12, 6.0).unwrap();
        let m1 = FluidMoments::new(1.0, [0.1, -0.2, 0.0], 1.3).unwrap();
        let m2 = FluidMoments::new(2.0, [0.1, -0.2, 0.0], 1.3).unwrap();
        let f1 = eval_maxwellian(&g, &m1);
        let f2 = eval_maxwellian(&g, &m2);
        for (a, b) in f1.iter().zip(&f2) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_moments_rejected() {
        let g = grid();
        let f = vec![-1.0; g.len()];
        assert!(matches!(
            moments_of(&g, &f, 3),
            Err(VmbError::Degenerate { cell: 3, .. })
        ));
    }

    #[test]
    fn projector_gram_is_identity() {
        let g = grid();
        for (rho, u, theta) in [
            (1.0, [0.0; 3], 1.5),
            (2.0, [0.1, 0.0, 0.0], 1.0),
            (0.7, [0.0, -0.2, 0.1], 2.0),
        ] {
            let m = FluidMoments::new(rho, u, theta).unwrap();
            let p = Projector::new(&g, &m, 1e-6).unwrap();
            assert!(
                p.raw_gram_defect < 1e-6,
                "raw Gram defect {} at ({rho}, {u:?}, {theta})",
                p.raw_gram_defect
            );
            // Orthonormality after construction.
            for i in 0..5 {
                for j in 0..5 {
                    let gij = g.weight
                        * p.chi[i]
                            .iter()
                            .zip(&p.poly[j])
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                    let t = if i == j { 1.0 } else { 0.0 };
                    assert!((gij - t).abs() < 1e-6, "gram[{i}][{j}] = {gij}");
                }
            }
        }
    }

    #[test]
    fn projection_algebra() {
        let g = grid();
        let m = FluidMoments::new(1.0, [0.1, 0.0, 0.0], 1.5).unwrap();
        let p = Projector::new(&g, &m, 1e-6).unwrap();
        let h = g.fill(|v| (0.3 * v[0] - 0.2 * v[1] * v[2]).sin() * global_maxwellian(v).sqrt());

        let p0h = p.p0(&g, &h);
        let p0p0h = p.p0(&g, &p0h);
        let scale = g.norm_l2(&p0h).max(1e-300);
        let idem: f64 = p0h
            .iter()
            .zip(&p0p0h)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / scale;
        assert!(idem < 1e-9, "idempotence defect {idem:.3e}");

        let p1p0h = p.p1(&g, &p0h);
        let ann = g.norm_l2(&p1p0h) / scale;
        assert!(ann < 1e-9, "P1 P0 defect {ann:.3e}");

        // P1 h = h - P0 h holds bit-exactly by construction.
        let p1h = p.p1(&g, &h);
        for ((a, b), c) in h.iter().zip(&p0h).zip(&p1h) {
            assert_eq!(a - b, *c);
        }

        // P0 M = M within the Gram tolerance.
        let maxw = eval_maxwellian(&g, &m);
        let p0m = p.p0(&g, &maxw);
        let rel = p0m
            .iter()
            .zip(&maxw)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
            / g.norm_l2(&maxw);
        assert!(rel < 1e-6, "P0 M defect {rel:.3e}");
    }

    #[test]
    fn split_of_exact_maxwellian_has_zero_micro_part() {
        let g = grid();
        let m = FluidMoments::new(1.3, [0.05, 0.0, -0.1], 1.4).unwrap();
        let f = DistributionField::new(eval_maxwellian(&g, &m), 1, g.len(), 0.1).unwrap();
        let mm = macro_micro_split(&g, &f, 1e-9).unwrap();
        let rel = g.norm_l2(&mm.micro) / g.norm_l2(&f.values);
        assert!(rel < 1e-8, "micro remainder {rel:.3e}");
    }

    #[test]
    fn split_recovers_odd_micro_bump() {
        let g = grid();
        // mu plus a small odd-in-v1 bump, then the invariants projected out
        // by brute force against the mu-state projector.
        let m0 = FluidMoments::new(1.0, [0.0; 3], 1.5).unwrap();
        let p = Projector::new(&g, &m0, 1e-6).unwrap();
        let bump = g.fill(|v| 1e-3 * v[0] * (-0.7 * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2])).exp());
        let bump_micro = p.p1(&g, &bump);

        let mu = g.fill(global_maxwellian);
        let f: Vec<f64> = mu.iter().zip(&bump_micro).map(|(a, b)| a + b).collect();
        let field = DistributionField::new(f, 1, g.len(), 0.1).unwrap();
        let mm = macro_micro_split(&g, &field, 1e-6).unwrap();

        let err: f64 = mm
            .micro
            .iter()
            .zip(&bump_micro)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let nrm = g.norm_l2(&bump_micro);
        assert!(err / nrm < 2e-2, "bump recovery error {}", err / nrm);

        // Mass of G vanishes in every cell.
        let mass = g.integrate(&mm.micro).unwrap();
        assert!(mass.abs() < 1e-9);
    }
}
