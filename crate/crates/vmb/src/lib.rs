//! vmb: a kinetic-to-fluid plasma simulation toolkit.
//!
//! The library integrates the scaled Vlasov-Maxwell-Boltzmann system for
//! electrons with hard-sphere collisions on a 1D-periodic x 3D-velocity
//! grid, together with its compressible Euler-Maxwell limit system, and
//! provides the macro-micro decomposition machinery (projections, linearized
//! collision operators, Burnett functions, transport coefficients, energy
//! functionals) needed to measure how the kinetic solution approaches the
//! fluid one as the Knudsen number epsilon shrinks.
//!
//! Modules mirror the physical layering:
//!
//! - [`grids`]: velocity/spatial grids, quadrature, differentiation
//! - [`maxwellian`]: moments, local Maxwellians, macro/micro projections
//! - [`collision`]: hard-sphere collision kernels and linearized operators
//! - [`burnett`]: Burnett functions, viscosity/heat-conductivity, correction term
//! - [`em`]: Maxwell field updates and Gauss constraints
//! - [`kinetic`]: IMEX time integration of the kinetic system
//! - [`fluid`]: spectral Euler-Maxwell solver for the limit profile
//! - [`diagnostics`]: perturbation norms, energy functionals, rate fits
//! - [`harness`]: configuration, well-prepared data, sweeps, snapshots, CSV

pub mod burnett;
pub mod collision;
pub mod error;
pub mod fft;
pub mod grids;
pub mod maxwellian;

pub use error::{Result, VmbError};
