//! Error types shared across the toolkit.

use thiserror::Error;

/// Errors produced by grid construction, kernel builds, solvers and I/O.
#[derive(Debug, Error)]
pub enum VmbError {
    /// Invalid configuration value or incompatible parameter combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// A field contained a non-finite value where one is not allowed.
    #[error("non-finite value at {context}: node {node:?}")]
    NonFinite { context: String, node: usize },

    /// Recovered moments left the admissible regime (rho > 0, theta > 0).
    #[error("degenerate state in cell {cell}: rho = {rho}, theta = {theta}")]
    Degenerate { cell: usize, rho: f64, theta: f64 },

    /// A function claimed microscopic violates the collision-invariant
    /// orthogonality beyond tolerance.
    #[error("micro defect {defect:.3e} exceeds tolerance {tol:.3e} (invariant {index})")]
    MicroDefect { defect: f64, tol: f64, index: usize },

    /// Requested operation exceeds a resolution or size guard.
    #[error("size guard: {0}")]
    SizeGuard(String),

    /// Iterative solver failed to reach tolerance.
    #[error("solver did not converge: residual {residual:.3e} after {iters} iterations")]
    Solver { residual: f64, iters: usize },

    /// Eigenvalue estimation failed.
    #[error("eigensolve failure: {0}")]
    Eigensolve(String),

    /// A run aborted on a numerical trigger (blow-up, resolution loss).
    #[error("numerical abort at t = {t}: {reason}")]
    NumericalAbort { t: f64, reason: String },

    /// Periodic-domain compatibility violated (e.g. nonzero mean charge).
    #[error("compatibility error: {0}")]
    Compatibility(String),

    /// Snapshot or kernel artifact failed checksum or header validation.
    #[error("corrupt artifact: {0}")]
    CorruptArtifact(String),

    /// Artifact format version not understood by this build.
    #[error("version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VmbError>;

impl VmbError {
    /// Process exit code for the CLI: 2 config, 3 numerical, 4 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            VmbError::Config(_) | VmbError::SizeGuard(_) | VmbError::VersionMismatch { .. } => 2,
            VmbError::Io(_) | VmbError::CorruptArtifact(_) => 4,
            _ => 3,
        }
    }
}
