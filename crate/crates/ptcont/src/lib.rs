//! Phase resetting of limit-cycle oscillators by boundary-value-problem
//! continuation.
//!
//! The crate computes attracting periodic orbits, their Floquet bundles,
//! isochrons, and phase transition / phase response curves (PTCs / PRCs)
//! for planar and higher-dimensional ODE models. The core machinery is
//! orthogonal collocation on multi-segment two-point BVPs driven by
//! pseudo-arclength continuation; everything is cross-checked against a
//! direct-integration oracle that knows nothing about the BVP setup.
//!
//! Module map:
//! - [`model`]: vector fields, Jacobians, perturbation descriptions.
//! - [`mesh`]: orbit segments as piecewise collocation polynomials.
//! - [`bvp`]: multi-segment BVP assembly and the damped Newton solver.
//! - [`continuation`]: pseudo-arclength branches, events, monitors.
//! - [`periodic`]: periodic orbits, Floquet and adjoint bundles.
//! - [`isochron`]: isochron tracing with period extension.
//! - [`reset`]: the phase-reset BVP and PTC/PRC/sweep extraction.
//! - [`oracle`]: adaptive integration and asymptotic-phase estimation.

pub mod bvp;
pub mod continuation;
pub mod isochron;
pub mod mesh;
pub mod model;
pub mod oracle;
pub mod par;
pub mod periodic;
pub mod reset;

/// Crate-wide error type. Variants carry the failing quantity where that
/// helps a caller decide between retrying with different numerics and
/// giving up.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("field evaluation failed: non-finite component {component} at state {state:?}")]
    EvaluationFailure { component: usize, state: Vec<f64> },
    #[error("integration step failure at t = {t}: {reason}")]
    StepFailure { t: f64, reason: String },
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("Newton reached {0} iterations without converging (residual {1:.3e})")]
    MaxIterations(usize, f64),
    #[error("singular Jacobian in bordered solve: {0}")]
    SingularJacobian(String),
    #[error("continuation step size underflow at step {step} (last residual {residual:.3e})")]
    StepUnderflow { step: usize, residual: f64 },
    #[error("event {0} not reached within the step budget")]
    EventNotReached(String),
    #[error("degenerate orbit: {0}")]
    DegenerateOrbit(String),
    #[error("direct Floquet bundle is only defined for planar models (n = {0}); use the adjoint bundle")]
    NonUniqueBundle(usize),
    #[error("periodic-orbit record is missing the Floquet bundle required here")]
    MissingBundle,
    #[error("periodic-orbit record is missing the adjoint bundle required here")]
    MissingAdjointBundle,
    #[error("continuation approached the basin boundary (step underflow at arclength {0:.6})")]
    BasinBoundaryApproach(f64),
    #[error("bracket endpoints classify identically; no invertibility change inside")]
    NoSignChange,
    #[error("{0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
