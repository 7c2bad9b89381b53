//! Mean-field crowd-aversion control on the one-dimensional torus.
//!
//! Crowds move on a circle with controlled drift and Brownian noise, pay a
//! quadratic effort cost, a terminal cost, and a penalty for walking into
//! regions that a kernel marks as crowded. The crate provides the
//! discretization, forward and adjoint solvers, risk functionals, a projected
//! gradient optimizer, and an N-particle simulator for checking the
//! mean-field limit.

pub mod adjoint;
pub mod error;
pub mod forward;
pub mod grid;
pub mod kernel;
pub mod optimizer;
pub mod particles;
pub mod problem;
pub mod profiles;
pub mod risk;

pub use adjoint::{solve_adjoint, AdjointInputs};
pub use error::{Error, Result};
pub use forward::{cfl_max_dt, solve_forward, DriftMode, Dynamics, CFL_SAFETY};
pub use grid::{
    gradient_x, integrate, AdjointField, ControlField, DensityField, SpaceTimeField, TimeGrid,
    TorusGrid,
};
pub use kernel::{build_indicator_kernel, crowding_term, mollify, AversionKernel, KernelMode, KernelSpec};
pub use optimizer::{
    deviation_probe, gdm_optimize, DeviationReport, GdmOutcome, GdmParams, GdmTrace, StopReason,
};
pub use particles::{
    empirical_histogram, empirical_risk, simulate_particles, wasserstein2_circle, ParticleEnsemble,
};
pub use problem::{Crowd, MultiCrowdProblem};
pub use risk::{
    check_convexity, crowd_risk, pooled_risk, reconstruct_lambda, symmetrize_lambda,
    AversionMatrices, ConvexityVerdict, RiskBreakdown,
};
pub use nalgebra::DMatrix;
