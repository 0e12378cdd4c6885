//! Construction of initial densities for diffusions absorbed at the boundary
//! of a box, such that the density at the horizon `T` falls short of the
//! initial density by a prescribed nonnegative profile:
//! `p(·, 0) = p(·, T) + α γ`.
//!
//! The pieces, bottom up:
//!
//! - [`grid`]: cell-centred grids, density fields, midpoint quadrature.
//! - [`model`]: drift and diffusion coefficients, ellipticity certificate.
//! - [`kolmogorov`]: forward equation operator and implicit time marching.
//! - [`fredholm`]: the time-`T` map `Q`, its spectrum, and `(I − Q)ζ = γ`.
//! - [`seedpipe`]: the end-to-end construction of `(ρ, α)` and its checks.
//! - [`montecarlo`]: Euler–Maruyama simulation with absorption, as an
//!   independent check of the PDE results.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod fredholm;
pub mod grid;
pub mod kolmogorov;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod seedpipe;

pub use fredholm::{
    apply_q, assemble_q, solve_resolvent, spectral_radius, FredholmError, OperatorMatrix, ResolventMethod,
    ResolventReport, TimeMap,
};
pub use grid::{DensityField, DomainGrid, GridError};
pub use kolmogorov::{apply_a, evolve, mass_curve, KolmogorovError, Scheme, SolverConfig, Trajectory};
pub use model::{check_ellipticity, DiffusionModel, ModelError};
pub use montecarlo::{
    compare_with, estimate_density, sample_initial, simulate, MCEstimate, MonteCarloError, ParticleEnsemble,
};
pub use seedpipe::{
    realize_gamma, run_seed, verify_seed, ProfileSpec, SeedError, SeedOptions, SeedSolution, TargetProfile,
};
