//! Simulation and verification engine for spatial averages of the
//! one-dimensional stochastic wave equation
//!
//! ```text
//! ∂²u/∂t² = ∂²u/∂x² + σ(u) Ẇ,   u(0,·) = 1,  ∂ₜu(0,·) = 0,
//! ```
//!
//! driven by Gaussian noise that is white in time and Riesz-correlated in
//! space, `E[Ẇ(t,x)Ẇ(s,y)] = δ(t−s)|x−y|^{−β}`.
//!
//! The crate is organised bottom-up:
//!
//! * [`kernels`]: closed forms and quadratures for the deterministic kernel
//!   integrals (Green's function, window function, Riesz box integrals,
//!   cell covariances, variance asymptotics, `g(δ)` and `Φ_{R,t}`).
//! * [`noise`]: exact sampling of cell-integrated Riesz noise by circulant
//!   embedding, with a dense Cholesky fallback.
//! * [`solver`]: the Walsh-sum and leapfrog discretisations of the mild
//!   equation.
//! * [`malliavin`]: first and second Malliavin derivative fields, adjoint
//!   sweeps for `DF`, and the Gram/Stein diagnostics.
//! * [`observables`]: spatial averages, variance estimation, `η(s)`.
//! * [`stats`]: kernel density estimation, distances to `N(0,1)`, rate fits.
//! * [`campaign`]: end-to-end orchestration used by the `swe-clt` binary.

pub mod campaign;
pub mod dump;
pub mod error;
pub mod kernels;
pub mod malliavin;
pub mod noise;
pub mod observables;
pub mod quadrature;
pub mod rng;
pub mod solver;
pub mod stats;

pub use error::{Error, Result};
pub use kernels::RieszExponent;
pub use noise::{CovarianceModel, NoiseField, NoiseSpec};
pub use solver::{Diffusion, GridSolution, Scheme};
