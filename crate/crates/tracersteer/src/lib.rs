//! Recovery of linear Gaussian ensemble flows from covariance and tracer data.
//!
//! The library identifies the pair (gain schedule `K_t`, state transition
//! `Phi_t`) of a linear flow `dX = K_t X dt` that reconciles two kinds of
//! observations over `t in [0,1]`:
//!
//! * covariance constraints `Sigma_t = Phi_t Sigma_0 Phi_t^T`, given either as
//!   a full differentiable curve or as endpoint values only;
//! * tracer-particle constraints `Y_t = Phi_t Y_0`, given either as endpoint
//!   placements or as full trajectories.
//!
//! Two regimes are supported. With a full covariance path and tracer
//! endpoints, admissible gains decompose as
//! `K_t = 1/2 dSigma_t Sigma_t^{-1} + Omega_t Sigma_t^{-1}` with skew
//! `Omega_t`, and the kinetic-energy cost is minimized ([`problem1`]). With
//! endpoint covariances and tracer trajectories, gains decompose as
//! `K_t = M_t + R_t N_t` over a nullspace frame of the tracers, and the cost
//! is regularized by an attention term `epsilon/2 * integral ||K_t||_F^2`
//! ([`problem2`]). Both lead to Hamiltonian two-point boundary value problems
//! solved by shooting over the unknown initial costate ([`shoot`]), verified
//! by Monte Carlo ensemble simulation and perturbation tests ([`ensemble`]).

pub mod artifacts;
pub mod boundary;
pub mod config;
pub mod ensemble;
pub mod error;
pub mod matops;
pub mod paths;
pub mod problem1;
pub mod problem2;
pub mod shoot;

pub use error::{Error, Result};
pub use matops::{SkewMatrix, SpdMatrix};
