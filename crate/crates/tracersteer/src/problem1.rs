//! Necessary-condition system for the covariance-path-driven problem: gain
//! reconstruction from `(Sigma, dSigma, Omega)` and costate dynamics.
//!
//! Admissible gains decompose as `K = 1/2 dSigma Sigma^{-1} + Omega Sigma^{-1}`
//! with skew `Omega`; along extremals `Omega` solves an algebraic Lyapunov
//! equation in the state transition `Phi` and costate `P`, while
//! `dPhi = K Phi` and `dP = -K^T P`.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::matops::{solve_sym_lyapunov, SkewMatrix, SpdMatrix};
use crate::paths::CovariancePath;
use crate::shoot::OdeState;

/// State of the Hamiltonian system: transition `Phi` and costate `P`.
#[derive(Debug, Clone)]
pub struct P1State {
    pub phi: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

impl P1State {
    pub fn initial(p0: DMatrix<f64>) -> Self {
        let n = p0.nrows();
        Self {
            phi: DMatrix::identity(n, n),
            p: p0,
        }
    }
}

impl OdeState for P1State {
    fn scaled_add(&mut self, a: f64, other: &Self) {
        self.phi += a * &other.phi;
        self.p += a * &other.p;
    }

    fn scale(&mut self, a: f64) {
        self.phi *= a;
        self.p *= a;
    }
}

/// The skew rotational parameter along an extremal, from the stationarity
/// condition
/// `Omega Sigma + Sigma Omega = (Phi P^T + 1/2 dSigma) Sigma - Sigma (P Phi^T + 1/2 dSigma)`.
pub fn omega_from_costate(
    phi: &DMatrix<f64>,
    p: &DMatrix<f64>,
    sigma: &SpdMatrix,
    sigma_dot: &DMatrix<f64>,
) -> Result<SkewMatrix> {
    let s = sigma.matrix();
    let lhs = phi * p.transpose() + 0.5 * sigma_dot;
    let rhs = &lhs * s - s * lhs.transpose();
    let x = solve_sym_lyapunov(sigma, &rhs)?;
    // The right side is skew by construction, so x is skew up to round-off.
    SkewMatrix::new(0.5 * (&x - x.transpose()))
}

/// Gain reconstruction `K = (1/2 dSigma + Omega) Sigma^{-1}`; satisfies the
/// Lyapunov identity `K Sigma + Sigma K^T = dSigma`.
pub fn gain_p1(sigma: &SpdMatrix, sigma_dot: &DMatrix<f64>, omega: &SkewMatrix) -> DMatrix<f64> {
    let numerator = 0.5 * sigma_dot + omega.matrix();
    numerator * sigma.inverse().matrix()
}

/// Right-hand side of the Hamiltonian system: `(dPhi, dP) = (K Phi, -K^T P)`.
pub fn p1_vector_field(t: f64, state: &P1State, path: &CovariancePath) -> Result<P1State> {
    let (sigma, sigma_dot) = path.eval(t)?;
    let omega = omega_from_costate(&state.phi, &state.p, &sigma, &sigma_dot)?;
    let k = gain_p1(&sigma, &sigma_dot, &omega);
    Ok(P1State {
        phi: &k * &state.phi,
        p: -k.transpose() * &state.p,
    })
}

/// Gain at a trajectory sample, for diagnostics and cost evaluation.
pub fn gain_at(state: &P1State, sigma: &SpdMatrix, sigma_dot: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let omega = omega_from_costate(&state.phi, &state.p, sigma, sigma_dot)?;
    Ok(gain_p1(sigma, sigma_dot, &omega))
}
