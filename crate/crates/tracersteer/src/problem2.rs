//! Necessary-condition system for the tracer-trajectory-driven problem:
//! tracer projector `M_t`, nullspace frame `N_t`, optimal residual gain `R_t`,
//! and the regularized costate dynamics.
//!
//! Admissible gains decompose as `K = M + R N` where `M = dY (Y^T Y)^{-1} Y^T`
//! reproduces the tracer velocities and `N` spans the complement of the tracer
//! columns (`dN = -N M` keeps `N Y = 0`). Along extremals `R` is the explicit
//! feedback `R = -(M B + P Phi^T) N^T (N B N^T)^{-1}` with
//! `B = Phi Sigma_0 Phi^T + epsilon I`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::matops::{nullspace_basis, SpdMatrix};
use crate::paths::TracerPath;
use crate::shoot::OdeState;

/// Strictly positive attention-regularization weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonWeight(f64);

impl EpsilonWeight {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::SchemaError(format!(
                "epsilon must be strictly positive, got {epsilon}"
            )));
        }
        Ok(Self(epsilon))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// State of the tracer-driven Hamiltonian system: transition `Phi`, costate
/// `P`, and nullspace frame `N` of shape `(n-m) x n`.
#[derive(Debug, Clone)]
pub struct P2State {
    pub phi: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub nmat: DMatrix<f64>,
}

impl P2State {
    pub fn initial(p0: DMatrix<f64>, n0: DMatrix<f64>) -> Self {
        let n = p0.nrows();
        Self {
            phi: DMatrix::identity(n, n),
            p: p0,
            nmat: n0,
        }
    }
}

impl OdeState for P2State {
    fn scaled_add(&mut self, a: f64, other: &Self) {
        self.phi += a * &other.phi;
        self.p += a * &other.p;
        self.nmat += a * &other.nmat;
    }

    fn scale(&mut self, a: f64) {
        self.phi *= a;
        self.p *= a;
        self.nmat *= a;
    }
}

/// Tracer velocity projector `M = dY (Y^T Y)^{-1} Y^T`; satisfies `M Y = dY`.
pub fn projector_m(y: &DMatrix<f64>, y_dot: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = y.transpose() * y;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::RankDeficientTracer("Y^T Y is not positive definite".into()))?;
    // M^T = Y (Y^T Y)^{-1} dY^T
    let m_t = y * chol.solve(&y_dot.transpose());
    Ok(m_t.transpose())
}

/// A row-orthonormal `(n-m) x n` matrix with `N_0 Y_0 = 0` and
/// `[Y_0, N_0^T]` of rank `n`.
pub fn initial_nullspace(y0: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n, m) = y0.shape();
    let basis = nullspace_basis(&y0.transpose(), 1e-8);
    if basis.ncols() != n - m {
        return Err(Error::RankDeficientTracer(format!(
            "kernel of Y_0^T has dimension {}, expected {}",
            basis.ncols(),
            n - m
        )));
    }
    Ok(basis.transpose())
}

/// Removes the tracer-column component of the frame: `N (I - Y (Y^T Y)^{-1}
/// Y^T)`. Exactly `N` in the continuous system (where `N Y = 0`); applying it
/// at evaluation time stops integration drift of `N Y` from leaking into the
/// gain through `R N`.
pub fn project_off_tracers(nmat: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = y.transpose() * y;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::RankDeficientTracer("Y^T Y is not positive definite".into()))?;
    Ok(nmat - (nmat * y) * chol.solve(&y.transpose()))
}

/// Optimal residual gain `R = -(M B + P Phi^T) N^T (N B N^T)^{-1}` with
/// `B = Phi Sigma_0 Phi^T + epsilon I`.
pub fn feedback_r(
    phi: &DMatrix<f64>,
    p: &DMatrix<f64>,
    nmat: &DMatrix<f64>,
    m_proj: &DMatrix<f64>,
    sigma0: &SpdMatrix,
    eps: EpsilonWeight,
) -> Result<DMatrix<f64>> {
    let n = phi.nrows();
    let b = phi * sigma0.matrix() * phi.transpose() + eps.value() * DMatrix::identity(n, n);
    let nbn = nmat * &b * nmat.transpose();
    let chol = nbn.clone().cholesky().ok_or(Error::SingularInnerMatrix)?;
    // Guard against a numerically collapsed frame even when Cholesky passes.
    let eig = nalgebra::SymmetricEigen::new(nbn);
    if eig.eigenvalues.min() <= 1e-12 * eig.eigenvalues.max() {
        return Err(Error::SingularInnerMatrix);
    }
    let lhs = m_proj * &b + p * phi.transpose();
    // R^T = (N B N^T)^{-1} N lhs^T
    let r_t = chol.solve(&(nmat * lhs.transpose()));
    Ok(-r_t.transpose())
}

/// Right-hand side of the regularized Hamiltonian system:
/// `(dPhi, dP, dN) = (K Phi, -K^T (K Phi Sigma_0 + P), -N M)` with `K = M + R N`.
pub fn p2_vector_field(
    t: f64,
    state: &P2State,
    tracers: &TracerPath,
    sigma0: &SpdMatrix,
    eps: EpsilonWeight,
) -> Result<P2State> {
    let (y, y_dot) = tracers.eval(t)?;
    let m_proj = projector_m(&y, &y_dot)?;
    let nmat = project_off_tracers(&state.nmat, &y)?;
    let r = feedback_r(&state.phi, &state.p, &nmat, &m_proj, sigma0, eps)?;
    let k = &m_proj + &r * &nmat;
    Ok(P2State {
        phi: &k * &state.phi,
        p: -k.transpose() * (&k * &state.phi * sigma0.matrix() + &state.p),
        nmat: -&state.nmat * &m_proj,
    })
}

/// Gain at a trajectory sample, for diagnostics and cost evaluation.
pub fn gain_at(
    state: &P2State,
    tracers: &TracerPath,
    t: f64,
    sigma0: &SpdMatrix,
    eps: EpsilonWeight,
) -> Result<DMatrix<f64>> {
    let (y, y_dot) = tracers.eval(t)?;
    let m_proj = projector_m(&y, &y_dot)?;
    let nmat = project_off_tracers(&state.nmat, &y)?;
    let r = feedback_r(&state.phi, &state.p, &nmat, &m_proj, sigma0, eps)?;
    Ok(&m_proj + &r * &nmat)
}
