//! The terminal surface `S = {Phi : Phi Sigma_0 Phi^T = Sigma_1, Phi Y_0 = Y_1}`,
//! its tangent spaces, transversality residuals, feasibility certification,
//! and the fully-determined-endpoint construction.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::matops::{nullspace_basis, sqrt_spd, SpdMatrix};

/// Default relative SVD rank tolerance for tangent-space decisions.
pub const RANK_TOL: f64 = 1e-8;

/// Gram residual above which the surface is declared infeasible.
pub const GRAM_TOL: f64 = 1e-8;

/// Terminal data `(Sigma_0, Sigma_1, Y_0, Y_1)` defining the surface `S`.
#[derive(Debug, Clone)]
pub struct TerminalSurface {
    pub sigma0: SpdMatrix,
    pub sigma1: SpdMatrix,
    pub y0: DMatrix<f64>,
    pub y1: DMatrix<f64>,
}

impl TerminalSurface {
    pub fn new(
        sigma0: SpdMatrix,
        sigma1: SpdMatrix,
        y0: DMatrix<f64>,
        y1: DMatrix<f64>,
    ) -> Result<Self> {
        let n = sigma0.dim();
        if sigma1.dim() != n {
            return Err(Error::SchemaError("covariance dimensions differ".into()));
        }
        if y0.shape() != y1.shape() || y0.nrows() != n {
            return Err(Error::SchemaError(format!(
                "tracer endpoints must be {n} x m, got {:?} and {:?}",
                y0.shape(),
                y1.shape()
            )));
        }
        if y0.ncols() >= n {
            return Err(Error::SchemaError(format!(
                "tracer count m = {} must be smaller than n = {n}",
                y0.ncols()
            )));
        }
        Ok(Self {
            sigma0,
            sigma1,
            y0,
            y1,
        })
    }

    pub fn dim(&self) -> usize {
        self.sigma0.dim()
    }

    pub fn tracer_count(&self) -> usize {
        self.y0.ncols()
    }
}

/// Necessary feasibility condition `Y_0^T Sigma_0^{-1} Y_0 = Y_1^T Sigma_1^{-1} Y_1`:
/// any `Phi` with `Phi Sigma_0 Phi^T = Sigma_1` maps one Gram to the other.
/// Returns the Frobenius mismatch; zero (to 1e-10) is necessary for `S` to be
/// nonempty.
pub fn gram_feasibility(surface: &TerminalSurface) -> f64 {
    let g0 = surface.y0.transpose() * surface.sigma0.inverse().matrix() * &surface.y0;
    let g1 = surface.y1.transpose() * surface.sigma1.inverse().matrix() * &surface.y1;
    (g0 - g1).norm()
}

/// Isometric flattening of a symmetric matrix: upper-triangular entries with
/// off-diagonals scaled by sqrt(2), so the Euclidean norm of the flattening
/// equals the Frobenius norm of the matrix.
pub(crate) fn flatten_symmetric(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            let scale = if i == j { 1.0 } else { 2.0f64.sqrt() };
            out.push(scale * a[(i, j)]);
        }
    }
    out
}

/// Defect of both defining conditions of `S`, as a vector of length
/// `n(n+1)/2 + n m`.
pub fn surface_residual(phi: &DMatrix<f64>, surface: &TerminalSurface) -> DVector<f64> {
    let cov_defect = phi * surface.sigma0.matrix() * phi.transpose() - surface.sigma1.matrix();
    let mut entries = flatten_symmetric(&cov_defect);
    let tracer_defect = phi * &surface.y0 - &surface.y1;
    entries.extend_from_slice(tracer_defect.as_slice());
    DVector::from_vec(entries)
}

/// Trace-orthonormal basis of the tangent space
/// `T_Phi S = {V : V Sigma_0 Phi^T + Phi Sigma_0 V^T = 0, V Y_0 = 0}`,
/// from the nullspace of the stacked linearization.
pub fn tangent_basis(
    phi: &DMatrix<f64>,
    surface: &TerminalSurface,
    rank_tol: f64,
) -> Vec<DMatrix<f64>> {
    let n = surface.dim();
    let m = surface.tracer_count();
    let rows = n * (n + 1) / 2 + n * m;
    let mut lin = DMatrix::zeros(rows, n * n);
    for col in 0..n * n {
        let (i, j) = (col % n, col / n); // column-major unit matrix E_ij
        let mut e = DMatrix::zeros(n, n);
        e[(i, j)] = 1.0;
        let sym = &e * surface.sigma0.matrix() * phi.transpose()
            + phi * surface.sigma0.matrix() * e.transpose();
        let mut entries = flatten_symmetric(&sym);
        let tracer = &e * &surface.y0;
        entries.extend_from_slice(tracer.as_slice());
        lin.set_column(col, &DVector::from_vec(entries));
    }
    let kernel = nullspace_basis(&lin, rank_tol);
    (0..kernel.ncols())
        .map(|c| DMatrix::from_column_slice(n, n, kernel.column(c).as_slice()))
        .collect()
}

/// Transversality defect `tr(P^T V_i)` against each tangent basis element.
pub fn transversality_residual(
    p: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    surface: &TerminalSurface,
) -> DVector<f64> {
    let basis = tangent_basis(phi, surface, RANK_TOL);
    DVector::from_iterator(basis.len(), basis.iter().map(|v| (p.transpose() * v).trace()))
}

/// Closed-form terminal candidates `Phi_1 = Sigma_1^{1/2} U Sigma_0^{-1/2}`
/// for the fully determined regime (tangent dimension zero, i.e. `m = n - 1`).
///
/// The orthogonal factor solves `U (Sigma_0^{-1/2} Y_0) = Sigma_1^{-1/2} Y_1`;
/// over the one-dimensional orthogonal complement two extensions remain, a
/// rotation-like and a reflection-like candidate. Both are returned, the one
/// with `det U = +1` first.
pub fn determined_endpoint(surface: &TerminalSurface) -> Result<Vec<DMatrix<f64>>> {
    let residual = gram_feasibility(surface);
    if residual > GRAM_TOL {
        return Err(Error::InfeasibleSurface {
            residual,
            tol: GRAM_TOL,
        });
    }
    let n = surface.dim();
    let m = surface.tracer_count();
    // dim S = (n-m)(n-m-1)/2 once the redundant Gram constraints are removed.
    let tangent_dim = (n - m) * (n - m - 1) / 2;
    if tangent_dim > 0 {
        return Err(Error::NotDetermined { tangent_dim });
    }

    let s0_inv_sqrt = surface.sigma0.inv_sqrt();
    let s1_sqrt = sqrt_spd(&surface.sigma1);
    let s1_inv_sqrt = surface.sigma1.inv_sqrt();
    let a = s0_inv_sqrt.matrix() * &surface.y0;
    let b = s1_inv_sqrt.matrix() * &surface.y1;

    let (qa, ra) = signed_qr(&a);
    let (qb, rb) = signed_qr(&b);
    // Gram feasibility makes the two triangular factors agree.
    debug_assert!((&ra - &rb).norm() <= 1e-6 * ra.norm().max(1.0));
    let _ = (ra, rb);

    let core = &qb * qa.transpose();
    let a_comp = nullspace_basis(&qa.transpose(), RANK_TOL);
    let b_comp = nullspace_basis(&qb.transpose(), RANK_TOL);
    if a_comp.ncols() != n - m || b_comp.ncols() != n - m {
        return Err(Error::RankDeficientTracer(
            "tracer endpoint complement extraction failed".into(),
        ));
    }

    let mut candidates: Vec<DMatrix<f64>> = Vec::new();
    for sign in [1.0, -1.0] {
        let u = &core + sign * &b_comp * a_comp.transpose();
        let phi = s1_sqrt.matrix() * &u * s0_inv_sqrt.matrix();
        if u.determinant() > 0.0 {
            candidates.insert(0, phi);
        } else {
            candidates.push(phi);
        }
    }
    Ok(candidates)
}

/// Thin QR with the sign convention `diag(R) >= 0`, making the factors unique
/// for full-rank input.
fn signed_qr(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let qr = a.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    for j in 0..r.nrows() {
        if r[(j, j)] < 0.0 {
            let neg_col = -q.column(j);
            q.set_column(j, &neg_col);
            let neg_row = -r.row(j);
            r.set_row(j, &neg_row);
        }
    }
    (q, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    fn col(entries: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(entries.len(), 1, entries)
    }

    fn example1_surface() -> TerminalSurface {
        let r2 = 2.0f64.sqrt();
        TerminalSurface::new(
            SpdMatrix::identity(2),
            SpdMatrix::new(dmatrix![2.0, r2; r2, 2.0]).unwrap(),
            col(&[-1.0, 0.0]),
            col(&[0.0, 1.0]),
        )
        .unwrap()
    }

    fn example2_surface() -> TerminalSurface {
        TerminalSurface::new(
            SpdMatrix::identity(2),
            SpdMatrix::new(3.0 * DMatrix::identity(2, 2)).unwrap(),
            col(&[-3.0f64.sqrt() / 2.0, 0.5]),
            col(&[0.0, -3.0f64.sqrt()]),
        )
        .unwrap()
    }

    fn example1_phi() -> DMatrix<f64> {
        dmatrix![0.0, 2.0f64.sqrt(); -1.0, 1.0]
    }

    #[test]
    fn gram_feasibility_of_both_examples() {
        assert!(gram_feasibility(&example1_surface()) < 1e-12);
        assert!(gram_feasibility(&example2_surface()) < 1e-12);
    }

    #[test]
    fn gram_feasibility_detects_scaling_mismatch() {
        let surface = TerminalSurface::new(
            SpdMatrix::identity(2),
            SpdMatrix::identity(2),
            col(&[1.0, 0.0]),
            col(&[2.0, 0.0]),
        )
        .unwrap();
        assert!((gram_feasibility(&surface) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn gram_feasibility_invariant_under_column_mixing() {
        // Replacing (Y0, Y1) by (Y0 G, Y1 G) preserves the zero/nonzero status.
        let s = example1_surface();
        let g = dmatrix![-2.5];
        let mixed = TerminalSurface::new(
            s.sigma0.clone(),
            s.sigma1.clone(),
            &s.y0 * &g,
            &s.y1 * &g,
        )
        .unwrap();
        assert!(gram_feasibility(&mixed) < 1e-12);

        let bad = TerminalSurface::new(
            SpdMatrix::identity(2),
            SpdMatrix::identity(2),
            col(&[1.0, 0.0]) * &g,
            col(&[2.0, 0.0]) * &g,
        )
        .unwrap();
        assert!(gram_feasibility(&bad) > 1.0);
    }

    #[test]
    fn surface_residual_zero_on_surface() {
        let id_surface = TerminalSurface::new(
            SpdMatrix::identity(2),
            SpdMatrix::identity(2),
            col(&[1.0, 0.0]),
            col(&[1.0, 0.0]),
        )
        .unwrap();
        let r = surface_residual(&DMatrix::identity(2, 2), &id_surface);
        assert_eq!(r.len(), 3 + 2);
        assert!(r.norm() < 1e-14);

        let r = surface_residual(&example1_phi(), &example1_surface());
        assert!(r.norm() <= 1e-12);
    }

    #[test]
    fn surface_residual_identity_off_surface() {
        let surface = example1_surface();
        let r = surface_residual(&DMatrix::identity(2, 2), &surface);
        // Covariance block equals the flattening of I - Sigma_1.
        let defect = DMatrix::identity(2, 2) - surface.sigma1.matrix();
        assert!((r[0] - defect[(0, 0)]).abs() < 1e-14);
        assert!((r[1] - 2.0f64.sqrt() * defect[(0, 1)]).abs() < 1e-14);
        assert!((r[2] - defect[(1, 1)]).abs() < 1e-14);
        assert!(r.norm() > 1.0);
    }

    #[test]
    fn tangent_basis_is_empty_in_determined_geometry() {
        let basis = tangent_basis(&example1_phi(), &example1_surface(), RANK_TOL);
        assert!(basis.is_empty());
    }

    #[test]
    fn tangent_basis_without_tracers_is_skew_directions() {
        let surface = TerminalSurface::new(
            SpdMatrix::identity(2),
            SpdMatrix::identity(2),
            DMatrix::zeros(2, 0),
            DMatrix::zeros(2, 0),
        )
        .unwrap();
        let basis = tangent_basis(&DMatrix::identity(2, 2), &surface, RANK_TOL);
        assert_eq!(basis.len(), 1);
        let v = &basis[0];
        assert!((v + v.transpose()).norm() < 1e-12);
        assert!((v.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tangent_dimension_matches_surface_dimension() {
        // dim S = (n-m)(n-m-1)/2: the covariance constraint already implies
        // the tracer Gram, so n m tracer constraints lose m(m+1)/2 rank.
        let y0 = col(&[1.0, 0.0, 0.0]);
        let u = dmatrix![
            0.36, 0.48, -0.8;
            -0.8, 0.6, 0.0;
            0.48, 0.64, 0.6
        ];
        assert!((u.transpose() * &u - DMatrix::identity(3, 3)).norm() < 1e-12);
        let y1 = &u * &y0;
        let surface = TerminalSurface::new(
            SpdMatrix::identity(3),
            SpdMatrix::identity(3),
            y0,
            y1,
        )
        .unwrap();
        let basis = tangent_basis(&u, &surface, RANK_TOL);
        assert_eq!(basis.len(), 1);

        // Without tracers (m = 0): full skew tangent, dimension 3.
        let free = TerminalSurface::new(
            SpdMatrix::identity(3),
            SpdMatrix::identity(3),
            DMatrix::zeros(3, 0),
            DMatrix::zeros(3, 0),
        )
        .unwrap();
        let basis = tangent_basis(&DMatrix::identity(3, 3), &free, RANK_TOL);
        assert_eq!(basis.len(), 3);
    }

    #[test]
    fn tangent_basis_satisfies_linearized_conditions() {
        let surface = example2_surface();
        let candidates = determined_endpoint(&surface).unwrap();
        // Determined geometry: no tangent directions at either candidate.
        for phi in &candidates {
            assert!(tangent_basis(phi, &surface, RANK_TOL).is_empty());
        }
        // m = 0 case: check orthonormality and the linearized conditions.
        let free = TerminalSurface::new(
            SpdMatrix::identity(2),
            SpdMatrix::new(3.0 * DMatrix::identity(2, 2)).unwrap(),
            DMatrix::zeros(2, 0),
            DMatrix::zeros(2, 0),
        )
        .unwrap();
        let phi = 3.0f64.sqrt() * DMatrix::identity(2, 2);
        let basis = tangent_basis(&phi, &free, RANK_TOL);
        assert_eq!(basis.len(), 1);
        for (i, v) in basis.iter().enumerate() {
            let lin = v * free.sigma0.matrix() * phi.transpose()
                + &phi * free.sigma0.matrix() * v.transpose();
            assert!(lin.norm() < 1e-10);
            for (j, w) in basis.iter().enumerate() {
                let inner = (v.transpose() * w).trace();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((inner - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn transversality_trivial_cases() {
        // Determined geometry: empty tangent, empty residual.
        let r = transversality_residual(
            &dmatrix![1.0, 2.0; 3.0, 4.0],
            &example1_phi(),
            &example1_surface(),
        );
        assert_eq!(r.len(), 0);

        // m = 0: P = 0 gives a zero vector; P equal to a tangent element
        // gives a unit entry.
        let free = TerminalSurface::new(
            SpdMatrix::identity(2),
            SpdMatrix::identity(2),
            DMatrix::zeros(2, 0),
            DMatrix::zeros(2, 0),
        )
        .unwrap();
        let phi = DMatrix::identity(2, 2);
        let r = transversality_residual(&DMatrix::zeros(2, 2), &phi, &free);
        assert_eq!(r.len(), 1);
        assert!(r.norm() == 0.0);
        let basis = tangent_basis(&phi, &free, RANK_TOL);
        let r = transversality_residual(&basis[0], &phi, &free);
        assert!((r[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn determined_endpoint_example1() {
        let candidates = determined_endpoint(&example1_surface()).unwrap();
        assert_eq!(candidates.len(), 2);
        assert!((&candidates[0] - example1_phi()).norm() < 1e-12);
        for phi in &candidates {
            assert!(surface_residual(phi, &example1_surface()).norm() <= 1e-10);
        }
    }

    #[test]
    fn determined_endpoint_example2() {
        let candidates = determined_endpoint(&example2_surface()).unwrap();
        let r3 = 3.0f64.sqrt();
        let expected = dmatrix![-r3 / 2.0, -1.5; 1.5, -r3 / 2.0];
        assert!((&candidates[0] - expected).norm() < 1e-12);
        for phi in &candidates {
            assert!(surface_residual(phi, &example2_surface()).norm() <= 1e-10);
        }
    }

    #[test]
    fn determined_endpoint_identity_data() {
        let surface = TerminalSurface::new(
            SpdMatrix::identity(2),
            SpdMatrix::identity(2),
            col(&[0.6, 0.8]),
            col(&[0.6, 0.8]),
        )
        .unwrap();
        let candidates = determined_endpoint(&surface).unwrap();
        assert!((&candidates[0] - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn determined_endpoint_rejects_infeasible_and_underdetermined() {
        let infeasible = TerminalSurface::new(
            SpdMatrix::identity(2),
            SpdMatrix::identity(2),
            col(&[1.0, 0.0]),
            col(&[2.0, 0.0]),
        )
        .unwrap();
        assert!(matches!(
            determined_endpoint(&infeasible),
            Err(Error::InfeasibleSurface { .. })
        ));

        let underdetermined = TerminalSurface::new(
            SpdMatrix::identity(3),
            SpdMatrix::identity(3),
            col(&[1.0, 0.0, 0.0]),
            col(&[0.0, 1.0, 0.0]),
        )
        .unwrap();
        assert!(matches!(
            determined_endpoint(&underdetermined),
            Err(Error::NotDetermined { tangent_dim: 1 })
        ));
    }
}
