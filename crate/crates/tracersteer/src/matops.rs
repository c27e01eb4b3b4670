//! Dense small-matrix primitives: SPD certification, principal square roots,
//! structured Lyapunov solves, nullspace extraction.
//!
//! Everything here works on value-semantic `DMatrix<f64>` with `n` in the
//! single digits, so O(n^3) eigendecompositions and the n^2 x n^2 vectorized
//! Lyapunov solve are both cheap and accurate.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative tolerance used when certifying symmetry / skewness.
pub const STRUCTURE_TOL: f64 = 1e-12;

/// Relative eigenvalue floor below which a symmetric matrix is not accepted
/// as positive definite.
pub const POSITIVITY_TOL: f64 = 1e-12;

/// A certified symmetric positive-definite matrix.
///
/// Construction checks symmetry (`max |A_ij - A_ji| <= 1e-12 * max(1, ||A||_F)`)
/// and strict positivity of the spectrum (`lambda_min > 1e-12 * lambda_max`).
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    data: DMatrix<f64>,
}

impl SpdMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        if !data.is_square() {
            return Err(Error::NotSpd(format!(
                "expected square matrix, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        let asym = symmetry_defect(&data);
        let scale = 1.0f64.max(data.norm());
        if asym > STRUCTURE_TOL * scale {
            return Err(Error::NotSpd(format!(
                "symmetry defect {asym:.3e} exceeds {:.3e}",
                STRUCTURE_TOL * scale
            )));
        }
        // Work with the symmetrized matrix so round-off in the input does not
        // leak into the certified value.
        let sym = 0.5 * (&data + data.transpose());
        let eig = SymmetricEigen::new(sym.clone());
        let lambda_max = eig.eigenvalues.max();
        let lambda_min = eig.eigenvalues.min();
        if !(lambda_min > POSITIVITY_TOL * lambda_max.abs()) || lambda_max <= 0.0 {
            return Err(Error::NotSpd(format!(
                "eigenvalue range [{lambda_min:.3e}, {lambda_max:.3e}] is not strictly positive"
            )));
        }
        Ok(Self { data: sym })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            data: DMatrix::identity(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    /// Principal square root via symmetric eigendecomposition.
    pub fn sqrt(&self) -> SpdMatrix {
        SpdMatrix {
            data: self.map_spectrum(f64::sqrt),
        }
    }

    /// Inverse of the principal square root.
    pub fn inv_sqrt(&self) -> SpdMatrix {
        SpdMatrix {
            data: self.map_spectrum(|l| 1.0 / l.sqrt()),
        }
    }

    pub fn inverse(&self) -> SpdMatrix {
        SpdMatrix {
            data: self.map_spectrum(|l| 1.0 / l),
        }
    }

    fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let eig = SymmetricEigen::new(self.data.clone());
        let d = DMatrix::from_diagonal(&eig.eigenvalues.map(f));
        let out = &eig.eigenvectors * d * eig.eigenvectors.transpose();
        // Spectral maps of symmetric matrices are symmetric; remove round-off.
        0.5 * (&out + out.transpose())
    }
}

/// A certified skew-symmetric matrix (`A = -A^T` to within `1e-12 * max(1, ||A||_F)`).
#[derive(Debug, Clone, PartialEq)]
pub struct SkewMatrix {
    data: DMatrix<f64>,
}

impl SkewMatrix {
    pub fn new(data: DMatrix<f64>) -> Result<Self> {
        let defect = skewness_defect(&data);
        let scale = 1.0f64.max(data.norm());
        if !data.is_square() || defect > STRUCTURE_TOL * scale {
            return Err(Error::NotSpd(format!(
                "skewness defect {defect:.3e} exceeds {:.3e}",
                STRUCTURE_TOL * scale
            )));
        }
        let skew = 0.5 * (&data - data.transpose());
        Ok(Self { data: skew })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            data: DMatrix::zeros(n, n),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }
}

pub fn symmetry_defect(a: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

pub fn skewness_defect(a: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        for j in i..a.ncols() {
            worst = worst.max((a[(i, j)] + a[(j, i)]).abs());
        }
    }
    worst
}

/// Principal square root of an SPD matrix.
pub fn sqrt_spd(sigma: &SpdMatrix) -> SpdMatrix {
    sigma.sqrt()
}

/// Solves the symmetric-coefficient Lyapunov equation `X Sigma + Sigma X = C`.
///
/// Uses the vectorized linear system `(I (x) Sigma + Sigma (x) I) vec(X) = vec(C)`,
/// which is invertible since `Sigma` is SPD. Skew `C` gives skew `X`, symmetric
/// `C` gives symmetric `X`, up to round-off.
pub fn solve_sym_lyapunov(sigma: &SpdMatrix, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = sigma.dim();
    if c.nrows() != n || c.ncols() != n {
        return Err(Error::NotSpd(format!(
            "right-hand side is {}x{}, expected {n}x{n}",
            c.nrows(),
            c.ncols()
        )));
    }
    let s = sigma.matrix();
    let eye = DMatrix::<f64>::identity(n, n);
    // vec(X Sigma) = (Sigma^T (x) I) vec(X); Sigma is symmetric.
    let coeff = s.kronecker(&eye) + eye.kronecker(s);
    let rhs = DMatrix::from_column_slice(n * n, 1, c.as_slice());
    let sol = coeff
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::NotSpd("vectorized Lyapunov system is singular".into()))?;
    Ok(DMatrix::from_column_slice(n, n, sol.as_slice()))
}

/// Orthonormal basis of the kernel of `a`, as a `q x k` matrix of columns.
///
/// Singular values below `rank_tol * sigma_max` define the kernel. An empty
/// basis (`k = 0`) is returned for full-rank input.
pub fn nullspace_basis(a: &DMatrix<f64>, rank_tol: f64) -> DMatrix<f64> {
    let (p, q) = a.shape();
    // Thin SVD of a wide matrix does not expose the full right singular basis;
    // padding with zero rows makes V square without changing the kernel.
    let padded = if p < q {
        let mut m = DMatrix::zeros(q, q);
        m.view_mut((0, 0), (p, q)).copy_from(a);
        m
    } else {
        a.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let sigma_max = svd.singular_values.max();
    let threshold = rank_tol * sigma_max;
    let mut kernel_rows: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] <= threshold)
        .collect();
    kernel_rows.sort_unstable();
    let k = kernel_rows.len();
    let mut basis = DMatrix::zeros(q, k);
    for (col, &row) in kernel_rows.iter().enumerate() {
        basis.set_column(col, &v_t.row(row).transpose());
    }
    basis
}
