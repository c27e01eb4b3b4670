//! Problem data curves: covariance paths `t -> (Sigma_t, dSigma_t)` and tracer
//! paths `t -> (Y_t, dY_t)` on `[0,1]`, from closed-form generators or sampled
//! nodes.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::matops::{sqrt_spd, SpdMatrix};

/// Which kind of covariance data a path carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovarianceKind {
    McCann,
    Sampled,
    EndpointsOnly,
}

/// A covariance curve `t -> (Sigma_t, dSigma_t)` on `[0,1]`.
///
/// The `EndpointsOnly` kind evaluates only at `t in {0, 1}` and carries no
/// derivative information; it is the regime where only endpoint marginals are
/// known and the flow is pinned down by tracer trajectories instead.
#[derive(Clone)]
pub enum CovariancePath {
    McCann {
        sigma0: SpdMatrix,
        sigma1: SpdMatrix,
        /// The optimal (Bures) map T with Sigma_1 = T Sigma_0 T.
        map: DMatrix<f64>,
    },
    Sampled(HermiteGrid),
    EndpointsOnly {
        sigma0: SpdMatrix,
        sigma1: SpdMatrix,
    },
}

impl CovariancePath {
    /// Displacement-interpolation geodesic between Gaussian covariances:
    /// `Sigma_t = A_t Sigma_0 A_t^T` with `A_t = (1-t) I + t T` and
    /// `T = Sigma_0^{-1/2} (Sigma_0^{1/2} Sigma_1 Sigma_0^{1/2})^{1/2} Sigma_0^{-1/2}`.
    ///
    /// For `Sigma_0 = I` the map reduces to `T = Sigma_1^{1/2}`.
    pub fn mccann(sigma0: SpdMatrix, sigma1: SpdMatrix) -> Result<Self> {
        if sigma0.dim() != sigma1.dim() {
            return Err(Error::SchemaError(format!(
                "covariance dimensions differ: {} vs {}",
                sigma0.dim(),
                sigma1.dim()
            )));
        }
        let s0_sqrt = sqrt_spd(&sigma0);
        let s0_inv_sqrt = sigma0.inv_sqrt();
        let middle = SpdMatrix::new(s0_sqrt.matrix() * sigma1.matrix() * s0_sqrt.matrix())?;
        let map = s0_inv_sqrt.matrix() * sqrt_spd(&middle).matrix() * s0_inv_sqrt.matrix();
        let map = 0.5 * (&map + map.transpose());
        Ok(CovariancePath::McCann { sigma0, sigma1, map })
    }

    pub fn sampled(nodes: Vec<(f64, SpdMatrix)>) -> Result<Self> {
        let raw: Vec<(f64, DMatrix<f64>)> = nodes
            .into_iter()
            .map(|(t, s)| (t, s.into_matrix()))
            .collect();
        Ok(CovariancePath::Sampled(HermiteGrid::new(raw)?))
    }

    pub fn endpoints_only(sigma0: SpdMatrix, sigma1: SpdMatrix) -> Result<Self> {
        if sigma0.dim() != sigma1.dim() {
            return Err(Error::SchemaError(
                "endpoint covariance dimensions differ".into(),
            ));
        }
        Ok(CovariancePath::EndpointsOnly { sigma0, sigma1 })
    }

    pub fn kind(&self) -> CovarianceKind {
        match self {
            CovariancePath::McCann { .. } => CovarianceKind::McCann,
            CovariancePath::Sampled(_) => CovarianceKind::Sampled,
            CovariancePath::EndpointsOnly { .. } => CovarianceKind::EndpointsOnly,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            CovariancePath::McCann { sigma0, .. } => sigma0.dim(),
            CovariancePath::Sampled(grid) => grid.rows(),
            CovariancePath::EndpointsOnly { sigma0, .. } => sigma0.dim(),
        }
    }

    pub fn sigma0(&self) -> Result<SpdMatrix> {
        let (s, _) = self.eval(0.0)?;
        Ok(s)
    }

    pub fn sigma1(&self) -> Result<SpdMatrix> {
        let (s, _) = self.eval(1.0)?;
        Ok(s)
    }

    /// Evaluates `(Sigma_t, dSigma_t)`.
    pub fn eval(&self, t: f64) -> Result<(SpdMatrix, DMatrix<f64>)> {
        match self {
            CovariancePath::McCann { sigma0, sigma1, map } => {
                let n = sigma0.dim();
                if t == 0.0 {
                    // Endpoints reproduce the inputs exactly.
                    let a_dot = map - DMatrix::identity(n, n);
                    let d = &a_dot * sigma0.matrix() + sigma0.matrix() * a_dot.transpose();
                    return Ok((sigma0.clone(), d));
                }
                if t == 1.0 {
                    let a_dot = map - DMatrix::identity(n, n);
                    let d = &a_dot * sigma0.matrix() * map.transpose()
                        + map * sigma0.matrix() * a_dot.transpose();
                    return Ok((sigma1.clone(), d));
                }
                let a_t = (1.0 - t) * DMatrix::identity(n, n) + t * map;
                let a_dot = map - DMatrix::identity(n, n);
                let sigma = &a_t * sigma0.matrix() * a_t.transpose();
                let d = &a_dot * sigma0.matrix() * a_t.transpose()
                    + &a_t * sigma0.matrix() * a_dot.transpose();
                Ok((SpdMatrix::new(sigma)?, 0.5 * (&d + d.transpose())))
            }
            CovariancePath::Sampled(grid) => {
                let (value, deriv) = grid.eval(t)?;
                let sigma = SpdMatrix::new(value).map_err(|_| Error::InterpolantNotSpd { t })?;
                Ok((sigma, 0.5 * (&deriv + deriv.transpose())))
            }
            CovariancePath::EndpointsOnly { sigma0, sigma1 } => {
                let n = sigma0.dim();
                if t == 0.0 {
                    Ok((sigma0.clone(), DMatrix::zeros(n, n)))
                } else if t == 1.0 {
                    Ok((sigma1.clone(), DMatrix::zeros(n, n)))
                } else {
                    Err(Error::RegimeMismatch(format!(
                        "endpoint-only covariance data cannot be evaluated at t = {t}"
                    )))
                }
            }
        }
    }
}

/// Which kind of tracer data a path carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TracerKind {
    Trajectory,
    EndpointsOnly,
}

type AnalyticTracer = Arc<dyn Fn(f64) -> (DMatrix<f64>, DMatrix<f64>) + Send + Sync>;

/// Tracer data: either endpoint placements `(Y_0, Y_1)` or a differentiable
/// curve `t -> (Y_t, dY_t)` of full column rank.
#[derive(Clone)]
pub enum TracerPath {
    Sampled(HermiteGrid),
    Analytic {
        f: AnalyticTracer,
        n: usize,
        m: usize,
    },
    EndpointsOnly {
        y0: DMatrix<f64>,
        y1: DMatrix<f64>,
    },
}

/// Relative smallest-singular-value floor for tracer full-rank certification.
pub const TRACER_RANK_TOL: f64 = 1e-10;

impl TracerPath {
    pub fn sampled(nodes: Vec<(f64, DMatrix<f64>)>) -> Result<Self> {
        for (t, y) in &nodes {
            certify_full_column_rank(y).map_err(|_| {
                Error::RankDeficientTracer(format!("sample node at t = {t} is rank deficient"))
            })?;
        }
        Ok(TracerPath::Sampled(HermiteGrid::new(nodes)?))
    }

    /// Closed-form trajectory with analytic derivative.
    pub fn analytic(
        n: usize,
        m: usize,
        f: impl Fn(f64) -> (DMatrix<f64>, DMatrix<f64>) + Send + Sync + 'static,
    ) -> Self {
        TracerPath::Analytic {
            f: Arc::new(f),
            n,
            m,
        }
    }

    pub fn endpoints_only(y0: DMatrix<f64>, y1: DMatrix<f64>) -> Result<Self> {
        if y0.shape() != y1.shape() {
            return Err(Error::SchemaError("tracer endpoint shapes differ".into()));
        }
        certify_full_column_rank(&y0)?;
        certify_full_column_rank(&y1)?;
        Ok(TracerPath::EndpointsOnly { y0, y1 })
    }

    pub fn kind(&self) -> TracerKind {
        match self {
            TracerPath::EndpointsOnly { .. } => TracerKind::EndpointsOnly,
            _ => TracerKind::Trajectory,
        }
    }

    /// (state dimension n, tracer count m)
    pub fn shape(&self) -> (usize, usize) {
        match self {
            TracerPath::Sampled(grid) => (grid.rows(), grid.cols()),
            TracerPath::Analytic { n, m, .. } => (*n, *m),
            TracerPath::EndpointsOnly { y0, .. } => y0.shape(),
        }
    }

    pub fn y0(&self) -> Result<DMatrix<f64>> {
        Ok(self.eval(0.0)?.0)
    }

    pub fn y1(&self) -> Result<DMatrix<f64>> {
        Ok(self.eval(1.0)?.0)
    }

    /// Evaluates `(Y_t, dY_t)`, certifying full column rank.
    pub fn eval(&self, t: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (y, y_dot) = match self {
            TracerPath::Sampled(grid) => grid.eval(t)?,
            TracerPath::Analytic { f, .. } => f(t),
            TracerPath::EndpointsOnly { y0, y1 } => {
                let zero = DMatrix::zeros(y0.nrows(), y0.ncols());
                if t == 0.0 {
                    (y0.clone(), zero)
                } else if t == 1.0 {
                    (y1.clone(), zero)
                } else {
                    return Err(Error::RegimeMismatch(format!(
                        "endpoint-only tracer data cannot be evaluated at t = {t}"
                    )));
                }
            }
        };
        certify_full_column_rank(&y)
            .map_err(|_| Error::RankDeficientTracer(format!("tracer matrix at t = {t}")))?;
        Ok((y, y_dot))
    }
}

fn certify_full_column_rank(y: &DMatrix<f64>) -> Result<()> {
    let svd = y.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if y.nrows() < y.ncols() || !(smin > TRACER_RANK_TOL * smax) {
        return Err(Error::RankDeficientTracer(format!(
            "singular values span [{smin:.3e}, {smax:.3e}]"
        )));
    }
    Ok(())
}

/// Entrywise C^1 cubic Hermite interpolant of matrix-valued samples.
///
/// Node slopes come from three-point finite differences (second order on
/// nonuniform grids, exact for entrywise quadratics); evaluation at a sample
/// node reproduces the sample exactly.
#[derive(Debug, Clone)]
pub struct HermiteGrid {
    times: Vec<f64>,
    values: Vec<DMatrix<f64>>,
    slopes: Vec<DMatrix<f64>>,
}

impl HermiteGrid {
    pub fn new(nodes: Vec<(f64, DMatrix<f64>)>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(Error::NonMonotoneGrid("need at least two nodes".into()));
        }
        let times: Vec<f64> = nodes.iter().map(|(t, _)| *t).collect();
        if times[0] != 0.0 || *times.last().unwrap() != 1.0 {
            return Err(Error::NonMonotoneGrid(format!(
                "nodes must cover [0,1], got [{}, {}]",
                times[0],
                times.last().unwrap()
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::NonMonotoneGrid(
                "node times must be strictly increasing".into(),
            ));
        }
        let shape = nodes[0].1.shape();
        if nodes.iter().any(|(_, v)| v.shape() != shape) {
            return Err(Error::NonMonotoneGrid("node shapes differ".into()));
        }
        let values: Vec<DMatrix<f64>> = nodes.into_iter().map(|(_, v)| v).collect();
        let slopes = fd_slopes(&times, &values);
        Ok(Self {
            times,
            values,
            slopes,
        })
    }

    pub fn rows(&self) -> usize {
        self.values[0].nrows()
    }

    pub fn cols(&self) -> usize {
        self.values[0].ncols()
    }

    pub fn eval(&self, t: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::NonMonotoneGrid(format!("t = {t} outside [0,1]")));
        }
        // Exact reproduction at nodes.
        if let Some(i) = self.times.iter().position(|&ti| ti == t) {
            return Ok((self.values[i].clone(), self.slopes[i].clone()));
        }
        let i = match self.times.partition_point(|&ti| ti < t) {
            0 => 0,
            k => k - 1,
        };
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let h = t1 - t0;
        let s = (t - t0) / h;
        let (v0, v1) = (&self.values[i], &self.values[i + 1]);
        let (d0, d1) = (&self.slopes[i], &self.slopes[i + 1]);
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let value = h00 * v0 + (h10 * h) * d0 + h01 * v1 + (h11 * h) * d1;
        let g00 = (6.0 * s2 - 6.0 * s) / h;
        let g10 = 3.0 * s2 - 4.0 * s + 1.0;
        let g01 = (-6.0 * s2 + 6.0 * s) / h;
        let g11 = 3.0 * s2 - 2.0 * s;
        let deriv = g00 * v0 + g10 * d0 + g01 * v1 + g11 * d1;
        Ok((value, deriv))
    }
}

fn fd_slopes(times: &[f64], values: &[DMatrix<f64>]) -> Vec<DMatrix<f64>> {
    let k = times.len();
    if k == 2 {
        let d = (&values[1] - &values[0]) / (times[1] - times[0]);
        return vec![d.clone(), d];
    }
    let mut slopes = Vec::with_capacity(k);
    for i in 0..k {
        let slope = if i == 0 {
            quadratic_slope(times[0], times[0], times[1], times[2], &values[0], &values[1], &values[2])
        } else if i == k - 1 {
            quadratic_slope(
                times[k - 1],
                times[k - 3],
                times[k - 2],
                times[k - 1],
                &values[k - 3],
                &values[k - 2],
                &values[k - 1],
            )
        } else {
            quadratic_slope(
                times[i],
                times[i - 1],
                times[i],
                times[i + 1],
                &values[i - 1],
                &values[i],
                &values[i + 1],
            )
        };
        slopes.push(slope);
    }
    slopes
}

/// Derivative at `t` of the quadratic through `(t0,v0), (t1,v1), (t2,v2)`.
fn quadratic_slope(
    t: f64,
    t0: f64,
    t1: f64,
    t2: f64,
    v0: &DMatrix<f64>,
    v1: &DMatrix<f64>,
    v2: &DMatrix<f64>,
) -> DMatrix<f64> {
    let l0 = (2.0 * t - t1 - t2) / ((t0 - t1) * (t0 - t2));
    let l1 = (2.0 * t - t0 - t2) / ((t1 - t0) * (t1 - t2));
    let l2 = (2.0 * t - t0 - t1) / ((t2 - t0) * (t2 - t1));
    l0 * v0 + l1 * v1 + l2 * v2
}
