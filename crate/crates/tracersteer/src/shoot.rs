//! Fixed-step matrix ODE integration and the shooting solver that drives
//! boundary (and, in the free-endpoint mode, transversality) residuals to zero
//! over the unknown initial costate `P_0`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::boundary::{
    determined_endpoint, surface_residual, transversality_residual, TerminalSurface,
};
use crate::ensemble::{FlowSolution, IterationRecord, ProblemTag};
use crate::error::{Error, Result};
use crate::matops::SpdMatrix;
use crate::paths::{CovariancePath, TracerPath};
use crate::problem1::{self, P1State};
use crate::problem2::{self, initial_nullspace, EpsilonWeight, P2State};

/// Linear-space operations needed by the Runge-Kutta stepper.
pub trait OdeState: Clone {
    /// `self += a * other`
    fn scaled_add(&mut self, a: f64, other: &Self);
    /// `self *= a`
    fn scale(&mut self, a: f64);
}

impl OdeState for f64 {
    fn scaled_add(&mut self, a: f64, other: &Self) {
        *self += a * other;
    }
    fn scale(&mut self, a: f64) {
        *self *= a;
    }
}

impl OdeState for DMatrix<f64> {
    fn scaled_add(&mut self, a: f64, other: &Self) {
        *self += a * other;
    }
    fn scale(&mut self, a: f64) {
        *self *= a;
    }
}

/// A bundle of matrices integrated jointly (used by verification routines).
impl OdeState for Vec<DMatrix<f64>> {
    fn scaled_add(&mut self, a: f64, other: &Self) {
        for (s, o) in self.iter_mut().zip(other) {
            *s += a * o;
        }
    }
    fn scale(&mut self, a: f64) {
        for s in self.iter_mut() {
            *s *= a;
        }
    }
}

/// Uniform partition of `[0, 1]` stepped with the classical 4th-order
/// Runge-Kutta scheme.
#[derive(Debug, Clone, Copy)]
pub struct IntegratorGrid {
    steps: usize,
}

impl IntegratorGrid {
    pub const MIN_STEPS: usize = 16;

    pub fn new(steps: usize) -> Result<Self> {
        if steps < Self::MIN_STEPS {
            return Err(Error::GridTooCoarse { steps });
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step_size(&self) -> f64 {
        1.0 / self.steps as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.time(i)).collect()
    }

    pub fn time(&self, node: usize) -> f64 {
        if node == self.steps {
            1.0
        } else {
            node as f64 * self.step_size()
        }
    }
}

/// Classical RK4 over the grid; returns the state at every node.
pub fn rk4_integrate<S: OdeState>(
    field: &mut dyn FnMut(f64, &S) -> Result<S>,
    initial: S,
    grid: IntegratorGrid,
) -> Result<Vec<S>> {
    rk4_integrate_monitored(field, &mut |_, _| Ok(()), initial, grid)
}

/// RK4 with a per-node invariant monitor; a failing monitor aborts the sweep.
pub fn rk4_integrate_monitored<S: OdeState>(
    field: &mut dyn FnMut(f64, &S) -> Result<S>,
    monitor: &mut dyn FnMut(f64, &S) -> Result<()>,
    initial: S,
    grid: IntegratorGrid,
) -> Result<Vec<S>> {
    let h = grid.step_size();
    let mut states = Vec::with_capacity(grid.steps() + 1);
    monitor(0.0, &initial)?;
    states.push(initial);
    for i in 0..grid.steps() {
        let t = grid.time(i);
        let y = states.last().unwrap();
        let k1 = field(t, y)?;
        let mut y2 = y.clone();
        y2.scaled_add(0.5 * h, &k1);
        let k2 = field(t + 0.5 * h, &y2)?;
        let mut y3 = y.clone();
        y3.scaled_add(0.5 * h, &k2);
        let k3 = field(t + 0.5 * h, &y3)?;
        let mut y4 = y.clone();
        y4.scaled_add(h, &k3);
        let k4 = field(t + h, &y4)?;

        let mut next = y.clone();
        next.scaled_add(h / 6.0, &k1);
        next.scaled_add(h / 3.0, &k2);
        next.scaled_add(h / 3.0, &k3);
        next.scaled_add(h / 6.0, &k4);
        let t_next = grid.time(i + 1);
        monitor(t_next, &next)?;
        states.push(next);
    }
    Ok(states)
}

/// Tuning knobs of the damped Gauss-Newton shooting iteration.
#[derive(Debug, Clone)]
pub struct ShootingOptions {
    pub residual_tol: f64,
    pub max_iterations: usize,
    pub fd_step: f64,
    pub damping: f64,
    pub multistart: usize,
    pub seed: u64,
}

impl Default for ShootingOptions {
    fn default() -> Self {
        Self {
            residual_tol: 1e-9,
            max_iterations: 100,
            fd_step: 1e-6,
            damping: 1.0,
            multistart: 8,
            seed: 0,
        }
    }
}

/// The assembled necessary-condition system to shoot over.
pub enum ShootingProblem<'a> {
    /// Full covariance path, tracer endpoints; gain carries a skew parameter.
    CovarianceDriven { path: &'a CovariancePath },
    /// Endpoint covariances, full tracer trajectory; gain carries a residual
    /// feedback over the tracer nullspace frame, regularized by `eps`.
    TracerDriven {
        tracers: &'a TracerPath,
        sigma0: SpdMatrix,
        eps: EpsilonWeight,
    },
}

impl ShootingProblem<'_> {
    pub fn dim(&self) -> usize {
        match self {
            ShootingProblem::CovarianceDriven { path } => path.dim(),
            ShootingProblem::TracerDriven { sigma0, .. } => sigma0.dim(),
        }
    }

    pub fn tag(&self) -> ProblemTag {
        match self {
            ShootingProblem::CovarianceDriven { .. } => ProblemTag::CovarianceDriven,
            ShootingProblem::TracerDriven { .. } => ProblemTag::TracerDriven,
        }
    }

    pub fn epsilon(&self) -> f64 {
        match self {
            ShootingProblem::CovarianceDriven { .. } => 0.0,
            ShootingProblem::TracerDriven { eps, .. } => eps.value(),
        }
    }
}

/// Integrated necessary-condition states at every grid node.
pub enum Trajectory {
    CovarianceDriven(Vec<P1State>),
    TracerDriven(Vec<P2State>),
}

impl Trajectory {
    pub fn len(&self) -> usize {
        match self {
            Trajectory::CovarianceDriven(s) => s.len(),
            Trajectory::TracerDriven(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn phi(&self, node: usize) -> &DMatrix<f64> {
        match self {
            Trajectory::CovarianceDriven(s) => &s[node].phi,
            Trajectory::TracerDriven(s) => &s[node].phi,
        }
    }

    pub fn costate(&self, node: usize) -> &DMatrix<f64> {
        match self {
            Trajectory::CovarianceDriven(s) => &s[node].p,
            Trajectory::TracerDriven(s) => &s[node].p,
        }
    }

    pub fn terminal_phi(&self) -> &DMatrix<f64> {
        self.phi(self.len() - 1)
    }
}

/// Relative smallest-singular-value floor below which `Phi` is declared
/// degenerate mid-integration.
const PHI_DEGENERACY_TOL: f64 = 1e-10;

/// Absolute smallest-singular-value floor for the nullspace frame `N_t`.
const NULLSPACE_DEGENERACY_TOL: f64 = 1e-8;

/// Relative singular value cutoff for the finite-difference shooting
/// Jacobian. Matches the square root of the Jacobian's truncation accuracy.
const GN_RANK_TOL: f64 = 1e-6;

fn check_invertible(t: f64, phi: &DMatrix<f64>) -> Result<()> {
    if phi.iter().any(|x| !x.is_finite()) {
        return Err(Error::FlowDegenerate {
            t,
            reason: "state transition overflowed".into(),
        });
    }
    let svd = phi.clone().svd(false, false);
    if svd.singular_values.min() <= PHI_DEGENERACY_TOL * svd.singular_values.max() {
        return Err(Error::FlowDegenerate {
            t,
            reason: "state transition numerically singular".into(),
        });
    }
    Ok(())
}

/// Integrates the necessary-condition system from `(Phi_0 = I, P_0)` (plus
/// `N_0` for the tracer-driven problem).
pub fn integrate_problem(
    problem: &ShootingProblem,
    p0: &DMatrix<f64>,
    grid: IntegratorGrid,
) -> Result<Trajectory> {
    match problem {
        ShootingProblem::CovarianceDriven { path } => {
            let mut field =
                |t: f64, s: &P1State| problem1::p1_vector_field(t, s, path);
            let mut monitor = |t: f64, s: &P1State| check_invertible(t, &s.phi);
            let states = rk4_integrate_monitored(
                &mut field,
                &mut monitor,
                P1State::initial(p0.clone()),
                grid,
            )?;
            Ok(Trajectory::CovarianceDriven(states))
        }
        ShootingProblem::TracerDriven {
            tracers,
            sigma0,
            eps,
        } => {
            let y0 = tracers.y0()?;
            let n0 = initial_nullspace(&y0)?;
            let mut field =
                |t: f64, s: &P2State| problem2::p2_vector_field(t, s, tracers, sigma0, *eps);
            let mut monitor = |t: f64, s: &P2State| {
                check_invertible(t, &s.phi)?;
                if s.nmat.iter().any(|x| !x.is_finite()) {
                    return Err(Error::FlowDegenerate {
                        t,
                        reason: "tracer nullspace frame overflowed".into(),
                    });
                }
                let svd = s.nmat.clone().svd(false, false);
                if svd.singular_values.min() < NULLSPACE_DEGENERACY_TOL {
                    return Err(Error::FlowDegenerate {
                        t,
                        reason: "tracer nullspace frame lost row rank".into(),
                    });
                }
                Ok(())
            };
            let states = rk4_integrate_monitored(
                &mut field,
                &mut monitor,
                P2State::initial(p0.clone(), n0),
                grid,
            )?;
            Ok(Trajectory::TracerDriven(states))
        }
    }
}

/// How the terminal condition enters the shooting residual.
#[derive(Debug, Clone)]
pub enum BoundaryMode {
    /// Terminal transition pinned to a closed-form candidate; residual is the
    /// flattened `Phi_1 - target`.
    Determined { target: DMatrix<f64> },
    /// Surface membership plus transversality of the terminal costate.
    Free,
}

/// Terminal residual of the trajectory launched from costate `p0`.
pub fn shooting_residual(
    p0: &DMatrix<f64>,
    problem: &ShootingProblem,
    surface: &TerminalSurface,
    grid: IntegratorGrid,
    mode: &BoundaryMode,
) -> Result<DVector<f64>> {
    let trajectory = integrate_problem(problem, p0, grid)?;
    Ok(residual_of_trajectory(&trajectory, surface, mode))
}

fn residual_of_trajectory(
    trajectory: &Trajectory,
    surface: &TerminalSurface,
    mode: &BoundaryMode,
) -> DVector<f64> {
    let phi1 = trajectory.terminal_phi();
    match mode {
        BoundaryMode::Determined { target } => {
            let defect = phi1 - target;
            DVector::from_column_slice(defect.as_slice())
        }
        BoundaryMode::Free => {
            let surf = surface_residual(phi1, surface);
            let p1 = trajectory.costate(trajectory.len() - 1);
            let trans = transversality_residual(p1, phi1, surface);
            let mut entries = surf.as_slice().to_vec();
            entries.extend_from_slice(trans.as_slice());
            DVector::from_vec(entries)
        }
    }
}

/// Minimum-norm least-squares solve via rank-tolerant SVD pseudo-inverse.
pub fn pinv_solve(jac: &DMatrix<f64>, rhs: &DVector<f64>, rank_tol: f64) -> DVector<f64> {
    let svd = jac.clone().svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let smax = svd.singular_values.max();
    let mut out = DVector::zeros(jac.ncols());
    for i in 0..svd.singular_values.len() {
        let s = svd.singular_values[i];
        if s > rank_tol * smax && s > 0.0 {
            let coeff = u.column(i).dot(rhs) / s;
            out.axpy(coeff, &v_t.row(i).transpose(), 1.0);
        }
    }
    out
}

struct GaussNewtonOutcome {
    p0: DMatrix<f64>,
    residual_norm: f64,
    iterations: usize,
    converged: bool,
    log: Vec<IterationRecord>,
}

fn gauss_newton(
    residual: &mut dyn FnMut(&DMatrix<f64>) -> Result<DVector<f64>>,
    start: DMatrix<f64>,
    opts: &ShootingOptions,
) -> Result<GaussNewtonOutcome> {
    let n = start.nrows();
    let dof = n * n;
    let mut p0 = start;
    let mut r = residual(&p0)?;
    let mut log = Vec::new();
    let mut rank_deficient = false; // log the min-norm fallback only once
    let mut damping_used = opts.damping;

    for iter in 0..opts.max_iterations {
        let norm = r.norm();
        log.push(IterationRecord {
            iteration: iter,
            residual_norm: norm,
            damping: damping_used,
        });
        if norm <= opts.residual_tol {
            return Ok(GaussNewtonOutcome {
                p0,
                residual_norm: norm,
                iterations: iter,
                converged: true,
                log,
            });
        }

        // Central-difference Jacobian, column-wise over vec(P_0); central
        // differences keep the direction usable down to residuals well below
        // the convergence tolerance.
        let h = opts.fd_step * 1.0f64.max(p0.norm());
        let mut jac = DMatrix::zeros(r.len(), dof);
        for j in 0..dof {
            let mut plus = p0.clone();
            plus.as_mut_slice()[j] += h;
            let mut minus = p0.clone();
            minus.as_mut_slice()[j] -= h;
            let rp = residual(&plus)?;
            let rm = residual(&minus)?;
            jac.set_column(j, &((rp - rm) / (2.0 * h)));
        }
        // The residual map is often structurally rank deficient (the reachable
        // endpoints form a low dimensional manifold), so finite-difference
        // noise shows up as spurious small singular values. A loose relative
        // cutoff keeps them out of the step.
        let svd_rank = jac.rank(GN_RANK_TOL * jac.norm().max(1.0));
        if svd_rank < r.len().min(dof) {
            if !rank_deficient {
                log::debug!(
                    "shooting residual map rank {svd_rank} < {}; using minimum-norm steps",
                    r.len().min(dof)
                );
            }
            rank_deficient = true;
        }
        let step_vec = pinv_solve(&jac, &(-&r), GN_RANK_TOL);
        let step = DMatrix::from_column_slice(n, n, step_vec.as_slice());

        let mut lambda = opts.damping;
        let mut accepted = false;
        for _ in 0..30 {
            let candidate = &p0 + lambda * &step;
            match residual(&candidate) {
                Ok(rc) if rc.norm() < norm => {
                    p0 = candidate;
                    r = rc;
                    damping_used = lambda;
                    accepted = true;
                    break;
                }
                _ => lambda *= 0.5,
            }
        }
        if !accepted {
            return Ok(GaussNewtonOutcome {
                p0,
                residual_norm: norm,
                iterations: iter,
                converged: false,
                log,
            });
        }
    }

    let norm = r.norm();
    let converged = norm <= opts.residual_tol;
    Ok(GaussNewtonOutcome {
        p0,
        residual_norm: norm,
        iterations: opts.max_iterations,
        converged,
        log,
    })
}

/// Solves the two-point boundary value problem by damped Gauss-Newton
/// shooting over `P_0`, with multistart seeding and (when the terminal
/// geometry admits closed-form candidates) candidate enumeration. Among the
/// converged runs the solution of lowest total cost is returned.
pub fn solve_shooting(
    problem: &ShootingProblem,
    surface: &TerminalSurface,
    grid: IntegratorGrid,
    opts: &ShootingOptions,
) -> Result<FlowSolution> {
    let n = problem.dim();
    let modes: Vec<BoundaryMode> = match determined_endpoint(surface) {
        Ok(candidates) => candidates
            .into_iter()
            // The flow starts at the identity and stays invertible, so its
            // determinant stays positive; orientation-reversing candidates
            // are unreachable.
            .filter(|target| target.determinant() > 0.0)
            .map(|target| BoundaryMode::Determined { target })
            .collect(),
        Err(Error::NotDetermined { .. }) => vec![BoundaryMode::Free],
        Err(e) => return Err(e),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, n)];
    for _ in 1..opts.multistart.max(1) {
        starts.push(DMatrix::from_fn(n, n, |_, _| {
            let x: f64 = rng.sample(StandardNormal);
            0.5 * x
        }));
    }

    let mut best: Option<(f64, FlowSolution)> = None;
    let mut best_failure: Option<(f64, usize)> = None;

    for (candidate_index, mode) in modes.iter().enumerate() {
        for start in &starts {
            let mut residual_fn = |p0: &DMatrix<f64>| {
                shooting_residual(p0, problem, surface, grid, mode)
            };
            let outcome = match gauss_newton(&mut residual_fn, start.clone(), opts) {
                Ok(o) => o,
                Err(_) => continue, // degenerate launch, try the next seed
            };
            if !outcome.converged {
                let record = (outcome.residual_norm, outcome.iterations);
                if best_failure.map_or(true, |(r, _)| outcome.residual_norm < r) {
                    best_failure = Some(record);
                }
                continue;
            }
            let solution = assemble_solution(
                problem,
                surface,
                grid,
                &outcome,
                candidate_index,
            )?;
            let total = solution.total_cost();
            let better = match &best {
                None => true,
                Some((best_total, best_sol)) => {
                    total < best_total - 1e-12
                        || (total <= best_total + 1e-12
                            && solution.residual_norm < best_sol.residual_norm)
                }
            };
            if better {
                best = Some((total, solution));
            }
            // Extra starts are fallbacks, not diversity: the boundary modes
            // already enumerate the distinct solution branches.
            break;
        }
    }

    match best {
        Some((_, solution)) => Ok(solution),
        None => {
            let (best_residual, iterations) = best_failure.unwrap_or((f64::INFINITY, 0));
            Err(Error::NoConvergence {
                best_residual,
                iterations,
            })
        }
    }
}

fn assemble_solution(
    problem: &ShootingProblem,
    surface: &TerminalSurface,
    grid: IntegratorGrid,
    outcome: &GaussNewtonOutcome,
    candidate_index: usize,
) -> Result<FlowSolution> {
    let trajectory = integrate_problem(problem, &outcome.p0, grid)?;
    let times = grid.times();
    let nodes = times.len();

    let mut phis = Vec::with_capacity(nodes);
    let mut gains = Vec::with_capacity(nodes);
    let mut residual_cov = Vec::with_capacity(nodes);
    let mut residual_tracer = Vec::with_capacity(nodes);

    for (i, &t) in times.iter().enumerate() {
        let phi = trajectory.phi(i).clone();
        let (gain, cov_res, tracer_res) = match (&trajectory, problem) {
            (Trajectory::CovarianceDriven(states), ShootingProblem::CovarianceDriven { path }) => {
                let (sigma, sigma_dot) = path.eval(t)?;
                let gain = problem1::gain_at(&states[i], &sigma, &sigma_dot)?;
                let cov_res =
                    (&phi * surface.sigma0.matrix() * phi.transpose() - sigma.matrix()).norm();
                let tracer_res = if t == 0.0 {
                    0.0
                } else if t == 1.0 {
                    (&phi * &surface.y0 - &surface.y1).norm()
                } else {
                    f64::NAN
                };
                (gain, cov_res, tracer_res)
            }
            (
                Trajectory::TracerDriven(states),
                ShootingProblem::TracerDriven {
                    tracers,
                    sigma0,
                    eps,
                },
            ) => {
                let gain = problem2::gain_at(&states[i], tracers, t, sigma0, *eps)?;
                let cov_res = if t == 0.0 || t == 1.0 {
                    let target = if t == 0.0 {
                        surface.sigma0.matrix()
                    } else {
                        surface.sigma1.matrix()
                    };
                    (&phi * surface.sigma0.matrix() * phi.transpose() - target).norm()
                } else {
                    f64::NAN
                };
                let (y_t, _) = tracers.eval(t)?;
                let tracer_res = (&phi * &surface.y0 - y_t).norm();
                (gain, cov_res, tracer_res)
            }
            _ => unreachable!("trajectory kind always matches problem kind"),
        };
        phis.push(phi);
        gains.push(gain);
        residual_cov.push(cov_res);
        residual_tracer.push(tracer_res);
    }

    let mut solution = FlowSolution {
        problem: problem.tag(),
        epsilon: problem.epsilon(),
        times,
        phis,
        gains,
        residual_cov,
        residual_tracer,
        j_ke: 0.0,
        j_a: 0.0,
        converged: outcome.converged,
        iterations: outcome.iterations,
        residual_norm: outcome.residual_norm,
        p0: outcome.p0.clone(),
        endpoint_candidate: candidate_index,
        iteration_log: outcome.log.clone(),
    };
    solution.j_ke = crate::ensemble::kinetic_cost(&solution, &surface.sigma0)?;
    solution.j_a = crate::ensemble::attention_cost(&solution)?;
    solution.validate()?;
    Ok(solution)
}
