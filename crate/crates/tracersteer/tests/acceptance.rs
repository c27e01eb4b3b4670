//! End-to-end acceptance gate: solves the two bundled scenarios once and
//! checks every acceptance criterion, printing one PASS/FAIL line each.
//! Run with `--nocapture` to see the lines for passing criteria too.

use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{dmatrix, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tracersteer::config::{parse_config, ScenarioConfig, SolveInputs};
use tracersteer::ensemble::{
    perturbation_optimality_check, simulate_ensemble, transcription_oracle, FlowSolution,
    ProblemTag,
};
use tracersteer::matops::{skewness_defect, solve_sym_lyapunov};
use tracersteer::paths::CovariancePath;
use tracersteer::shoot::{
    integrate_problem, rk4_integrate, solve_shooting, IntegratorGrid, ShootingProblem, Trajectory,
};
use tracersteer::SpdMatrix;

struct Solved {
    config: ScenarioConfig,
    inputs: SolveInputs,
    solution: FlowSolution,
    seconds: f64,
}

fn workspace_root() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../.."))
}

fn solve_scenario(file: &str) -> Solved {
    let path = workspace_root().join("scenarios").join(file);
    let text = std::fs::read_to_string(&path).expect("scenario file");
    let config = parse_config(&text).expect("scenario parses");
    let inputs = config.build_inputs(workspace_root()).expect("inputs");
    let grid = config.grid().expect("grid");
    let problem = make_problem(&config, &inputs);
    let start = Instant::now();
    let solution = solve_shooting(&problem, &inputs.surface, grid, &config.shooting)
        .expect("shooting converges");
    let seconds = start.elapsed().as_secs_f64();
    Solved {
        config,
        inputs,
        solution,
        seconds,
    }
}

fn make_problem<'a>(config: &ScenarioConfig, inputs: &'a SolveInputs) -> ShootingProblem<'a> {
    match config.problem {
        ProblemTag::CovarianceDriven => ShootingProblem::CovarianceDriven { path: &inputs.path },
        ProblemTag::TracerDriven => ShootingProblem::TracerDriven {
            tracers: &inputs.tracers,
            sigma0: config.sigma0.clone(),
            eps: inputs.epsilon.expect("tracer-driven scenarios carry epsilon"),
        },
    }
}

fn example1() -> &'static Solved {
    static CELL: OnceLock<Solved> = OnceLock::new();
    CELL.get_or_init(|| solve_scenario("example1.toml"))
}

fn example2() -> &'static Solved {
    static CELL: OnceLock<Solved> = OnceLock::new();
    CELL.get_or_init(|| solve_scenario("example2.toml"))
}

fn report(number: usize, name: &str, ok: bool, detail: String) {
    let status = if ok { "PASS" } else { "FAIL" };
    println!("{status} criterion {number:2} {name}: {detail}");
    assert!(ok, "criterion {number} {name}: {detail}");
}

#[test]
fn c01_example1_terminal_transition() {
    let e = example1();
    let target = dmatrix![0.0, 2.0f64.sqrt(); -1.0, 1.0];
    let err = (e.solution.terminal_phi() - &target).norm();
    let ok = e.solution.converged
        && e.solution.residual_norm <= 1e-9
        && err <= 1e-6
        && e.seconds < 60.0;
    report(
        1,
        "example1 terminal transition",
        ok,
        format!(
            "|Phi_1 - target| = {err:.3e}, residual = {:.3e}, solve time {:.1}s",
            e.solution.residual_norm, e.seconds
        ),
    );
}

#[test]
fn c02_example1_rotation_angle() {
    let e = example1();
    let u = e.config.sigma1.inv_sqrt().matrix()
        * e.solution.terminal_phi()
        * e.config.sigma0.sqrt().matrix();
    let ortho = (u.transpose() * &u - DMatrix::identity(2, 2)).norm();
    let angle = u[(1, 0)].atan2(u[(0, 0)]).to_degrees().abs();
    let ok = ortho <= 1e-6 && (angle - 67.5).abs() <= 0.01;
    report(
        2,
        "example1 orthogonal factor",
        ok,
        format!("rotation {angle:.4} deg (orthogonality defect {ortho:.1e})"),
    );
}

#[test]
fn c03_example2_terminal_transition() {
    let e = example2();
    let s = 3.0f64.sqrt();
    let target = dmatrix![-s / 2.0, -1.5; 1.5, -s / 2.0];
    let err = (e.solution.terminal_phi() - &target).norm();
    let ok = e.solution.converged && e.solution.residual_norm <= 1e-9 && err <= 1e-6;
    report(
        3,
        "example2 terminal transition",
        ok,
        format!(
            "|Phi_1 - target| = {err:.3e}, residual = {:.3e}",
            e.solution.residual_norm
        ),
    );
}

#[test]
fn c04_covariance_constraint_invariance() {
    let e = example1();
    let mut max_cov: f64 = 0.0;
    let mut max_lyap: f64 = 0.0;
    for (k, &t) in e.solution.times.iter().enumerate() {
        let (sigma, sigma_dot) = e.inputs.path.eval(t).unwrap();
        let phi = &e.solution.phis[k];
        let gain = &e.solution.gains[k];
        max_cov =
            max_cov.max((phi * e.config.sigma0.matrix() * phi.transpose() - sigma.matrix()).norm());
        max_lyap = max_lyap
            .max((gain * sigma.matrix() + sigma.matrix() * gain.transpose() - sigma_dot).norm());
    }
    let ok = max_cov <= 1e-6 && max_lyap <= 1e-8;
    report(
        4,
        "covariance-path invariance",
        ok,
        format!("max covariance defect {max_cov:.3e}, max Lyapunov defect {max_lyap:.3e}"),
    );
}

#[test]
fn c05_tracer_constraint_invariance() {
    let e = example2();
    let grid = e.config.grid().unwrap();
    let problem = make_problem(&e.config, &e.inputs);
    let traj = integrate_problem(&problem, &e.solution.p0, grid).unwrap();
    let Trajectory::TracerDriven(states) = &traj else {
        panic!("example2 is tracer-driven");
    };
    let y0 = e.inputs.tracers.y0().unwrap();
    let mut max_tracer: f64 = 0.0;
    let mut max_frame: f64 = 0.0;
    for (k, state) in states.iter().enumerate() {
        let t = grid.time(k);
        let (y, _) = e.inputs.tracers.eval(t).unwrap();
        max_tracer = max_tracer.max((&state.phi * &y0 - &y).norm());
        max_frame = max_frame.max((&state.nmat * &y).norm());
    }
    let ok = max_tracer <= 1e-6 && max_frame <= 1e-8;
    report(
        5,
        "tracer-trajectory invariance",
        ok,
        format!("max tracer defect {max_tracer:.3e}, max |N_t Y_t| {max_frame:.3e}"),
    );
}

#[test]
fn c06_kinetic_cost_lower_bound() {
    let e = example1();
    let s0 = &e.config.sigma0;
    let s1 = &e.config.sigma1;
    let root = s0.sqrt();
    let inner = root.matrix() * s1.matrix() * root.matrix();
    let cross = SpdMatrix::new(inner).unwrap().sqrt();
    let bures =
        0.5 * (s0.matrix().trace() + s1.matrix().trace() - 2.0 * cross.matrix().trace());
    let ok = (bures - 0.386875).abs() <= 1e-4 && e.solution.j_ke >= bures - 1e-4;
    report(
        6,
        "unconstrained transport lower bound",
        ok,
        format!("J_KE = {:.6} >= {bures:.6}", e.solution.j_ke),
    );
}

#[test]
fn c07_transcription_oracle_dominance() {
    let e1 = example1();
    let p1 = make_problem(&e1.config, &e1.inputs);
    let oracle1 = transcription_oracle(&p1, &e1.inputs.surface, 8, 32).unwrap();
    let e2 = example2();
    let p2 = make_problem(&e2.config, &e2.inputs);
    let oracle2 = transcription_oracle(&p2, &e2.inputs.surface, 8, 32).unwrap();
    let ok = oracle1 >= e1.solution.total_cost() - 1e-4
        && oracle2 >= e2.solution.total_cost() - 1e-4;
    report(
        7,
        "restricted-control oracle dominance",
        ok,
        format!(
            "example1 oracle {oracle1:.6} vs solver {:.6}; example2 oracle {oracle2:.6} vs solver {:.6}",
            e1.solution.total_cost(),
            e2.solution.total_cost()
        ),
    );
}

#[test]
fn c08_perturbation_local_optimality() {
    let mut ok = true;
    let mut details = Vec::new();
    for (label, e) in [("example1", example1()), ("example2", example2())] {
        let grid = e.config.grid().unwrap();
        let problem = make_problem(&e.config, &e.inputs);
        let small =
            perturbation_optimality_check(&e.solution, &problem, &e.inputs.surface, grid, 1e-3, 32, 5)
                .unwrap();
        let large =
            perturbation_optimality_check(&e.solution, &problem, &e.inputs.surface, grid, 1e-2, 32, 5)
                .unwrap();
        let growth = large.mean_delta_cost / small.mean_delta_cost;
        let here = !small.decrease_found
            && !large.decrease_found
            && small.min_delta_cost >= -1e-8
            && large.min_delta_cost >= -1e-8
            && (30.0..=300.0).contains(&growth);
        ok &= here;
        details.push(format!(
            "{label} min delta {:.2e}/{:.2e}, quadratic growth x{growth:.0}",
            small.min_delta_cost, large.min_delta_cost
        ));
    }
    report(8, "perturbation optimality", ok, details.join("; "));
}

#[test]
fn c09_property_suites() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut rand_mat = |n: usize| DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() * 2.0 - 1.0);

    // Skew-coefficient Lyapunov solves, 200 trials.
    let mut max_lyap_res: f64 = 0.0;
    let mut max_skew: f64 = 0.0;
    for _ in 0..200 {
        let a = rand_mat(3);
        let sigma = SpdMatrix::new(&a * a.transpose() + 0.5 * DMatrix::identity(3, 3)).unwrap();
        let c_raw = rand_mat(3);
        let c = &c_raw - c_raw.transpose();
        let x = solve_sym_lyapunov(&sigma, &c).unwrap();
        let res = (&x * sigma.matrix() + sigma.matrix() * &x - &c).norm() / c.norm().max(1.0);
        max_lyap_res = max_lyap_res.max(res);
        max_skew = max_skew.max(skewness_defect(&x));
    }

    // Displacement-interpolation endpoint reproduction and derivative checks.
    let mut max_endpoint: f64 = 0.0;
    let mut max_fd: f64 = 0.0;
    for _ in 0..50 {
        let a = rand_mat(2);
        let b = rand_mat(2);
        let s0 = SpdMatrix::new(&a * a.transpose() + 0.5 * DMatrix::identity(2, 2)).unwrap();
        let s1 = SpdMatrix::new(&b * b.transpose() + 0.5 * DMatrix::identity(2, 2)).unwrap();
        let path = CovariancePath::mccann(s0.clone(), s1.clone()).unwrap();
        max_endpoint = max_endpoint
            .max((path.eval(0.0).unwrap().0.matrix() - s0.matrix()).norm())
            .max((path.eval(1.0).unwrap().0.matrix() - s1.matrix()).norm());
        let h = 1e-4;
        for t in [0.2, 0.5, 0.8] {
            let (_, d) = path.eval(t).unwrap();
            let fd = (path.eval(t + h).unwrap().0.matrix() - path.eval(t - h).unwrap().0.matrix())
                / (2.0 * h);
            max_fd = max_fd.max((fd - &d).norm() / d.norm().max(1.0));
        }
    }

    // RK4 keeps a rotation flow orthogonal.
    let omega = dmatrix![0.0, -3.0; 3.0, 0.0];
    let mut field = |_: f64, q: &DMatrix<f64>| Ok(&omega * q);
    let states = rk4_integrate(
        &mut field,
        DMatrix::identity(2, 2),
        IntegratorGrid::new(256).unwrap(),
    )
    .unwrap();
    let ortho = states
        .iter()
        .map(|q| (q.transpose() * q - DMatrix::identity(2, 2)).norm())
        .fold(0.0f64, f64::max);

    // Solution stability under grid doubling.
    let e = example1();
    let problem = make_problem(&e.config, &e.inputs);
    let fine = solve_shooting(
        &problem,
        &e.inputs.surface,
        IntegratorGrid::new(2 * e.config.steps).unwrap(),
        &e.config.shooting,
    )
    .unwrap();
    let doubling = (fine.terminal_phi() - e.solution.terminal_phi()).norm();

    let ok = max_lyap_res <= 1e-10
        && max_skew <= 1e-10
        && max_endpoint <= 1e-12
        && max_fd <= 1e-6
        && ortho <= 1e-9
        && doubling <= 1e-5;
    report(
        9,
        "property suites",
        ok,
        format!(
            "Lyapunov {max_lyap_res:.1e}, skewness {max_skew:.1e}, endpoints {max_endpoint:.1e}, \
             derivative FD {max_fd:.1e}, RK4 orthogonality {ortho:.1e}, grid doubling {doubling:.1e}"
        ),
    );
}

#[test]
fn c10_monte_carlo_verification() {
    let mut ok = true;
    let mut details = Vec::new();
    for (label, e) in [("example1", example1()), ("example2", example2())] {
        let run = |seed: u64| {
            simulate_ensemble(
                &e.solution,
                &e.config.sigma0,
                &e.inputs.tracers,
                100_000,
                seed,
            )
            .unwrap()
        };
        let first = run(2026);
        let again = run(2026);
        let worst = first.cov_error_rel.iter().fold(0.0f64, |m, &x| m.max(x));
        let reproducible = first
            .empirical
            .iter()
            .zip(&again.empirical)
            .all(|(a, b)| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let here = first.checkpoints.len() == 5 && worst <= 0.03 && reproducible;
        ok &= here;
        details.push(format!(
            "{label} worst relative covariance error {worst:.4}, reproducible {reproducible}"
        ));
    }
    report(10, "ensemble simulation", ok, details.join("; "));
}
