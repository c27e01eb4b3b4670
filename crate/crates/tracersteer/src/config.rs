//! Scenario configuration: TOML parsing, cross-field validation, and
//! assembly of the solver inputs (covariance path, tracer path, terminal
//! surface) from a validated config.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Deserialize;

use crate::artifacts::read_series_csv;
use crate::boundary::TerminalSurface;
use crate::ensemble::ProblemTag;
use crate::error::{Error, Result};
use crate::matops::SpdMatrix;
use crate::paths::{CovariancePath, TracerPath};
use crate::problem2::EpsilonWeight;
use crate::shoot::{IntegratorGrid, ShootingOptions};

pub const DEFAULT_STEPS: usize = 2000;
pub const DEFAULT_CHECKPOINTS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

/// How the covariance data is supplied.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceSpec {
    /// Displacement interpolation between the endpoint covariances.
    Mccann,
    /// Sample nodes from a CSV file (t, then row-major matrix entries).
    Samples(PathBuf),
    /// Endpoints only (tracer-trajectory-driven regime).
    EndpointsOnly,
}

/// How the tracer data is supplied.
#[derive(Debug, Clone, PartialEq)]
pub enum TracerSpec {
    Endpoints {
        y0: DMatrix<f64>,
        y1: DMatrix<f64>,
    },
    TrajectoryFile(PathBuf),
    Generator {
        name: String,
        rho: f64,
        theta1_degrees: f64,
        y0: DMatrix<f64>,
    },
}

/// A validated scenario.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub problem: ProblemTag,
    pub n: usize,
    pub m: usize,
    pub sigma0: SpdMatrix,
    pub sigma1: SpdMatrix,
    pub covariance: CovarianceSpec,
    pub tracer: TracerSpec,
    pub epsilon: f64,
    pub steps: usize,
    pub shooting: ShootingOptions,
    pub output_directory: PathBuf,
    pub checkpoints: Vec<f64>,
}

/// Everything the solver pipeline needs, assembled from a config.
pub struct SolveInputs {
    pub path: CovariancePath,
    pub tracers: TracerPath,
    pub surface: TerminalSurface,
    pub epsilon: Option<EpsilonWeight>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    problem: u8,
    n: usize,
    m: usize,
    sigma0: Vec<Vec<f64>>,
    sigma1: Vec<Vec<f64>>,
    covariance_path: Option<RawCovariancePath>,
    tracers: RawTracers,
    epsilon: Option<f64>,
    integrator: Option<RawIntegrator>,
    shooting: Option<RawShooting>,
    output: Option<RawOutput>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCovariancePath {
    kind: String,
    file: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTracers {
    kind: String,
    y0: Option<Vec<Vec<f64>>>,
    y1: Option<Vec<Vec<f64>>>,
    file: Option<String>,
    generator: Option<String>,
    rho: Option<f64>,
    theta1_degrees: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawIntegrator {
    steps: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawShooting {
    tol: Option<f64>,
    max_iter: Option<usize>,
    multistart: Option<usize>,
    seed: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    directory: Option<String>,
    checkpoints: Option<Vec<f64>>,
}

fn matrix_from_rows(rows: &[Vec<f64>], field: &str, nr: usize, nc: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nr || rows.iter().any(|r| r.len() != nc) {
        return Err(Error::SchemaError(format!(
            "{field} must be a {nr} x {nc} matrix"
        )));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

/// Parses and validates a scenario document. Cross-field regime rules: the
/// covariance-path-driven problem (1) carries a full covariance path and
/// tracer endpoints; the tracer-driven problem (3) carries endpoint
/// covariances and a full tracer trajectory with epsilon > 0.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let raw: RawConfig =
        toml::from_str(text).map_err(|e| Error::SchemaError(e.to_string()))?;
    let problem = ProblemTag::from_number(raw.problem)?;
    let (n, m) = (raw.n, raw.m);
    if n == 0 || m >= n {
        return Err(Error::SchemaError(format!(
            "need 0 < m < n, got n = {n}, m = {m}"
        )));
    }
    let sigma0 = SpdMatrix::new(matrix_from_rows(&raw.sigma0, "sigma0", n, n)?)?;
    let sigma1 = SpdMatrix::new(matrix_from_rows(&raw.sigma1, "sigma1", n, n)?)?;

    let covariance = match (&problem, &raw.covariance_path) {
        (ProblemTag::CovarianceDriven, Some(cp)) => match cp.kind.as_str() {
            "mccann" => CovarianceSpec::Mccann,
            "samples" => {
                let file = cp.file.as_ref().ok_or_else(|| {
                    Error::SchemaError("covariance_path.file required for kind = samples".into())
                })?;
                CovarianceSpec::Samples(PathBuf::from(file))
            }
            other => {
                return Err(Error::SchemaError(format!(
                    "covariance_path.kind must be mccann or samples, got {other}"
                )))
            }
        },
        (ProblemTag::CovarianceDriven, None) => {
            return Err(Error::RegimeMismatch(
                "problem 1 requires a covariance_path section".into(),
            ))
        }
        (ProblemTag::TracerDriven, None) => CovarianceSpec::EndpointsOnly,
        (ProblemTag::TracerDriven, Some(_)) => {
            return Err(Error::RegimeMismatch(
                "problem 3 prescribes covariances at the endpoints only; drop covariance_path"
                    .into(),
            ))
        }
    };

    let tracer = match (&problem, raw.tracers.kind.as_str()) {
        (ProblemTag::CovarianceDriven, "endpoints") => {
            let y0 = raw.tracers.y0.as_ref().ok_or_else(|| {
                Error::SchemaError("tracers.y0 required for kind = endpoints".into())
            })?;
            let y1 = raw.tracers.y1.as_ref().ok_or_else(|| {
                Error::SchemaError("tracers.y1 required for kind = endpoints".into())
            })?;
            TracerSpec::Endpoints {
                y0: matrix_from_rows(y0, "tracers.y0", n, m)?,
                y1: matrix_from_rows(y1, "tracers.y1", n, m)?,
            }
        }
        (ProblemTag::TracerDriven, "trajectory") => {
            match (&raw.tracers.file, &raw.tracers.generator) {
                (Some(file), None) => TracerSpec::TrajectoryFile(PathBuf::from(file)),
                (None, Some(name)) => {
                    let y0 = raw.tracers.y0.as_ref().ok_or_else(|| {
                        Error::SchemaError("tracers.y0 required for a generator".into())
                    })?;
                    TracerSpec::Generator {
                        name: name.clone(),
                        rho: raw.tracers.rho.unwrap_or(1.0),
                        theta1_degrees: raw.tracers.theta1_degrees.unwrap_or(0.0),
                        y0: matrix_from_rows(y0, "tracers.y0", n, m)?,
                    }
                }
                _ => {
                    return Err(Error::SchemaError(
                        "trajectory tracers need exactly one of file or generator".into(),
                    ))
                }
            }
        }
        (ProblemTag::CovarianceDriven, other) => {
            return Err(Error::RegimeMismatch(format!(
                "problem 1 requires tracers.kind = endpoints, got {other}"
            )))
        }
        (ProblemTag::TracerDriven, other) => {
            return Err(Error::RegimeMismatch(format!(
                "problem 3 requires tracers.kind = trajectory, got {other}"
            )))
        }
    };

    let epsilon = raw.epsilon.unwrap_or(1.0);
    match problem {
        ProblemTag::TracerDriven => {
            EpsilonWeight::new(epsilon)?;
        }
        ProblemTag::CovarianceDriven => {
            if raw.epsilon.is_some() {
                return Err(Error::RegimeMismatch(
                    "epsilon applies to problem 3 only".into(),
                ));
            }
        }
    }

    let steps = raw
        .integrator
        .and_then(|i| i.steps)
        .unwrap_or(DEFAULT_STEPS);
    IntegratorGrid::new(steps)?;

    let defaults = ShootingOptions::default();
    let shooting = match raw.shooting {
        Some(s) => ShootingOptions {
            residual_tol: s.tol.unwrap_or(defaults.residual_tol),
            max_iterations: s.max_iter.unwrap_or(defaults.max_iterations),
            multistart: s.multistart.unwrap_or(defaults.multistart),
            seed: s.seed.unwrap_or(defaults.seed),
            ..defaults
        },
        None => defaults,
    };

    let (output_directory, checkpoints) = match raw.output {
        Some(o) => (
            PathBuf::from(o.directory.unwrap_or_else(|| "out".into())),
            o.checkpoints.unwrap_or_else(|| DEFAULT_CHECKPOINTS.to_vec()),
        ),
        None => (PathBuf::from("out"), DEFAULT_CHECKPOINTS.to_vec()),
    };

    Ok(ScenarioConfig {
        problem,
        n,
        m,
        sigma0,
        sigma1,
        covariance,
        tracer,
        epsilon,
        steps,
        shooting,
        output_directory,
        checkpoints,
    })
}

impl ScenarioConfig {
    /// Builds the covariance path, tracer path, and terminal surface;
    /// relative file references resolve against `base_dir`.
    pub fn build_inputs(&self, base_dir: &Path) -> Result<SolveInputs> {
        let path = match &self.covariance {
            CovarianceSpec::Mccann => {
                CovariancePath::mccann(self.sigma0.clone(), self.sigma1.clone())?
            }
            CovarianceSpec::Samples(file) => {
                let (times, mats) = read_series_csv(&base_dir.join(file), self.n, self.n)?;
                let nodes = times
                    .into_iter()
                    .zip(mats)
                    .map(|(t, m)| SpdMatrix::new(m).map(|s| (t, s)))
                    .collect::<Result<Vec<_>>>()?;
                CovariancePath::sampled(nodes)?
            }
            CovarianceSpec::EndpointsOnly => {
                CovariancePath::endpoints_only(self.sigma0.clone(), self.sigma1.clone())?
            }
        };

        let tracers = match &self.tracer {
            TracerSpec::Endpoints { y0, y1 } => {
                TracerPath::endpoints_only(y0.clone(), y1.clone())?
            }
            TracerSpec::TrajectoryFile(file) => {
                let (times, mats) = read_series_csv(&base_dir.join(file), self.n, self.m)?;
                TracerPath::sampled(times.into_iter().zip(mats).collect())?
            }
            TracerSpec::Generator {
                name,
                rho,
                theta1_degrees,
                y0,
            } => builtin_tracer_generator(name, *rho, *theta1_degrees, y0.clone())?,
        };

        let surface = TerminalSurface::new(
            self.sigma0.clone(),
            self.sigma1.clone(),
            tracers.y0()?,
            tracers.y1()?,
        )?;
        let epsilon = match self.problem {
            ProblemTag::TracerDriven => Some(EpsilonWeight::new(self.epsilon)?),
            ProblemTag::CovarianceDriven => None,
        };
        Ok(SolveInputs {
            path,
            tracers,
            surface,
            epsilon,
        })
    }

    pub fn grid(&self) -> Result<IntegratorGrid> {
        IntegratorGrid::new(self.steps)
    }
}

/// Built-in tracer trajectory generators. "spiral" traces
/// `y_t = r(t) R(theta(t)) y_0` with `r(t) = (1-t) + t rho` and
/// `theta(t) = t theta_1`, using the counterclockwise rotation convention
/// `R(theta) = [[cos, -sin], [sin, cos]]`; it requires a planar state.
pub fn builtin_tracer_generator(
    name: &str,
    rho: f64,
    theta1_degrees: f64,
    y0: DMatrix<f64>,
) -> Result<TracerPath> {
    match name {
        "spiral" => {
            if y0.nrows() != 2 {
                return Err(Error::SchemaError(
                    "the spiral generator requires a 2-dimensional state".into(),
                ));
            }
            let theta1 = theta1_degrees.to_radians();
            let m = y0.ncols();
            Ok(TracerPath::analytic(2, m, move |t| {
                let r = (1.0 - t) + t * rho;
                let theta = t * theta1;
                let (s, c) = theta.sin_cos();
                let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
                let drot = DMatrix::from_row_slice(2, 2, &[-s, -c, c, -s]);
                let y = r * &rot * &y0;
                let y_dot = (rho - 1.0) * rot * &y0 + r * theta1 * drot * &y0;
                (y, y_dot)
            }))
        }
        other => Err(Error::UnknownGenerator(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE1: &str = include_str!("../../../scenarios/example1.toml");
    const EXAMPLE2: &str = include_str!("../../../scenarios/example2.toml");

    fn col(entries: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(entries.len(), 1, entries)
    }

    #[test]
    fn example1_scenario_parses() {
        let cfg = parse_config(EXAMPLE1).unwrap();
        assert_eq!(cfg.problem, ProblemTag::CovarianceDriven);
        assert_eq!((cfg.n, cfg.m), (2, 1));
        assert_eq!(cfg.covariance, CovarianceSpec::Mccann);
        let r2 = 2.0f64.sqrt();
        assert!(
            (cfg.sigma1.matrix() - DMatrix::from_row_slice(2, 2, &[2.0, r2, r2, 2.0])).norm()
                < 1e-12
        );
        let TracerSpec::Endpoints { y0, y1 } = &cfg.tracer else {
            panic!("expected tracer endpoints");
        };
        assert!((y0 - col(&[-1.0, 0.0])).norm() < 1e-15);
        assert!((y1 - col(&[0.0, 1.0])).norm() < 1e-15);
        assert_eq!(cfg.steps, 2000);
        assert_eq!(cfg.shooting.residual_tol, 1e-9);
    }

    #[test]
    fn example2_scenario_parses() {
        let cfg = parse_config(EXAMPLE2).unwrap();
        assert_eq!(cfg.problem, ProblemTag::TracerDriven);
        assert_eq!(cfg.epsilon, 1.0);
        assert!((cfg.sigma1.matrix() - 3.0 * DMatrix::<f64>::identity(2, 2)).norm() < 1e-12);
        assert!(matches!(cfg.tracer, TracerSpec::Generator { .. }));
        let inputs = cfg.build_inputs(Path::new(".")).unwrap();
        // Generator endpoints match the prescribed boundary data.
        let r3 = 3.0f64.sqrt();
        assert!((inputs.surface.y0 - col(&[-r3 / 2.0, 0.5])).norm() < 1e-12);
        assert!((inputs.surface.y1 - col(&[0.0, -r3])).norm() < 1e-12);
    }

    #[test]
    fn missing_sigma1_names_the_field() {
        let text = EXAMPLE1.replace("sigma1", "sigma1_typo");
        let err = parse_config(&text).unwrap_err();
        let Error::SchemaError(message) = err else {
            panic!("expected SchemaError, got {err:?}");
        };
        assert!(message.contains("sigma1"), "message: {message}");
    }

    #[test]
    fn regime_rules_are_enforced() {
        // Problem 1 with trajectory tracers.
        let text = EXAMPLE1.replace("kind = \"endpoints\"", "kind = \"trajectory\"");
        assert!(matches!(
            parse_config(&text),
            Err(Error::RegimeMismatch(_))
        ));
        // Problem 3 with an epsilon of zero.
        let text = EXAMPLE2.replace("epsilon = 1.0", "epsilon = 0.0");
        assert!(parse_config(&text).is_err());
        // Problem 1 must not set epsilon.
        let text = EXAMPLE1.replace("problem = 1", "problem = 1\nepsilon = 0.5");
        assert!(matches!(
            parse_config(&text),
            Err(Error::RegimeMismatch(_))
        ));
    }

    #[test]
    fn defaults_are_filled() {
        let minimal = r#"
problem = 1
n = 2
m = 1
sigma0 = [[1.0, 0.0], [0.0, 1.0]]
sigma1 = [[1.0, 0.0], [0.0, 1.0]]
[covariance_path]
kind = "mccann"
[tracers]
kind = "endpoints"
y0 = [[1.0], [0.0]]
y1 = [[1.0], [0.0]]
"#;
        let cfg = parse_config(minimal).unwrap();
        assert_eq!(cfg.steps, DEFAULT_STEPS);
        assert_eq!(cfg.shooting.max_iterations, 100);
        assert_eq!(cfg.shooting.multistart, 8);
        assert_eq!(cfg.epsilon, 1.0);
        assert_eq!(cfg.checkpoints, DEFAULT_CHECKPOINTS.to_vec());
        assert_eq!(cfg.output_directory, PathBuf::from("out"));
    }

    #[test]
    fn spiral_generator_reproduces_reference_endpoints() {
        let r3 = 3.0f64.sqrt();
        let y0 = col(&[-r3 / 2.0, 0.5]);
        let path = builtin_tracer_generator("spiral", r3, 120.0, y0.clone()).unwrap();
        let (start, _) = path.eval(0.0).unwrap();
        assert!((start - &y0).norm() < 1e-15);
        let (end, _) = path.eval(1.0).unwrap();
        assert!((end - col(&[0.0, -r3])).norm() < 1e-12);
    }

    #[test]
    fn spiral_generator_degenerate_parameters_hold_still() {
        let y0 = col(&[0.3, -0.9]);
        let path = builtin_tracer_generator("spiral", 1.0, 0.0, y0.clone()).unwrap();
        for &t in &[0.0, 0.3, 0.7, 1.0] {
            let (y, y_dot) = path.eval(t).unwrap();
            assert!((y - &y0).norm() < 1e-15);
            assert!(y_dot.norm() < 1e-15);
        }
    }

    #[test]
    fn unknown_generator_is_rejected() {
        assert!(matches!(
            builtin_tracer_generator("helix", 1.0, 0.0, col(&[1.0, 0.0])),
            Err(Error::UnknownGenerator(_))
        ));
    }
}
