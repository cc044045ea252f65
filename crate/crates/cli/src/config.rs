//! Run configuration: a single TOML file per run.
//!
//! Parsing is strict — unknown keys anywhere in the file are rejected, so a
//! typo like `max_iter` fails loudly instead of silently running with the
//! default. Matrices are nested row arrays and are cross-checked for shape
//! before any solver is dispatched.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use steer_core::{LossWeight, ModelError, SteeringProblem};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        source: Box<toml::de::Error>,
    },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemSection,
    #[serde(default)]
    pub method: MethodSection,
    #[serde(default)]
    pub numeric: NumericSection,
    /// Mesh and killing rate for `steer-pde`; other commands ignore it.
    pub pde: Option<PdeSection>,
    #[serde(default)]
    pub output: OutputSection,
}

/// System and boundary data. All matrices are rows of equal length;
/// `horizon` is the terminal time.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
    pub sigma0: Vec<Vec<f64>>,
    pub sigma_t: Vec<Vec<f64>>,
    pub horizon: f64,
}

/// Advisory method name. The subcommand picks what actually runs; a name
/// recorded here just documents what the file was written for.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSection {
    pub name: Option<MethodName>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodName {
    Sdp,
    Riccati,
    Pde,
    Simulate,
}

impl MethodName {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodName::Sdp => "sdp",
            MethodName::Riccati => "riccati",
            MethodName::Pde => "pde",
            MethodName::Simulate => "simulate",
        }
    }
}

/// Discretization and solver budget. `tol` is the convergence tolerance of
/// whichever iteration the subcommand runs (splitting residuals, fixed-point
/// mismatch); `steps` is the number of time intervals N.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericSection {
    pub steps: usize,
    pub tol: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub paths: usize,
    /// Integrator micro-steps per gain interval in `simulate`.
    pub substeps: usize,
}

impl Default for NumericSection {
    fn default() -> Self {
        NumericSection {
            steps: 100,
            tol: 1e-6,
            max_iters: 50_000,
            seed: 0,
            paths: 1000,
            substeps: 1,
        }
    }
}

/// Spatial mesh for the grid solver: `nodes` points on `[lower, upper]`,
/// with an optional constant killing rate.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeSection {
    pub lower: f64,
    pub upper: f64,
    pub nodes: usize,
    #[serde(default)]
    pub killing: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
    /// Which artifact families to emit. The JSON manifest is always
    /// written; listing `csv` (the default) adds the tabular files.
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            directory: PathBuf::from("out"),
            formats: vec![OutputFormat::Csv],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

impl OutputSection {
    pub fn wants_csv(&self) -> bool {
        self.formats.contains(&OutputFormat::Csv)
    }
}

impl RunConfig {
    /// Read and parse `path`, returning the config together with the
    /// SHA-256 of the raw file bytes (recorded in the manifest so a result
    /// directory can be traced back to its exact input).
    pub fn load(path: &Path) -> Result<(Self, String), ConfigError> {
        let bytes = fs::read(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        let digest = Sha256::digest(&bytes);
        let sha: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        let text = String::from_utf8(bytes)
            .map_err(|_| invalid(format!("{} is not valid UTF-8", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.display().to_string(),
            source: Box::new(source),
        })?;
        cfg.check()?;
        Ok((cfg, sha))
    }

    /// Structural validation beyond what serde enforces: positive budgets,
    /// a well-formed mesh, and a problem whose matrices actually fit
    /// together. Runs before any dispatch so every subcommand starts from
    /// checked data.
    fn check(&self) -> Result<(), ConfigError> {
        let num = &self.numeric;
        if num.steps == 0 {
            return Err(invalid("numeric.steps must be at least 1"));
        }
        if !(num.tol > 0.0 && num.tol < 1.0) {
            return Err(invalid(format!(
                "numeric.tol must lie in (0, 1), got {}",
                num.tol
            )));
        }
        if num.max_iters == 0 {
            return Err(invalid("numeric.max_iters must be at least 1"));
        }
        if num.paths == 0 {
            return Err(invalid("numeric.paths must be at least 1"));
        }
        if num.substeps == 0 {
            return Err(invalid("numeric.substeps must be at least 1"));
        }
        if let Some(pde) = &self.pde {
            if !(pde.lower.is_finite() && pde.upper.is_finite() && pde.lower < pde.upper) {
                return Err(invalid(format!(
                    "pde domain [{}, {}] is not a finite interval",
                    pde.lower, pde.upper
                )));
            }
            if pde.nodes < 3 {
                return Err(invalid("pde.nodes must be at least 3"));
            }
            if !(pde.killing.is_finite() && pde.killing >= 0.0) {
                return Err(invalid(format!(
                    "pde.killing must be finite and nonnegative, got {}",
                    pde.killing
                )));
            }
        }
        // Builds the problem once for its shape checks; runs discard this
        // instance and call `problem()` again.
        self.problem()?;
        Ok(())
    }

    /// Assemble the steering problem from the `[problem]` section.
    pub fn problem(&self) -> Result<SteeringProblem, ConfigError> {
        let p = &self.problem;
        let a = matrix(&p.a, "problem.a")?;
        let b = matrix(&p.b, "problem.b")?;
        let s = matrix(&p.s, "problem.s")?;
        let sigma0 = matrix(&p.sigma0, "problem.sigma0")?;
        let sigma_t = matrix(&p.sigma_t, "problem.sigma_t")?;
        if !(p.horizon.is_finite() && p.horizon > 0.0) {
            return Err(invalid(format!(
                "problem.horizon must be positive and finite, got {}",
                p.horizon
            )));
        }
        Ok(SteeringProblem::new(
            a,
            b,
            LossWeight::constant(s),
            sigma0,
            sigma_t,
            p.horizon,
        )?)
    }
}

/// A rectangular, finite matrix from nested TOML arrays.
fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, ConfigError> {
    let nr = rows.len();
    if nr == 0 {
        return Err(invalid(format!("{what} has no rows")));
    }
    let nc = rows[0].len();
    if nc == 0 {
        return Err(invalid(format!("{what} has empty rows")));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != nc {
            return Err(invalid(format!(
                "{what} row {i} has {} entries, the first row has {nc}",
                row.len()
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("{what} row {i} has non-finite entries")));
        }
    }
    Ok(DMatrix::from_row_iterator(
        nr,
        nc,
        rows.iter().flat_map(|r| r.iter().copied()),
    ))
}
