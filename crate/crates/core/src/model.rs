//! Problem data model: linear dynamics `dx = A x dt + B(u dt + dw)` with a
//! quadratic state weight, boundary covariances to steer between, and the
//! time-grid / covariance / gain containers shared by every solver.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::linalg;

/// Eigenvalue tolerance for definiteness checks, relative to the spectral
/// norm of the matrix under test.
pub const EIG_REL_TOL: f64 = 1e-10;
/// Singular-value threshold for numerical rank, relative to sigma_max.
pub const RANK_REL_TOL: f64 = 1e-8;
/// Two time grids are treated as identical when samples agree within this
/// tolerance relative to the horizon.
pub const GRID_MATCH_REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid time grid: {0}")]
    Grid(String),
    #[error("{0}")]
    Invalid(String),
}

/// State-cost weight S(t): either one constant matrix or samples at given
/// times, applied piecewise-constant (the last sample at or before t).
#[derive(Debug, Clone)]
pub enum LossWeight {
    Constant(DMatrix<f64>),
    Sampled {
        times: Vec<f64>,
        values: Vec<DMatrix<f64>>,
    },
}

impl LossWeight {
    pub fn constant(m: DMatrix<f64>) -> Self {
        LossWeight::Constant(m)
    }

    pub fn zero(n: usize) -> Self {
        LossWeight::Constant(DMatrix::zeros(n, n))
    }

    pub fn dim(&self) -> usize {
        match self {
            LossWeight::Constant(m) => m.nrows(),
            LossWeight::Sampled { values, .. } => values.first().map_or(0, |m| m.nrows()),
        }
    }

    /// Weight in effect at time `t`.
    pub fn at(&self, t: f64) -> &DMatrix<f64> {
        match self {
            LossWeight::Constant(m) => m,
            LossWeight::Sampled { times, values } => {
                let idx = match times.binary_search_by(|probe| probe.partial_cmp(&t).unwrap()) {
                    Ok(i) => i,
                    Err(0) => 0,
                    Err(i) => i - 1,
                };
                &values[idx]
            }
        }
    }

    /// Every distinct sample (one entry for the constant case).
    pub fn samples(&self) -> Vec<&DMatrix<f64>> {
        match self {
            LossWeight::Constant(m) => vec![m],
            LossWeight::Sampled { values, .. } => values.iter().collect(),
        }
    }

    fn check(&self, n: usize) -> Result<(), ModelError> {
        match self {
            LossWeight::Constant(m) => {
                if m.nrows() != n || m.ncols() != n {
                    return Err(ModelError::Dimension(format!(
                        "S is {}x{}, expected {n}x{n}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
            }
            LossWeight::Sampled { times, values } => {
                if times.is_empty() || times.len() != values.len() {
                    return Err(ModelError::Invalid(
                        "sampled S needs matching, nonempty times and values".into(),
                    ));
                }
                if times.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(ModelError::Invalid(
                        "sampled S times must be strictly increasing".into(),
                    ));
                }
                for m in values {
                    if m.nrows() != n || m.ncols() != n {
                        return Err(ModelError::Dimension(format!(
                            "S sample is {}x{}, expected {n}x{n}",
                            m.nrows(),
                            m.ncols()
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Steering task: drive the state covariance of
/// `dx = A x dt + B u dt + B dw` from `sigma0` at t = 0 to `sigma_t` at
/// t = `horizon`, with state weight `s`.
#[derive(Debug, Clone)]
pub struct SteeringProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub s: LossWeight,
    pub sigma0: DMatrix<f64>,
    pub sigma_t: DMatrix<f64>,
    pub horizon: f64,
}

impl SteeringProblem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        s: LossWeight,
        sigma0: DMatrix<f64>,
        sigma_t: DMatrix<f64>,
        horizon: f64,
    ) -> Result<Self, ModelError> {
        let p = SteeringProblem {
            a,
            b,
            s,
            sigma0,
            sigma_t,
            horizon,
        };
        p.check_structure()?;
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// Dimensional consistency; violations are structural errors, distinct
    /// from the semantic checks in [`validate_problem`].
    pub fn check_structure(&self) -> Result<(), ModelError> {
        let n = self.a.nrows();
        if self.a.ncols() != n {
            return Err(ModelError::Dimension(format!(
                "A is {}x{}, expected square",
                self.a.nrows(),
                self.a.ncols()
            )));
        }
        if self.b.nrows() != n {
            return Err(ModelError::Dimension(format!(
                "B has {} rows, expected {n}",
                self.b.nrows()
            )));
        }
        if self.b.ncols() == 0 || self.b.ncols() > n {
            return Err(ModelError::Dimension(format!(
                "B has {} columns, expected 1..={n}",
                self.b.ncols()
            )));
        }
        for (name, m) in [("sigma0", &self.sigma0), ("sigma_t", &self.sigma_t)] {
            if m.nrows() != n || m.ncols() != n {
                return Err(ModelError::Dimension(format!(
                    "{name} is {}x{}, expected {n}x{n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        self.s.check(n)?;
        if !self.horizon.is_finite() || self.horizon <= 0.0 {
            return Err(ModelError::Invalid(format!(
                "horizon must be positive and finite, got {}",
                self.horizon
            )));
        }
        Ok(())
    }
}

/// Strictly increasing time samples `0 = t_0 < ... < t_N = horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self, ModelError> {
        if steps == 0 {
            return Err(ModelError::Grid("need at least one step".into()));
        }
        if !horizon.is_finite() || horizon <= 0.0 {
            return Err(ModelError::Grid(format!("bad horizon {horizon}")));
        }
        let times = (0..=steps)
            .map(|k| horizon * k as f64 / steps as f64)
            .collect();
        Ok(TimeGrid { times })
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self, ModelError> {
        if times.len() < 2 {
            return Err(ModelError::Grid("need at least two samples".into()));
        }
        if times[0] != 0.0 {
            return Err(ModelError::Grid(format!(
                "first sample must be 0, got {}",
                times[0]
            )));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(ModelError::Grid("non-finite sample".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ModelError::Grid("samples must be strictly increasing".into()));
        }
        Ok(TimeGrid { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn t(&self, k: usize) -> f64 {
        self.times[k]
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    /// Number of intervals N.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Number of samples N + 1.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn matches(&self, other: &TimeGrid) -> bool {
        let tol = GRID_MATCH_REL_TOL * self.horizon().max(other.horizon());
        self.times.len() == other.times.len()
            && self
                .times
                .iter()
                .zip(&other.times)
                .all(|(a, b)| (a - b).abs() <= tol)
    }
}

/// Covariance trajectory on a grid; every entry symmetric and PSD within
/// tolerance (eigenvalues above `-1e-10` at unit scale).
#[derive(Debug, Clone)]
pub struct CovariancePath {
    grid: TimeGrid,
    sigmas: Vec<DMatrix<f64>>,
}

impl CovariancePath {
    pub fn new(grid: TimeGrid, sigmas: Vec<DMatrix<f64>>) -> Result<Self, ModelError> {
        if sigmas.len() != grid.len() {
            return Err(ModelError::Grid(format!(
                "{} covariance samples on a grid with {} times",
                sigmas.len(),
                grid.len()
            )));
        }
        for (k, m) in sigmas.iter().enumerate() {
            if m.nrows() != m.ncols() {
                return Err(ModelError::Dimension(format!(
                    "covariance sample {k} is not square"
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Invalid(format!(
                    "covariance sample {k} has non-finite entries"
                )));
            }
            let scale = linalg::spectral_norm_sym(m).max(1.0);
            if linalg::asymmetry(m) > EIG_REL_TOL * scale {
                return Err(ModelError::Invalid(format!(
                    "covariance sample {k} is not symmetric"
                )));
            }
            let min_eig = linalg::min_eigenvalue(m);
            if min_eig < -EIG_REL_TOL * scale {
                return Err(ModelError::Invalid(format!(
                    "covariance sample {k} has eigenvalue {min_eig:.3e} below tolerance"
                )));
            }
        }
        Ok(CovariancePath { grid, sigmas })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn sigma(&self, k: usize) -> &DMatrix<f64> {
        &self.sigmas[k]
    }

    pub fn sigmas(&self) -> &[DMatrix<f64>] {
        &self.sigmas
    }
}

/// Piecewise-constant feedback gains, one m x n block per grid interval;
/// the control law is u = -K_k x on [t_k, t_{k+1}).
#[derive(Debug, Clone)]
pub struct GainSchedule {
    grid: TimeGrid,
    gains: Vec<DMatrix<f64>>,
}

impl GainSchedule {
    pub fn new(grid: TimeGrid, gains: Vec<DMatrix<f64>>) -> Result<Self, ModelError> {
        if gains.len() != grid.steps() {
            return Err(ModelError::Grid(format!(
                "{} gains on a grid with {} intervals",
                gains.len(),
                grid.steps()
            )));
        }
        let shape = gains.first().map(|g| g.shape());
        for (k, g) in gains.iter().enumerate() {
            if Some(g.shape()) != shape {
                return Err(ModelError::Dimension(format!(
                    "gain {k} has shape {:?}, expected {:?}",
                    g.shape(),
                    shape.unwrap()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Invalid(format!("gain {k} has non-finite entries")));
            }
        }
        Ok(GainSchedule { grid, gains })
    }

    /// All-zero gains (the uncontrolled system) on `grid`.
    pub fn zero(grid: TimeGrid, n: usize, m: usize) -> Self {
        let gains = vec![DMatrix::zeros(m, n); grid.steps()];
        GainSchedule { grid, gains }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn gain(&self, k: usize) -> &DMatrix<f64> {
        &self.gains[k]
    }

    pub fn gains(&self) -> &[DMatrix<f64>] {
        &self.gains
    }
}

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Signed margin: minimum eigenvalue for definiteness checks, the
    /// sigma_min/sigma_max ratio for rank checks.
    pub margin: f64,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
    pub controllability_rank: usize,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn definiteness_check(name: &str, m: &DMatrix<f64>, strict: bool) -> CheckResult {
    let scale = linalg::spectral_norm_sym(m);
    let tol = EIG_REL_TOL * scale;
    let asym = linalg::asymmetry(m);
    if asym > tol.max(EIG_REL_TOL) {
        return CheckResult {
            name: name.into(),
            passed: false,
            margin: -asym,
            detail: format!("not symmetric (max asymmetry {asym:.3e})"),
        };
    }
    let min_eig = linalg::min_eigenvalue(m);
    let passed = if strict { min_eig > tol } else { min_eig >= -tol };
    CheckResult {
        name: name.into(),
        passed,
        margin: min_eig,
        detail: format!(
            "min eigenvalue {min_eig:.6e}, tolerance {tol:.3e} ({})",
            if strict { "positive definite" } else { "positive semidefinite" }
        ),
    }
}

/// Semantic validation: definiteness of the boundary covariances and the
/// state weight, full column rank of B, and controllability of (A, B) —
/// the structural stand-in for a noise that fills the state space through
/// the dynamics even when it enters through fewer channels.
pub fn validate_problem(p: &SteeringProblem) -> Result<ValidationReport, ModelError> {
    p.check_structure()?;
    let n = p.n();
    let mut checks = Vec::new();

    checks.push(definiteness_check("spd_sigma0", &p.sigma0, true));
    checks.push(definiteness_check("spd_sigma_t", &p.sigma_t, true));

    let mut worst: Option<CheckResult> = None;
    for (idx, s) in p.s.samples().into_iter().enumerate() {
        let mut c = definiteness_check("psd_s", s, false);
        c.detail = format!("sample {idx}: {}", c.detail);
        let replace = match &worst {
            None => true,
            Some(w) => (!c.passed && w.passed) || (c.passed == w.passed && c.margin < w.margin),
        };
        if replace {
            worst = Some(c);
        }
    }
    checks.push(worst.expect("at least one S sample"));

    let (b_rank, b_margin) = linalg::svd_rank(&p.b, RANK_REL_TOL);
    checks.push(CheckResult {
        name: "b_full_column_rank".into(),
        passed: b_rank == p.m(),
        margin: b_margin,
        detail: format!("rank {b_rank} of {}", p.m()),
    });

    let ctrb = linalg::controllability_matrix(&p.a, &p.b);
    let (rank, margin) = linalg::svd_rank(&ctrb, RANK_REL_TOL);
    checks.push(CheckResult {
        name: "controllability".into(),
        passed: rank == n,
        margin,
        detail: format!("controllability matrix rank {rank} of {n}"),
    });

    Ok(ValidationReport {
        checks,
        controllability_rank: rank,
    })
}

/// Covariance of the uncontrolled diffusion: integrate the Lyapunov flow
/// dSigma/dt = A Sigma + Sigma A' + BB' from sigma0 with fixed-step RK4.
pub fn uncontrolled_covariance(
    p: &SteeringProblem,
    g: &TimeGrid,
) -> Result<CovariancePath, ModelError> {
    p.check_structure()?;
    let zero = GainSchedule::zero(g.clone(), p.n(), p.m());
    controlled_covariance(p, &zero)
}

/// Closed-loop covariance under piecewise-constant gains: the Lyapunov flow
/// with drift A - B K_k on each interval.
pub fn controlled_covariance(
    p: &SteeringProblem,
    k: &GainSchedule,
) -> Result<CovariancePath, ModelError> {
    p.check_structure()?;
    let g = k.grid();
    if (g.horizon() - p.horizon).abs() > GRID_MATCH_REL_TOL * p.horizon.max(1.0) {
        return Err(ModelError::Grid(format!(
            "gain grid horizon {} differs from problem horizon {}",
            g.horizon(),
            p.horizon
        )));
    }
    let bbt = &p.b * p.b.transpose();
    let mut sigmas = Vec::with_capacity(g.len());
    let mut sigma = linalg::symmetrized(&p.sigma0);
    sigmas.push(sigma.clone());
    for step in 0..g.steps() {
        let drift = &p.a - &p.b * k.gain(step);
        let mut f = |_t: f64, y: &DMatrix<f64>| &drift * y + y * drift.transpose() + &bbt;
        sigma = linalg::rk4_sym_step(&mut f, g.t(step), &sigma, g.dt(step));
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Invalid(format!(
                "covariance flow left the finite range at step {step}"
            )));
        }
        sigmas.push(sigma.clone());
    }
    CovariancePath::new(g.clone(), sigmas)
}

/// Control-plus-state cost `1/2 sum_k dt_k [trace(K_k Sigma_k K_k') +
/// trace(S(t_k) Sigma_k)]`, a left-endpoint quadrature on the shared grid.
pub fn cost_functional(
    p: &SteeringProblem,
    k: &GainSchedule,
    c: &CovariancePath,
) -> Result<f64, ModelError> {
    p.check_structure()?;
    if !k.grid().matches(c.grid()) {
        return Err(ModelError::Grid(
            "gain schedule and covariance path use different grids".into(),
        ));
    }
    let n = p.n();
    if c.sigma(0).nrows() != n || k.gain(0).ncols() != n {
        return Err(ModelError::Dimension(
            "gain/covariance dimensions do not match the problem".into(),
        ));
    }
    let g = k.grid();
    let mut total = 0.0;
    for step in 0..g.steps() {
        let sigma = c.sigma(step);
        let gain = k.gain(step);
        let control = (gain * sigma * gain.transpose()).trace();
        let state = (p.s.at(g.t(step)) * sigma).trace();
        total += g.dt(step) * (control + state);
    }
    Ok(0.5 * total)
}
