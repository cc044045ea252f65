//! The two coupled matrix Riccati flows behind the Gaussian bridge: a
//! backward equation for Pi and a forward one for H, tied together by the
//! split boundary conditions `Pi(0) + H(0) = Sigma_0^{-1}` and
//! `Pi(T) + H(T) = Sigma_T^{-1}`. Along a coupled solution the steered
//! covariance is `Sigma(t) = (Pi(t) + H(t))^{-1}` and the optimal feedback
//! is `u = -B' Pi(t) x`.
//!
//! The split coupling is solved by shooting on the upper triangle of Pi(0)
//! with a damped quasi-Newton iteration and a finite-difference Jacobian;
//! plain back-and-forth substitution between the two equations is not
//! numerically stable, so the default initial guess comes from a coarse run
//! of the direct transcription in [`crate::sdp`].

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{self, upper_unvec, upper_vec};
use crate::model::{validate_problem, CovariancePath, ModelError, SteeringProblem, TimeGrid};
use crate::sdp;

/// Any Riccati iterate with an entry beyond this is declared divergent.
pub const BLOW_UP_LIMIT: f64 = 1e12;
/// Frobenius tolerance on the terminal boundary defect of the shooting.
pub const SHOOTING_TOL: f64 = 1e-6;
/// Outer iteration cap for the shooting loop, per starting point.
pub const SHOOTING_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, Error)]
pub enum RiccatiError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sdp(#[from] sdp::SdpError),
    #[error("problem validation failed: {0}")]
    Validation(String),
    #[error("Riccati flow diverged near t = {time:.6}")]
    BlowUp { time: f64 },
    #[error("shooting stalled after {iterations} iterations (boundary residual {residual:.3e})")]
    NoConvergence { residual: f64, iterations: usize },
    #[error("covariance sample {index} is singular")]
    Singular { index: usize },
    #[error("{0}")]
    Grid(String),
}

/// A coupled solution sampled on a grid, with the two normalizer sequences.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    pub pi: Vec<DMatrix<f64>>,
    pub h: Vec<DMatrix<f64>>,
    pub c: Vec<f64>,
    pub chat: Vec<f64>,
    pub stats: ShootingStats,
}

#[derive(Debug, Clone, Copy)]
pub struct ShootingStats {
    pub iterations: usize,
    /// Final `|| Pi_N + H_N - Sigma_T^{-1} ||_F`.
    pub residual: f64,
}

impl RiccatiSolution {
    /// The steered covariance path `Sigma_k = (Pi_k + H_k)^{-1}`.
    pub fn covariance_path(&self) -> Result<CovariancePath, RiccatiError> {
        let mut sigmas = Vec::with_capacity(self.pi.len());
        for (k, (pi, h)) in self.pi.iter().zip(&self.h).enumerate() {
            let q = linalg::symmetrized(&(pi + h));
            let inv = q
                .clone()
                .cholesky()
                .map(|c| c.inverse())
                .ok_or(RiccatiError::Singular { index: k })?;
            sigmas.push(linalg::symmetrized(&inv));
        }
        Ok(CovariancePath::new(self.grid.clone(), sigmas)?)
    }

    /// Feedback gains `K_k = B' Pi_k` on the grid intervals.
    pub fn gains(&self, p: &SteeringProblem) -> Vec<DMatrix<f64>> {
        (0..self.grid.steps())
            .map(|k| p.b.transpose() * &self.pi[k])
            .collect()
    }
}

fn check_entries(m: &DMatrix<f64>, t: f64) -> Result<(), RiccatiError> {
    if m.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP_LIMIT) {
        return Err(RiccatiError::BlowUp { time: t });
    }
    Ok(())
}

/// Integrate `-dPi/dt = A'Pi + Pi A - Pi BB' Pi + S(t)` backward from the
/// terminal value, returning samples `Pi_0 .. Pi_N` on the grid.
pub fn integrate_pi_backward(
    p: &SteeringProblem,
    g: &TimeGrid,
    pi_t: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>, RiccatiError> {
    check_symmetric_state(pi_t, p.n())?;
    let bbt = &p.b * p.b.transpose();
    let mut f = |t: f64, pi: &DMatrix<f64>| -> DMatrix<f64> {
        -(p.a.transpose() * pi + pi * &p.a - pi * &bbt * pi + p.s.at(t))
    };
    let n_steps = g.steps();
    let mut out = vec![DMatrix::zeros(0, 0); n_steps + 1];
    out[n_steps] = linalg::symmetrized(pi_t);
    for k in (0..n_steps).rev() {
        let next = linalg::rk4_sym_step(&mut f, g.t(k + 1), &out[k + 1], -g.dt(k));
        check_entries(&next, g.t(k))?;
        out[k] = next;
    }
    Ok(out)
}

/// Integrate `dH/dt = -A'H - H A - H BB' H + S(t)` forward from the initial
/// value, returning samples `H_0 .. H_N` on the grid.
pub fn integrate_h_forward(
    p: &SteeringProblem,
    g: &TimeGrid,
    h_0: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>, RiccatiError> {
    check_symmetric_state(h_0, p.n())?;
    let bbt = &p.b * p.b.transpose();
    let mut f = |t: f64, h: &DMatrix<f64>| -> DMatrix<f64> {
        -(p.a.transpose() * h + h * &p.a + h * &bbt * h) + p.s.at(t)
    };
    let mut out = Vec::with_capacity(g.len());
    out.push(linalg::symmetrized(h_0));
    for k in 0..g.steps() {
        let next = linalg::rk4_sym_step(&mut f, g.t(k), &out[k], g.dt(k));
        check_entries(&next, g.t(k + 1))?;
        out.push(next);
    }
    Ok(out)
}

/// The backward equation marched forward in time, used by the shooting
/// iteration: `dPi/dt = -A'Pi - Pi A + Pi BB' Pi - S(t)`.
fn integrate_pi_forward(
    p: &SteeringProblem,
    g: &TimeGrid,
    pi_0: &DMatrix<f64>,
) -> Result<Vec<DMatrix<f64>>, RiccatiError> {
    let bbt = &p.b * p.b.transpose();
    let mut f = |t: f64, pi: &DMatrix<f64>| -> DMatrix<f64> {
        -(p.a.transpose() * pi + pi * &p.a) + pi * &bbt * pi - p.s.at(t)
    };
    let mut out = Vec::with_capacity(g.len());
    out.push(linalg::symmetrized(pi_0));
    for k in 0..g.steps() {
        let next = linalg::rk4_sym_step(&mut f, g.t(k), &out[k], g.dt(k));
        check_entries(&next, g.t(k + 1))?;
        out.push(next);
    }
    Ok(out)
}

fn check_symmetric_state(m: &DMatrix<f64>, n: usize) -> Result<(), RiccatiError> {
    if m.shape() != (n, n) {
        return Err(RiccatiError::Model(ModelError::Dimension(format!(
            "state is {}x{}, expected {n}x{n}",
            m.nrows(),
            m.ncols()
        ))));
    }
    let scale = m.amax().max(1.0);
    if linalg::asymmetry(m) > 1e-8 * scale {
        return Err(RiccatiError::Model(ModelError::Invalid(
            "Riccati state must be symmetric".into(),
        )));
    }
    Ok(())
}

fn spd_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>, RiccatiError> {
    linalg::symmetrized(m)
        .cholesky()
        .map(|c| linalg::symmetrized(&c.inverse()))
        .ok_or_else(|| RiccatiError::Validation(format!("{what} is not positive definite")))
}

/// Both Riccati trajectories for one shooting trial plus the terminal
/// boundary defect.
struct Trial {
    pi: Vec<DMatrix<f64>>,
    h: Vec<DMatrix<f64>>,
    defect: DMatrix<f64>,
}

fn shoot(
    p: &SteeringProblem,
    g: &TimeGrid,
    sigma0_inv: &DMatrix<f64>,
    sigma_t_inv: &DMatrix<f64>,
    pi_0: &DMatrix<f64>,
) -> Result<Trial, RiccatiError> {
    let pi = integrate_pi_forward(p, g, pi_0)?;
    let h0 = sigma0_inv - pi_0;
    let h = integrate_h_forward(p, g, &h0)?;
    let n_steps = g.steps();
    let defect = &pi[n_steps] + &h[n_steps] - sigma_t_inv;
    Ok(Trial { pi, h, defect })
}

/// Default starting point: a coarse, loosely-converged run of the direct
/// transcription, with Pi_0 read off the first recovered gain through the
/// least-squares inverse of `K = B' Pi`.
fn warm_start_from_sdp(p: &SteeringProblem, g: &TimeGrid) -> Option<DMatrix<f64>> {
    let n_ws = g.steps().min(200);
    let prog = sdp::discretize(p, n_ws).ok()?;
    let opts = sdp::SolverOptions {
        eps_primal: 1e-5,
        eps_dual: 1e-5,
        ..sdp::SolverOptions::default()
    };
    let sol = sdp::solve(&prog, &opts).ok()?;
    if sol.stats.status == sdp::SolveStatus::InfeasibleDetected {
        return None;
    }
    let gains = sdp::recover_gains(&sol.sigmas, &sol.inputs, prog.grid()).ok()?;
    let k0 = gains.gain(0);
    // Minimum-norm symmetric Pi with B' Pi closest to k0: columns of the
    // design matrix are B' applied to the upper-triangle basis.
    let n = p.n();
    let m = p.m();
    let unknowns = linalg::svec_dim(n);
    let mut design = DMatrix::zeros(m * n, unknowns);
    let mut basis = vec![0.0; unknowns];
    for j in 0..unknowns {
        basis[j] = 1.0;
        let e = upper_unvec(&basis, n);
        basis[j] = 0.0;
        let col = p.b.transpose() * e;
        for (r, v) in col.iter().enumerate() {
            design[(r, j)] = *v;
        }
    }
    let mut target = DVector::zeros(m * n);
    for (r, v) in k0.iter().enumerate() {
        target[r] = *v;
    }
    let svd = design.svd(true, true);
    let x = svd.solve(&target, 1e-10).ok()?;
    Some(upper_unvec(x.as_slice(), n))
}

/// Solve the split-boundary coupling: find Pi(0) so that marching both
/// equations forward lands on `Pi(T) + H(T) = Sigma_T^{-1}`. `init`
/// overrides the initial guess; otherwise a coarse transcription solve
/// seeds it, with a few generic fallbacks behind it.
pub fn solve_coupled(
    p: &SteeringProblem,
    g: &TimeGrid,
    init: Option<&DMatrix<f64>>,
) -> Result<RiccatiSolution, RiccatiError> {
    let report = validate_problem(p)?;
    if !report.passed() {
        let failing: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect();
        return Err(RiccatiError::Validation(failing.join(", ")));
    }
    let sigma0_inv = spd_inverse(&p.sigma0, "Sigma0")?;
    let sigma_t_inv = spd_inverse(&p.sigma_t, "SigmaT")?;

    let mut starts: Vec<DMatrix<f64>> = Vec::new();
    if let Some(m) = init {
        check_symmetric_state(m, p.n())?;
        starts.push(linalg::symmetrized(m));
    } else {
        if let Some(ws) = warm_start_from_sdp(p, g) {
            starts.push(ws);
        }
        starts.push(&sigma0_inv * 0.5);
        starts.push(DMatrix::zeros(p.n(), p.n()));
        starts.push(sigma0_inv.clone());
    }

    let mut last_err = RiccatiError::NoConvergence {
        residual: f64::INFINITY,
        iterations: 0,
    };
    for start in &starts {
        match shoot_newton(p, g, &sigma0_inv, &sigma_t_inv, start) {
            Ok(sol) => return Ok(sol),
            Err(e) => last_err = e,
        }
    }
    Err(last_err)
}

fn shoot_newton(
    p: &SteeringProblem,
    g: &TimeGrid,
    sigma0_inv: &DMatrix<f64>,
    sigma_t_inv: &DMatrix<f64>,
    start: &DMatrix<f64>,
) -> Result<RiccatiSolution, RiccatiError> {
    let n = p.n();
    let unknowns = linalg::svec_dim(n);
    let mut x = upper_vec(start);
    let mut trial = shoot(p, g, sigma0_inv, sigma_t_inv, &upper_unvec(x.as_slice(), n))?;
    let mut residual = trial.defect.norm();

    for iter in 0..SHOOTING_MAX_ITERS {
        if residual <= SHOOTING_TOL {
            return Ok(finish(p, g, trial, ShootingStats { iterations: iter, residual }));
        }
        // Forward-difference Jacobian of the upper-triangle defect map.
        let base = upper_vec(&trial.defect);
        let mut jac = DMatrix::zeros(unknowns, unknowns);
        for j in 0..unknowns {
            let delta = 1e-7 * (1.0 + x[j].abs());
            let mut xj = x.clone();
            xj[j] += delta;
            let t = shoot(p, g, sigma0_inv, sigma_t_inv, &upper_unvec(xj.as_slice(), n))?;
            jac.set_column(j, &((upper_vec(&t.defect) - &base) / delta));
        }
        let step = jac
            .svd(true, true)
            .solve(&(-&base), 1e-12)
            .map_err(|_| RiccatiError::NoConvergence { residual, iterations: iter })?;

        // Damped update: halve until the defect shrinks, rejecting trials
        // that blow up along the way.
        let mut lambda = 1.0;
        let mut accepted = false;
        while lambda >= 2.0f64.powi(-12) {
            let cand = &x + &step * lambda;
            match shoot(p, g, sigma0_inv, sigma_t_inv, &upper_unvec(cand.as_slice(), n)) {
                Ok(t) => {
                    let r = t.defect.norm();
                    if r < residual * (1.0 - 1e-4 * lambda) || r <= SHOOTING_TOL {
                        x = cand;
                        trial = t;
                        residual = r;
                        accepted = true;
                        break;
                    }
                }
                Err(RiccatiError::BlowUp { .. }) => {}
                Err(e) => return Err(e),
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(RiccatiError::NoConvergence { residual, iterations: iter + 1 });
        }
    }
    if residual <= SHOOTING_TOL {
        return Ok(finish(
            p,
            g,
            trial,
            ShootingStats { iterations: SHOOTING_MAX_ITERS, residual },
        ));
    }
    Err(RiccatiError::NoConvergence {
        residual,
        iterations: SHOOTING_MAX_ITERS,
    })
}

fn finish(p: &SteeringProblem, g: &TimeGrid, trial: Trial, stats: ShootingStats) -> RiccatiSolution {
    let (c, chat) = normalizer_sequences(p, g, &trial.pi, &trial.h);
    RiccatiSolution {
        grid: g.clone(),
        pi: trial.pi,
        h: trial.h,
        c,
        chat,
        stats,
    }
}

/// Run the shooting from several starting points and keep every distinct
/// root. Whether the coupled system has a unique solution is settled only
/// for S = 0, so callers probing a nonzero state weight can ask for all
/// the roots the solver can reach.
pub fn solve_coupled_multistart(
    p: &SteeringProblem,
    g: &TimeGrid,
    inits: &[DMatrix<f64>],
) -> Vec<RiccatiSolution> {
    let mut roots: Vec<RiccatiSolution> = Vec::new();
    let mut try_start = |init: Option<&DMatrix<f64>>| {
        if let Ok(sol) = solve_coupled(p, g, init) {
            let dup = roots.iter().any(|r| {
                let scale = 1.0 + r.pi[0].norm();
                (&sol.pi[0] - &r.pi[0]).norm() <= 1e-4 * scale
            });
            if !dup {
                roots.push(sol);
            }
        }
    };
    try_start(None);
    for init in inits {
        try_start(Some(init));
    }
    roots
}

/// Cumulative-trapezoid normalizers along a coupled solution:
/// `c_k = exp(1/2 ∫ trace(BB' Pi))` and `chat_k = exp(-∫ trace(A + 1/2 BB' H))`,
/// both starting at exactly 1.
pub fn normalizers(sol: &RiccatiSolution, p: &SteeringProblem) -> (Vec<f64>, Vec<f64>) {
    normalizer_sequences(p, &sol.grid, &sol.pi, &sol.h)
}

fn normalizer_sequences(
    p: &SteeringProblem,
    g: &TimeGrid,
    pi: &[DMatrix<f64>],
    h: &[DMatrix<f64>],
) -> (Vec<f64>, Vec<f64>) {
    let bbt = &p.b * p.b.transpose();
    let trace_a = p.a.trace();
    let f: Vec<f64> = pi.iter().map(|m| (&bbt * m).trace()).collect();
    let gv: Vec<f64> = h.iter().map(|m| trace_a + 0.5 * (&bbt * m).trace()).collect();
    let mut c = Vec::with_capacity(pi.len());
    let mut chat = Vec::with_capacity(pi.len());
    let mut acc_c = 0.0;
    let mut acc_g = 0.0;
    c.push(1.0);
    chat.push(1.0);
    for k in 0..g.steps() {
        let dt = g.dt(k);
        acc_c += 0.5 * dt * (f[k] + f[k + 1]);
        acc_g += 0.5 * dt * (gv[k] + gv[k + 1]);
        c.push((0.5 * acc_c).exp());
        chat.push((-acc_g).exp());
    }
    (c, chat)
}

/// Worst-case relative mismatch between a covariance path and the coupled
/// solution's precision path: `max_k ||Sigma_k^{-1} - (Pi_k + H_k)||_F /
/// ||Sigma_k^{-1}||_F`.
pub fn consistency_residual(
    sol: &RiccatiSolution,
    path: &CovariancePath,
) -> Result<f64, RiccatiError> {
    if !sol.grid.matches(path.grid()) {
        return Err(RiccatiError::Grid(
            "solution and path are sampled on different grids".into(),
        ));
    }
    let mut worst = 0.0f64;
    for k in 0..sol.grid.len() {
        let sigma = linalg::symmetrized(path.sigma(k));
        let inv = sigma
            .cholesky()
            .map(|c| c.inverse())
            .ok_or(RiccatiError::Singular { index: k })?;
        let q = &sol.pi[k] + &sol.h[k];
        worst = worst.max((&inv - q).norm() / inv.norm());
    }
    Ok(worst)
}
