//! Monte Carlo validation of closed-loop steering: Euler–Maruyama sampling
//! of `dX = (A - B K(t)) X dt + B dw`, empirical second moments, and cost
//! estimates with standard errors.
//!
//! Reproducibility contract: every path owns a counter-based generator
//! derived from `(seed, path index)`, so an ensemble is bitwise identical
//! across runs and across thread counts on the same build.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::linalg;
use crate::model::{GainSchedule, LossWeight, ModelError, SteeringProblem, TimeGrid};

#[derive(Debug, Clone, Error)]
pub enum SimError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("need at least {needed} paths, got {got}")]
    TooFewPaths { needed: usize, got: usize },
    #[error("grid mismatch: {0}")]
    Grid(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("sample path left the finite range at step {step}")]
    Numeric { step: usize },
    #[error("{0}")]
    Invalid(String),
}

/// One closed-loop sample path: states at every grid time, the applied
/// control at the left endpoint of every interval.
#[derive(Debug, Clone)]
pub struct Trajectory {
    grid: TimeGrid,
    states: Vec<DVector<f64>>,
    controls: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn new(
        grid: TimeGrid,
        states: Vec<DVector<f64>>,
        controls: Vec<DVector<f64>>,
    ) -> Result<Self, SimError> {
        if states.len() != grid.len() || controls.len() != grid.steps() {
            return Err(SimError::Dimension(format!(
                "{} states and {} controls for a grid with {} times",
                states.len(),
                controls.len(),
                grid.len()
            )));
        }
        let n = states[0].len();
        let m = controls.first().map_or(0, |c| c.len());
        for (j, x) in states.iter().enumerate() {
            if x.len() != n {
                return Err(SimError::Dimension(format!("state {j} has mixed dimension")));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(SimError::Numeric { step: j });
            }
        }
        for (j, u) in controls.iter().enumerate() {
            if u.len() != m {
                return Err(SimError::Dimension(format!("control {j} has mixed dimension")));
            }
            if u.iter().any(|v| !v.is_finite()) {
                return Err(SimError::Numeric { step: j });
            }
        }
        Ok(Trajectory { grid, states, controls })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn state(&self, j: usize) -> &DVector<f64> {
        &self.states[j]
    }

    pub fn states(&self) -> &[DVector<f64>] {
        &self.states
    }

    pub fn control(&self, j: usize) -> &DVector<f64> {
        &self.controls[j]
    }

    pub fn controls(&self) -> &[DVector<f64>] {
        &self.controls
    }
}

/// Ensemble summary: per-time first and second moments plus the cost
/// estimate, tagged with the seed and path count that produced it.
#[derive(Debug, Clone)]
pub struct EnsembleStats {
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    pub cost_mean: f64,
    pub cost_stderr: f64,
    pub seed: u64,
    pub paths: usize,
}

impl EnsembleStats {
    pub fn from_ensemble(
        trajs: &[Trajectory],
        k: &GainSchedule,
        s: &LossWeight,
        seed: u64,
    ) -> Result<Self, SimError> {
        if trajs.len() < 2 {
            return Err(SimError::TooFewPaths { needed: 2, got: trajs.len() });
        }
        let times = trajs[0].grid.len();
        let mut means = Vec::with_capacity(times);
        let mut covariances = Vec::with_capacity(times);
        for j in 0..times {
            let (mean, cov) = moments(trajs, j)?;
            means.push(mean);
            covariances.push(cov);
        }
        let (cost_mean, cost_stderr) = estimate_cost(trajs, k, s)?;
        Ok(EnsembleStats {
            means,
            covariances,
            cost_mean,
            cost_stderr,
            seed,
            paths: trajs.len(),
        })
    }
}

/// Sample `count` independent closed-loop paths with the default
/// resolution (one step per grid interval) and automatic thread count.
pub fn sample_paths(
    p: &SteeringProblem,
    k: &GainSchedule,
    count: usize,
    seed: u64,
) -> Result<Vec<Trajectory>, SimError> {
    let threads = std::thread::available_parallelism().map_or(1, |v| v.get().min(8));
    sample_paths_detailed(p, k, count, seed, 1, threads)
}

/// Full-control variant: `substeps` Euler–Maruyama micro-steps per grid
/// interval (the gain held constant across the interval), `threads` worker
/// threads. The result does not depend on `threads`.
pub fn sample_paths_detailed(
    p: &SteeringProblem,
    k: &GainSchedule,
    count: usize,
    seed: u64,
    substeps: usize,
    threads: usize,
) -> Result<Vec<Trajectory>, SimError> {
    p.check_structure()?;
    let g = k.grid();
    if (g.horizon() - p.horizon).abs() > 1e-9 * p.horizon.max(1.0) {
        return Err(SimError::Grid(format!(
            "gain horizon {} does not cover the problem horizon {}",
            g.horizon(),
            p.horizon
        )));
    }
    let (n, m) = (p.n(), p.m());
    if k.gain(0).shape() != (m, n) {
        return Err(SimError::Dimension(format!(
            "gains are {}x{}, problem wants {m}x{n}",
            k.gain(0).nrows(),
            k.gain(0).ncols()
        )));
    }
    if substeps == 0 {
        return Err(SimError::Invalid("substeps must be at least 1".into()));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let chol = Cholesky::new(p.sigma0.clone())
        .ok_or_else(|| SimError::Invalid("initial covariance is not positive definite".into()))?;
    let init_l = chol.l();

    // Closed-loop drift per interval, shared read-only by all workers.
    let closed: Vec<DMatrix<f64>> = (0..g.steps()).map(|j| &p.a - &p.b * k.gain(j)).collect();

    let threads = threads.clamp(1, count);
    let chunk = count.div_ceil(threads);
    let mut slots: Vec<Option<Result<Trajectory, SimError>>> = (0..count).map(|_| None).collect();
    std::thread::scope(|scope| {
        for (tid, block) in slots.chunks_mut(chunk).enumerate() {
            let (closed, init_l, b) = (&closed, &init_l, &p.b);
            scope.spawn(move || {
                for (offset, slot) in block.iter_mut().enumerate() {
                    let index = tid * chunk + offset;
                    *slot = Some(simulate_one(
                        g, closed, b, k, init_l, n, m, seed, index, substeps,
                    ));
                }
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("every slot visited"))
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn simulate_one(
    g: &TimeGrid,
    closed: &[DMatrix<f64>],
    b: &DMatrix<f64>,
    k: &GainSchedule,
    init_l: &DMatrix<f64>,
    n: usize,
    m: usize,
    seed: u64,
    index: usize,
    substeps: usize,
) -> Result<Trajectory, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let draw = |rng: &mut ChaCha8Rng, len: usize| {
        DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal))
    };

    let mut x = init_l * draw(&mut rng, n);
    let mut states = Vec::with_capacity(g.len());
    let mut controls = Vec::with_capacity(g.steps());
    states.push(x.clone());
    for j in 0..g.steps() {
        controls.push(-(k.gain(j) * &x));
        let dt = g.dt(j) / substeps as f64;
        let sq = dt.sqrt();
        for _ in 0..substeps {
            let noise = draw(&mut rng, m);
            x = &x + (&closed[j] * &x) * dt + (b * noise) * sq;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(SimError::Numeric { step: j });
        }
        states.push(x.clone());
    }
    Trajectory::new(g.clone(), states, controls)
}

fn moments(trajs: &[Trajectory], index: usize) -> Result<(DVector<f64>, DMatrix<f64>), SimError> {
    let count = trajs.len();
    if count < 2 {
        return Err(SimError::TooFewPaths { needed: 2, got: count });
    }
    let reference = trajs[0].grid();
    let n = trajs[0].state(0).len();
    if index >= reference.len() {
        return Err(SimError::Dimension(format!(
            "time index {index} outside a grid with {} times",
            reference.len()
        )));
    }
    for t in trajs {
        if !t.grid().matches(reference) {
            return Err(SimError::Grid("ensemble mixes time grids".into()));
        }
        if t.state(0).len() != n {
            return Err(SimError::Dimension("ensemble mixes state dimensions".into()));
        }
    }
    let mut mean = DVector::zeros(n);
    for t in trajs {
        mean += t.state(index);
    }
    mean /= count as f64;
    let mut cov = DMatrix::zeros(n, n);
    for t in trajs {
        let d = t.state(index) - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov /= (count - 1) as f64;
    Ok((mean, linalg::symmetrized(&cov)))
}

/// Unbiased sample covariance of the ensemble at one grid time.
pub fn empirical_covariance(trajs: &[Trajectory], index: usize) -> Result<DMatrix<f64>, SimError> {
    moments(trajs, index).map(|(_, cov)| cov)
}

/// Per-path left-endpoint quadrature of `1/2 |K_j x_j|^2 + 1/2 x_j' S(t_j)
/// x_j`, reduced to the ensemble mean and its standard error.
pub fn estimate_cost(
    trajs: &[Trajectory],
    k: &GainSchedule,
    s: &LossWeight,
) -> Result<(f64, f64), SimError> {
    if trajs.is_empty() {
        return Err(SimError::TooFewPaths { needed: 1, got: 0 });
    }
    let g = k.grid();
    let mut costs = Vec::with_capacity(trajs.len());
    for t in trajs {
        if !t.grid().matches(g) {
            return Err(SimError::Grid(
                "trajectory grid differs from the gain grid".into(),
            ));
        }
        let mut total = 0.0;
        for j in 0..g.steps() {
            let x = t.state(j);
            let u = k.gain(j) * x;
            let state_cost = (s.at(g.t(j)) * x).dot(x);
            total += g.dt(j) * 0.5 * (u.norm_squared() + state_cost);
        }
        costs.push(total);
    }
    let count = costs.len() as f64;
    let mean = costs.iter().sum::<f64>() / count;
    let stderr = if costs.len() > 1 {
        let var = costs.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / (count - 1.0);
        (var / count).sqrt()
    } else {
        0.0
    };
    Ok((mean, stderr))
}
