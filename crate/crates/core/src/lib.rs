//! Steering the state covariance of linear stochastic systems between
//! prescribed endpoint Gaussians, with an optional quadratic state weight
//! that penalizes spread along the way.
//!
//! The crate offers three routes to the same object and the tooling to
//! check them against each other:
//!
//! * [`riccati`] — a coupled pair of matrix Riccati flows whose split
//!   boundary conditions encode the endpoint covariances; solved by
//!   shooting. Cheap and exact for linear dynamics.
//! * [`sdp`] — a direct convex transcription of the covariance dynamics
//!   (linear after the input substitution U = -Sigma K') solved by
//!   first-order operator splitting with per-step PSD blocks.
//! * [`pde`] — grid propagators for the potential-weighted
//!   forward/backward equation pair behind the problem, fixed-pointed on
//!   the boundary marginals; works for nonlinear drift and non-Gaussian
//!   marginals at small dimension.
//!
//! [`model`] holds the shared problem containers, [`sim`] closes the loop
//! with Euler–Maruyama Monte Carlo.

pub mod linalg;
pub mod model;
pub mod pde;
pub mod riccati;
pub mod sdp;
pub mod sim;

pub use model::{
    cost_functional, controlled_covariance, uncontrolled_covariance, validate_problem,
    CovariancePath, GainSchedule, LossWeight, ModelError, SteeringProblem, TimeGrid,
    ValidationReport,
};
