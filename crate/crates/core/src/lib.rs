//! Solver for phase-space mass interpolation under position-only marginal
//! constraints at multiple time points.
//!
//! An inertial particle cloud driven by white-noise acceleration is observed
//! through its positional distributions at a set of times. The library finds
//! the chain of couplings between consecutive observation times that is
//! closest in relative entropy to the free (double-integrator) prior while
//! matching every positional constraint, by cyclic closed-form KL
//! projections. Driving the noise level toward zero recovers a
//! measure-valued interpolating spline; the crate ships a Euclidean natural
//! cubic spline and a brute-force reference solver to validate both regimes.
//!
//! Modules:
//! - [`phasegrid`]: the discretized (position, velocity) state space and the
//!   measure types on it.
//! - [`kernel`]: pairwise transition cost, log-domain Gibbs kernel, pinned
//!   bridge moments.
//! - [`bregman`]: the projection solver, both dense and scaling-form.
//! - [`interpolate`]: marginal and mean-path reconstruction at arbitrary
//!   times.
//! - [`oracle`]: natural cubic spline and the brute-force reference
//!   minimizer.
//! - [`config`] / [`io`]: problem files, CSV formats, run outputs.

pub mod bregman;
pub mod config;
pub mod error;
pub mod interpolate;
pub mod io;
pub mod kernel;
pub mod numeric;
pub mod oracle;
pub mod phasegrid;

pub use bregman::{
    constraint_violation, objective, solve, solve_observed, ChainState, Coupling, Problem,
    Representation, SolveOptions, SolveReport, SweepOrder, SweepTrace,
};
pub use config::{load_spec, ProblemSpec};
pub use error::{Error, Result};
pub use interpolate::{PathPoint, Solution};
pub use kernel::{build_gibbs, bridge_moments, pair_cost, BridgeMoments, CostMode, GibbsKernel};
pub use oracle::{brute_force_solve, natural_cubic_spline, OracleSolution, SplineCurve};
pub use phasegrid::{
    marginal_from_samples, moments, project_x, DiscreteMeasure, Moments, PhaseGrid,
    PositionalMarginal,
};
