//! Joint multi-agent trajectory optimization with Gaussian-process motion priors.
//!
//! Each agent's trajectory is a sample from a constant-velocity GP generated by a
//! linear time-varying SDE with white noise on acceleration. All trajectories are
//! optimized at once as MAP inference on a sparse factor graph combining GP prior
//! factors, static-obstacle hinge factors over a signed distance field, and
//! inter-agent hinge factors with analytic Jacobians.
//!
//! Modules:
//! - [`gp`]: state transition, process noise, O(1) interpolation, sparse inverse kernel.
//! - [`env`]: occupancy grids, exact signed distance fields, A* seeding.
//! - [`factors`]: hinge cost factors and their linearizations.
//! - [`graph`]: joint factor graph assembly and Levenberg-Marquardt optimization.
//! - [`scenario`]: benchmark scenarios, the sequential-replanning baseline, metrics.

pub mod env;
pub mod factors;
pub mod gp;
pub mod graph;
pub mod scenario;

pub use gp::{ConstantVelocityModel, SupportTrajectory};
pub use graph::{FactorGraph, JointTrajectory, SolveStats, SolverConfig};
pub use scenario::{BenchmarkReport, RunResult, Scenario};
