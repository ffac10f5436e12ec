//! Joint multi-agent factor graph: assembly, linearization into sparse normal
//! equations, and Levenberg-Marquardt optimization.
//!
//! Variables are the support states of all agents, ordered knot-major with a
//! label-free canonical agent order inside each knot. The normal-equation
//! matrix is kept block sparse (prior blocks are tridiagonal within an agent,
//! inter-agent factors couple same-knot and adjacent-knot blocks only) and the
//! damped system is solved by a banded Cholesky factorization.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::SignedDistanceField;
use crate::factors::{hinge_mutual, hinge_static, mutual_jacobian, NoiseWeights};
use crate::gp::{
    assemble_inverse_kernel, BlockTridiagonal, ConstantVelocityModel, GpError,
    InterpolationCoeffs, PriorMean, SupportTrajectory,
};
use crate::scenario::{build_initialization, canonical_order, Scenario, ScenarioError};

const STEP_TOLERANCE: f64 = 1e-10;
const LAMBDA_MAX: f64 = 1e12;
const LAMBDA_MIN: f64 = 1e-12;
const RESIDUAL_BOUND: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid scenario:\n  {}", violations.join("\n  "))]
    InvalidScenario { violations: Vec<String> },
    #[error("initialization failed: {0}")]
    Initialization(String),
    #[error("non-finite value while linearizing {factor}")]
    NonFinite { factor: String },
    #[error("non-finite cost at the initial trajectory")]
    NonFiniteCost,
    #[error("damped system not positive definite")]
    NotPositiveDefinite,
    #[error("linear solve residual {residual:e} exceeds bound {bound:e}")]
    ResidualTooLarge { residual: f64, bound: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Gp(#[from] GpError),
}

/// Stacked support trajectories of all agents over shared knot times.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTrajectory {
    pub agents: Vec<SupportTrajectory>,
}

impl JointTrajectory {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn num_intervals(&self) -> usize {
        self.agents[0].num_intervals()
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if self.agents.is_empty() {
            return Err(GraphError::DimensionMismatch { expected: 1, got: 0 });
        }
        let first = &self.agents[0];
        for a in &self.agents {
            if a.num_intervals() != first.num_intervals()
                || a.state_dim() != first.state_dim()
                || a.t0 != first.t0
                || a.t_end != first.t_end
            {
                return Err(GraphError::DimensionMismatch {
                    expected: first.num_intervals(),
                    got: a.num_intervals(),
                });
            }
        }
        Ok(())
    }
}

/// Solver parameters, the interpolated-check count, and the cost weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub relative_cost_tolerance: f64,
    pub absolute_cost_tolerance: f64,
    /// Initial LM damping lambda_0.
    pub initial_damping: f64,
    /// Multiplicative damping update on rejection / acceptance.
    pub damping_scale: f64,
    /// Interpolated collision checks per interval.
    pub n_p: usize,
    pub weights: NoiseWeights,
    /// Power spectral density of the constant-velocity prior (isotropic).
    pub qc: f64,
    /// Anchor weight for start and goal states.
    pub sigma_anchor: f64,
    /// Initial covariance scale of the prior chain (K0 = k0 * I).
    pub k0: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            relative_cost_tolerance: 1e-5,
            absolute_cost_tolerance: 1e-12,
            initial_damping: 0.01,
            damping_scale: 10.0,
            n_p: 9,
            weights: NoiseWeights::default(),
            qc: 1.0,
            sigma_anchor: 1e-4,
            k0: 1e-6,
        }
    }
}

impl SolverConfig {
    /// Defaults with the problem-level fields taken from the scenario.
    pub fn from_scenario(sc: &Scenario) -> Self {
        Self {
            n_p: sc.n_p,
            weights: sc.weights(),
            qc: sc.qc,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvergenceReason {
    RelativeCostTolerance,
    AbsoluteCostTolerance,
    StepSizeTolerance,
    MaxIterations,
    DampingOverflow,
}

/// Outcome of one optimization run.
#[derive(Debug, Clone, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Initial cost followed by the cost after every accepted step.
    pub cost_trace: Vec<f64>,
    pub solve_time_ms: f64,
    pub reason: ConvergenceReason,
}

/// Typed factors over canonical agent indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Factor {
    /// Binary GP prior factor on one agent's interval, weighted by Q^{-1}.
    GpPrior { agent: usize, interval: usize },
    /// Unary prior on the first knot, weighted by K0^{-1}.
    InitialPrior { agent: usize },
    /// Unary anchor on an endpoint knot.
    Anchor { agent: usize, knot: usize },
    Static { agent: usize, knot: usize },
    InterpStatic { agent: usize, interval: usize, tau_idx: usize },
    Mutual { a: usize, b: usize, knot: usize },
    InterpMutual { a: usize, b: usize, interval: usize, tau_idx: usize },
}

/// Factor counts by kind, exposed for structural assertions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FactorCounts {
    pub gp_prior: usize,
    pub initial_prior: usize,
    pub anchor: usize,
    pub static_obstacle: usize,
    pub interp_static: usize,
    pub mutual: usize,
    pub interp_mutual: usize,
}

/// Symmetric block-sparse matrix storing the upper block triangle.
#[derive(Debug, Clone)]
pub struct BlockSparseMatrix {
    pub block_dim: usize,
    pub num_blocks: usize,
    blocks: BTreeMap<(usize, usize), DMatrix<f64>>,
}

impl BlockSparseMatrix {
    pub fn new(block_dim: usize, num_blocks: usize) -> Self {
        Self {
            block_dim,
            num_blocks,
            blocks: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.block_dim * self.num_blocks
    }

    pub fn nnz_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, i: usize, j: usize) -> Option<&DMatrix<f64>> {
        self.blocks.get(&(i, j))
    }

    fn ensure_block(&mut self, i: usize, j: usize) -> &mut DMatrix<f64> {
        let bd = self.block_dim;
        self.blocks
            .entry((i, j))
            .or_insert_with(|| DMatrix::zeros(bd, bd))
    }

    /// Adds `m` to logical block (i, j), transposing into the upper triangle
    /// when needed.
    pub fn add_block(&mut self, i: usize, j: usize, m: &DMatrix<f64>) {
        if i <= j {
            *self.ensure_block(i, j) += m;
        } else {
            *self.ensure_block(j, i) += m.transpose();
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let bd = self.block_dim;
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for (&(i, j), m) in &self.blocks {
            out.view_mut((i * bd, j * bd), (bd, bd)).copy_from(m);
            if i != j {
                out.view_mut((j * bd, i * bd), (bd, bd))
                    .copy_from(&m.transpose());
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let bd = self.block_dim;
        let mut y = DVector::zeros(self.dim());
        for (&(i, j), m) in &self.blocks {
            let xj = x.rows(j * bd, bd);
            let mut yi = y.rows_mut(i * bd, bd);
            yi.gemv(1.0, m, &xj, 1.0);
            if i != j {
                let xi = x.rows(i * bd, bd).clone_owned();
                let mut yj = y.rows_mut(j * bd, bd);
                yj.gemv_tr(1.0, m, &xi, 1.0);
            }
        }
        y
    }

    /// Scalar diagonal.
    pub fn diagonal(&self) -> DVector<f64> {
        let bd = self.block_dim;
        let mut d = DVector::zeros(self.dim());
        for (&(i, j), m) in &self.blocks {
            if i == j {
                for k in 0..bd {
                    d[i * bd + k] = m[(k, k)];
                }
            }
        }
        d
    }

    /// Largest stored block column offset, in blocks.
    fn block_bandwidth(&self) -> usize {
        self.blocks.keys().map(|&(i, j)| j - i).max().unwrap_or(0)
    }
}

/// Solves `(A + lambda * diag(A)) dx = b` by a banded Cholesky factorization of
/// the block-sparse matrix, with one step of iterative refinement. The returned
/// solution satisfies the damped system to a relative residual of 1e-8.
pub fn solve_normal_equations(
    mat: &BlockSparseMatrix,
    b: &DVector<f64>,
    lambda: f64,
) -> Result<DVector<f64>, GraphError> {
    let n = mat.dim();
    if b.len() != n {
        return Err(GraphError::DimensionMismatch {
            expected: n,
            got: b.len(),
        });
    }
    let bd = mat.block_dim;
    let bw = (mat.block_bandwidth() + 1) * bd - 1;
    let stride = bw + 1;
    // upper band storage: entry (i, j) at band[(j - i) + j * stride]
    let mut band = vec![0.0f64; stride * n];
    for (&(bi, bj), m) in &mat.blocks {
        for r in 0..bd {
            for c in 0..bd {
                let row = bi * bd + r;
                let col = bj * bd + c;
                if row <= col {
                    band[(col - row) + col * stride] = m[(r, c)];
                }
            }
        }
    }
    for j in 0..n {
        band[j * stride] *= 1.0 + lambda;
    }
    // in-place banded Cholesky, R upper triangular
    for j in 0..n {
        let lo = j.saturating_sub(bw);
        for i in lo..=j {
            let mut sum = band[(j - i) + j * stride];
            for k in lo..i {
                sum -= band[(i - k) + i * stride] * band[(j - k) + j * stride];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(GraphError::NotPositiveDefinite);
                }
                band[j * stride] = sum.sqrt();
            } else {
                band[(j - i) + j * stride] = sum / band[i * stride];
            }
        }
    }
    let diag = mat.diagonal();
    let apply = |x: &DVector<f64>| -> DVector<f64> {
        let mut y = mat.mul_vec(x);
        for i in 0..n {
            y[i] += lambda * diag[i] * x[i];
        }
        y
    };
    let solve_factored = |rhs: &DVector<f64>| -> DVector<f64> {
        let mut y = DVector::zeros(n);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut sum = rhs[i];
            for k in lo..i {
                sum -= band[(i - k) + i * stride] * y[k];
            }
            y[i] = sum / band[i * stride];
        }
        let mut x = DVector::zeros(n);
        for i in (0..n).rev() {
            let hi = (i + bw).min(n - 1);
            let mut sum = y[i];
            for j in i + 1..=hi {
                sum -= band[(j - i) + j * stride] * x[j];
            }
            x[i] = sum / band[i * stride];
        }
        x
    };
    let mut x = solve_factored(b);
    let b_norm = b.norm();
    let mut residual = (b - apply(&x)).norm();
    if residual > RESIDUAL_BOUND * b_norm {
        let r = b - apply(&x);
        x += solve_factored(&r);
        residual = (b - apply(&x)).norm();
    }
    if residual > RESIDUAL_BOUND * b_norm {
        return Err(GraphError::ResidualTooLarge {
            residual,
            bound: RESIDUAL_BOUND * b_norm,
        });
    }
    Ok(x)
}

/// Explicit ingredients of a factor graph, in the order the graph will use.
pub struct GraphParts {
    pub model: ConstantVelocityModel,
    pub prior_mean: Vec<SupportTrajectory>,
    pub sdf: Option<SignedDistanceField>,
    pub radii: Vec<f64>,
    /// (start, goal) anchor targets per agent; ignored without anchors.
    pub anchor_targets: Vec<(DVector<f64>, DVector<f64>)>,
    pub weights: NoiseWeights,
    pub sigma_anchor: f64,
    pub k0: f64,
    pub n_p: usize,
    pub with_anchors: bool,
    pub with_obstacle_factors: bool,
    pub with_mutual_factors: bool,
}

/// Factor graph over the joint trajectory of all agents.
pub struct FactorGraph {
    model: ConstantVelocityModel,
    n_agents: usize,
    num_intervals: usize,
    dt: f64,
    block_dim: usize,
    /// canonical slot -> scenario agent index
    canon_to_scenario: Vec<usize>,
    /// scenario agent index -> canonical slot
    scenario_to_canon: Vec<usize>,
    /// prior mean, canonical order, flattened knot-major
    mu: DVector<f64>,
    t0: f64,
    t_end: f64,
    sdf: Option<SignedDistanceField>,
    radii: Vec<f64>,
    anchor_targets: Vec<(DVector<f64>, DVector<f64>)>,
    weights: NoiseWeights,
    sigma_anchor: f64,
    factors: Vec<Factor>,
    counts: FactorCounts,
    /// interpolation coefficients at the n_p interior offsets
    interp: Vec<InterpolationCoeffs>,
    q_inv: DMatrix<f64>,
    phi_t_qinv: DMatrix<f64>,
    phi_t_qinv_phi: DMatrix<f64>,
    k0_inv: DMatrix<f64>,
    /// fixed sparsity pattern of the normal equations
    pattern: Vec<(usize, usize)>,
}

/// Builds the joint graph for a validated scenario: GP priors, start/goal
/// anchors, static factors at all knots, interpolated statics, and mutual
/// factors (plain and interpolated) for every agent pair.
pub fn build_graph(scenario: &Scenario, config: &SolverConfig) -> Result<FactorGraph, GraphError> {
    scenario.validate().map_err(|e| match e {
        ScenarioError::Invalid { violations } => GraphError::InvalidScenario { violations },
        other => GraphError::InvalidScenario {
            violations: vec![other.to_string()],
        },
    })?;
    let order = canonical_order(&scenario.agents);
    let init = build_initialization(scenario)
        .map_err(|e| GraphError::Initialization(e.to_string()))?;
    let model = ConstantVelocityModel::isotropic(2, config.qc)?;
    let prior_mean: Vec<SupportTrajectory> =
        order.iter().map(|&i| init[i].clone()).collect();
    let radii: Vec<f64> = order.iter().map(|&i| scenario.agents[i].radius).collect();
    let anchor_targets: Vec<(DVector<f64>, DVector<f64>)> = prior_mean
        .iter()
        .map(|t| {
            (
                t.states[0].clone(),
                t.states[t.num_intervals()].clone(),
            )
        })
        .collect();
    let sdf = scenario
        .environment
        .as_ref()
        .map(SignedDistanceField::compute);
    let parts = GraphParts {
        model,
        prior_mean,
        sdf,
        radii,
        anchor_targets,
        weights: config.weights,
        sigma_anchor: config.sigma_anchor,
        k0: config.k0,
        n_p: config.n_p,
        with_anchors: true,
        with_obstacle_factors: true,
        with_mutual_factors: true,
    };
    FactorGraph::from_parts_with_order(parts, order)
}

impl FactorGraph {
    /// Graph from explicit parts; agents keep the given order.
    pub fn from_parts(parts: GraphParts) -> Result<Self, GraphError> {
        let order = (0..parts.prior_mean.len()).collect();
        Self::from_parts_with_order(parts, order)
    }

    /// Graph with only the GP prior chain (and its initial anchor); used for
    /// structural and convergence checks.
    pub fn prior_only(
        model: ConstantVelocityModel,
        prior_mean: Vec<SupportTrajectory>,
        k0: f64,
    ) -> Result<Self, GraphError> {
        let n = prior_mean.len();
        let sd = model.state_dim();
        let parts = GraphParts {
            model,
            radii: vec![1.0; n],
            anchor_targets: prior_mean
                .iter()
                .map(|_| (DVector::zeros(sd), DVector::zeros(sd)))
                .collect(),
            prior_mean,
            sdf: None,
            weights: NoiseWeights::default(),
            sigma_anchor: 1e-4,
            k0,
            n_p: 0,
            with_anchors: false,
            with_obstacle_factors: false,
            with_mutual_factors: false,
        };
        Self::from_parts(parts)
    }

    /// Single-agent graph for one baseline replanning step: static factors
    /// against the supplied grid, the start anchored at the agent's current
    /// state, the goal at the mean's final state.
    pub fn single_agent_replan(
        config: &SolverConfig,
        radius: f64,
        grid: &crate::env::OccupancyGrid,
        mean: SupportTrajectory,
        current_state: DVector<f64>,
    ) -> Result<Self, GraphError> {
        let model = ConstantVelocityModel::isotropic(2, config.qc)?;
        let goal_target = mean.states[mean.num_intervals()].clone();
        let parts = GraphParts {
            model,
            sdf: Some(SignedDistanceField::compute(grid)),
            radii: vec![radius],
            anchor_targets: vec![(current_state, goal_target)],
            prior_mean: vec![mean],
            weights: config.weights,
            sigma_anchor: config.sigma_anchor,
            k0: config.k0,
            n_p: config.n_p,
            with_anchors: true,
            with_obstacle_factors: true,
            with_mutual_factors: false,
        };
        Self::from_parts(parts)
    }

    fn from_parts_with_order(parts: GraphParts, order: Vec<usize>) -> Result<Self, GraphError> {
        let n_agents = parts.prior_mean.len();
        if n_agents == 0 {
            return Err(GraphError::InvalidScenario {
                violations: vec!["no agents".into()],
            });
        }
        if parts.radii.len() != n_agents || parts.anchor_targets.len() != n_agents {
            return Err(GraphError::DimensionMismatch {
                expected: n_agents,
                got: parts.radii.len(),
            });
        }
        let joint = JointTrajectory {
            agents: parts.prior_mean.clone(),
        };
        joint.validate()?;
        let first = &parts.prior_mean[0];
        let num_intervals = first.num_intervals();
        let dt = first.dt();
        let block_dim = first.state_dim();
        if block_dim != parts.model.state_dim() {
            return Err(GraphError::DimensionMismatch {
                expected: parts.model.state_dim(),
                got: block_dim,
            });
        }
        let mut scenario_to_canon = vec![0usize; n_agents];
        for (canon, &scen) in order.iter().enumerate() {
            scenario_to_canon[scen] = canon;
        }

        let (t0, t_end) = (first.t0, first.t_end);
        // flatten mean, knot-major
        let mut mu = DVector::zeros(n_agents * (num_intervals + 1) * block_dim);
        for (canon, traj) in parts.prior_mean.iter().enumerate() {
            for (i, s) in traj.states.iter().enumerate() {
                let off = (i * n_agents + canon) * block_dim;
                mu.rows_mut(off, block_dim).copy_from(s);
            }
        }

        let phi = parts.model.transition(dt)?;
        let q_inv = parts.model.process_noise_inv(dt)?;
        let phi_t_qinv = phi.transpose() * &q_inv;
        let phi_t_qinv_phi = &phi_t_qinv * phi;
        let k0_inv = DMatrix::identity(block_dim, block_dim) / parts.k0;
        let interp: Vec<InterpolationCoeffs> = (1..=parts.n_p)
            .map(|k| {
                parts
                    .model
                    .interp_coeffs(dt, dt * k as f64 / (parts.n_p + 1) as f64)
            })
            .collect::<Result<_, _>>()?;

        // factor list in deterministic canonical order
        let mut factors = Vec::new();
        let mut counts = FactorCounts::default();
        for agent in 0..n_agents {
            factors.push(Factor::InitialPrior { agent });
            counts.initial_prior += 1;
            for interval in 0..num_intervals {
                factors.push(Factor::GpPrior { agent, interval });
                counts.gp_prior += 1;
            }
            if parts.with_anchors {
                factors.push(Factor::Anchor { agent, knot: 0 });
                factors.push(Factor::Anchor {
                    agent,
                    knot: num_intervals,
                });
                counts.anchor += 2;
            }
            if parts.with_obstacle_factors {
                for knot in 0..=num_intervals {
                    factors.push(Factor::Static { agent, knot });
                    counts.static_obstacle += 1;
                }
                for interval in 0..num_intervals {
                    for tau_idx in 0..parts.n_p {
                        factors.push(Factor::InterpStatic {
                            agent,
                            interval,
                            tau_idx,
                        });
                        counts.interp_static += 1;
                    }
                }
            }
        }
        if parts.with_mutual_factors {
            for a in 0..n_agents {
                for b in a + 1..n_agents {
                    for knot in 0..=num_intervals {
                        factors.push(Factor::Mutual { a, b, knot });
                        counts.mutual += 1;
                    }
                    for interval in 0..num_intervals {
                        for tau_idx in 0..parts.n_p {
                            factors.push(Factor::InterpMutual {
                                a,
                                b,
                                interval,
                                tau_idx,
                            });
                            counts.interp_mutual += 1;
                        }
                    }
                }
            }
        }

        // fixed sparsity pattern
        let block_of = |agent: usize, knot: usize| knot * n_agents + agent;
        let mut pattern = Vec::new();
        for knot in 0..=num_intervals {
            for agent in 0..n_agents {
                pattern.push((block_of(agent, knot), block_of(agent, knot)));
            }
        }
        for agent in 0..n_agents {
            for i in 0..num_intervals {
                pattern.push((block_of(agent, i), block_of(agent, i + 1)));
            }
        }
        if parts.with_mutual_factors {
            for a in 0..n_agents {
                for b in a + 1..n_agents {
                    for i in 0..=num_intervals {
                        pattern.push((block_of(a, i), block_of(b, i)));
                    }
                    if parts.n_p > 0 {
                        for i in 0..num_intervals {
                            pattern.push((block_of(a, i), block_of(b, i + 1)));
                            pattern.push((block_of(b, i), block_of(a, i + 1)));
                        }
                    }
                }
            }
        }

        Ok(Self {
            model: parts.model,
            n_agents,
            num_intervals,
            dt,
            block_dim,
            canon_to_scenario: order,
            scenario_to_canon,
            mu,
            t0,
            t_end,
            sdf: parts.sdf,
            radii: parts.radii,
            anchor_targets: parts.anchor_targets,
            weights: parts.weights,
            sigma_anchor: parts.sigma_anchor,
            factors,
            counts,
            interp,
            q_inv,
            phi_t_qinv,
            phi_t_qinv_phi,
            k0_inv,
            pattern,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn num_intervals(&self) -> usize {
        self.num_intervals
    }

    pub fn factor_counts(&self) -> FactorCounts {
        self.counts
    }

    /// Canonical slot -> scenario agent index.
    pub fn canonical_agents(&self) -> &[usize] {
        &self.canon_to_scenario
    }

    pub fn sdf(&self) -> Option<&SignedDistanceField> {
        self.sdf.as_ref()
    }

    pub fn weights(&self) -> &NoiseWeights {
        &self.weights
    }

    /// Column block of (scenario agent, knot) in the normal equations.
    pub fn block_index(&self, scenario_agent: usize, knot: usize) -> usize {
        knot * self.n_agents + self.scenario_to_canon[scenario_agent]
    }

    /// The prior mean as a joint trajectory in scenario agent order.
    pub fn prior_mean_trajectory(&self) -> JointTrajectory {
        let agents = (0..self.n_agents)
            .map(|scen| {
                let canon = self.scenario_to_canon[scen];
                let states = (0..=self.num_intervals)
                    .map(|i| {
                        let off = (i * self.n_agents + canon) * self.block_dim;
                        self.mu.rows(off, self.block_dim).clone_owned()
                    })
                    .collect();
                SupportTrajectory::new(self.t0, self.t_end, states).expect("valid mean")
            })
            .collect();
        JointTrajectory { agents }
    }

    fn flatten(&self, x: &JointTrajectory) -> Result<DVector<f64>, GraphError> {
        x.validate()?;
        if x.n_agents() != self.n_agents
            || x.num_intervals() != self.num_intervals
            || x.agents[0].state_dim() != self.block_dim
        {
            return Err(GraphError::DimensionMismatch {
                expected: self.n_agents * (self.num_intervals + 1) * self.block_dim,
                got: x.n_agents() * (x.num_intervals() + 1) * x.agents[0].state_dim(),
            });
        }
        let mut flat = DVector::zeros(self.mu.len());
        for (scen, traj) in x.agents.iter().enumerate() {
            let canon = self.scenario_to_canon[scen];
            for (i, s) in traj.states.iter().enumerate() {
                let off = (i * self.n_agents + canon) * self.block_dim;
                flat.rows_mut(off, self.block_dim).copy_from(s);
            }
        }
        Ok(flat)
    }

    fn unflatten(&self, flat: &DVector<f64>) -> JointTrajectory {
        let agents = (0..self.n_agents)
            .map(|scen| {
                let canon = self.scenario_to_canon[scen];
                let states = (0..=self.num_intervals)
                    .map(|i| {
                        let off = (i * self.n_agents + canon) * self.block_dim;
                        flat.rows(off, self.block_dim).clone_owned()
                    })
                    .collect();
                SupportTrajectory::new(self.t0, self.t_end, states).expect("valid trajectory")
            })
            .collect();
        JointTrajectory { agents }
    }

    /// Applies a flat normal-equation step to a joint trajectory.
    pub fn apply_step(
        &self,
        x: &JointTrajectory,
        delta: &DVector<f64>,
    ) -> Result<JointTrajectory, GraphError> {
        let flat = self.flatten(x)?;
        if delta.len() != flat.len() {
            return Err(GraphError::DimensionMismatch {
                expected: flat.len(),
                got: delta.len(),
            });
        }
        Ok(self.unflatten(&(flat + delta)))
    }

    #[inline]
    fn offset(&self, agent: usize, knot: usize) -> usize {
        (knot * self.n_agents + agent) * self.block_dim
    }

    fn state<'a>(&self, flat: &'a DVector<f64>, agent: usize, knot: usize) -> &'a [f64] {
        let off = self.offset(agent, knot);
        &flat.as_slice()[off..off + self.block_dim]
    }

    fn interp_state_flat(
        &self,
        flat: &DVector<f64>,
        agent: usize,
        interval: usize,
        tau_idx: usize,
    ) -> DVector<f64> {
        let c = &self.interp[tau_idx];
        let xi = flat.rows(self.offset(agent, interval), self.block_dim);
        let xn = flat.rows(self.offset(agent, interval + 1), self.block_dim);
        &c.lambda * xi + &c.psi * xn
    }

    /// Quadratic form `0.5 e^T W e` of one factor at the flat state.
    fn factor_cost(&self, f: &Factor, flat: &DVector<f64>) -> f64 {
        match *f {
            Factor::GpPrior { agent, interval } => {
                let e = self.gp_error(flat, agent, interval);
                0.5 * (self.q_inv.clone() * &e).dot(&e)
            }
            Factor::InitialPrior { agent } => {
                let off = self.offset(agent, 0);
                let dev = flat.rows(off, self.block_dim) - self.mu.rows(off, self.block_dim);
                0.5 * (&self.k0_inv * &dev).dot(&dev)
            }
            Factor::Anchor { agent, knot } => {
                let target = if knot == 0 {
                    &self.anchor_targets[agent].0
                } else {
                    &self.anchor_targets[agent].1
                };
                let s = flat.rows(self.offset(agent, knot), self.block_dim);
                let e2 = (s - target).norm_squared();
                0.5 * e2 / (self.sigma_anchor * self.sigma_anchor)
            }
            Factor::Static { agent, knot } => {
                let Some(sdf) = &self.sdf else { return 0.0 };
                let s = self.state(flat, agent, knot);
                let (d, _) = sdf.query(&crate::env::Point2::new(s[0], s[1]));
                let h = hinge_static(d - self.radii[agent], self.weights.eps_obs);
                0.5 * h * h / (self.weights.sigma_obs * self.weights.sigma_obs)
            }
            Factor::InterpStatic {
                agent,
                interval,
                tau_idx,
            } => {
                let Some(sdf) = &self.sdf else { return 0.0 };
                let x = self.interp_state_flat(flat, agent, interval, tau_idx);
                let (d, _) = sdf.query(&crate::env::Point2::new(x[0], x[1]));
                let h = hinge_static(d - self.radii[agent], self.weights.eps_obs);
                0.5 * h * h / (self.weights.sigma_obs * self.weights.sigma_obs)
            }
            Factor::Mutual { a, b, knot } => {
                let sa = self.state(flat, a, knot);
                let sb = self.state(flat, b, knot);
                let h = hinge_mutual(
                    &crate::env::Point2::new(sa[0], sa[1]),
                    &crate::env::Point2::new(sb[0], sb[1]),
                    self.weights.eps_mul,
                );
                0.5 * h * h / (self.weights.sigma_mul * self.weights.sigma_mul)
            }
            Factor::InterpMutual {
                a,
                b,
                interval,
                tau_idx,
            } => {
                let xa = self.interp_state_flat(flat, a, interval, tau_idx);
                let xb = self.interp_state_flat(flat, b, interval, tau_idx);
                let h = hinge_mutual(
                    &crate::env::Point2::new(xa[0], xa[1]),
                    &crate::env::Point2::new(xb[0], xb[1]),
                    self.weights.eps_mul,
                );
                0.5 * h * h / (self.weights.sigma_mul * self.weights.sigma_mul)
            }
        }
    }

    fn gp_error(&self, flat: &DVector<f64>, agent: usize, interval: usize) -> DVector<f64> {
        let d = self.block_dim / 2;
        let off_i = self.offset(agent, interval);
        let off_n = self.offset(agent, interval + 1);
        let mut e = DVector::zeros(self.block_dim);
        for k in 0..d {
            let dev_i_p = flat[off_i + k] - self.mu[off_i + k];
            let dev_i_v = flat[off_i + d + k] - self.mu[off_i + d + k];
            let dev_n_p = flat[off_n + k] - self.mu[off_n + k];
            let dev_n_v = flat[off_n + d + k] - self.mu[off_n + d + k];
            e[k] = dev_i_p + self.dt * dev_i_v - dev_n_p;
            e[d + k] = dev_i_v - dev_n_v;
        }
        e
    }

    /// Total objective: the sum of `0.5 ||e||^2_W` over all factors, GP prior
    /// terms included.
    pub fn total_cost(&self, x: &JointTrajectory) -> Result<f64, GraphError> {
        let flat = self.flatten(x)?;
        Ok(self.cost_flat(&flat))
    }

    fn cost_flat(&self, flat: &DVector<f64>) -> f64 {
        self.factors
            .iter()
            .map(|f| self.factor_cost(f, flat))
            .sum()
    }

    /// GP prior quadratic (prior chain plus its initial anchor) at `x`.
    pub fn smoothness_cost(&self, x: &JointTrajectory) -> f64 {
        let flat = match self.flatten(x) {
            Ok(f) => f,
            Err(_) => return f64::NAN,
        };
        self.factors
            .iter()
            .filter(|f| matches!(f, Factor::GpPrior { .. } | Factor::InitialPrior { .. }))
            .map(|f| self.factor_cost(f, &flat))
            .sum()
    }

    /// Linearizes all factors at `x` into the sparse normal equations
    /// `Lambda_sys dx = b` of the damped Gauss-Newton step.
    pub fn linearize(
        &self,
        x: &JointTrajectory,
    ) -> Result<(BlockSparseMatrix, DVector<f64>), GraphError> {
        let flat = self.flatten(x)?;
        self.linearize_flat(&flat)
    }

    fn linearize_flat(
        &self,
        flat: &DVector<f64>,
    ) -> Result<(BlockSparseMatrix, DVector<f64>), GraphError> {
        let n_blocks = (self.num_intervals + 1) * self.n_agents;
        let bd = self.block_dim;
        let mut mat = BlockSparseMatrix::new(bd, n_blocks);
        for &(i, j) in &self.pattern {
            mat.ensure_block(i, j);
        }
        let mut b: DVector<f64> = DVector::zeros(n_blocks * bd);
        let block_of = |agent: usize, knot: usize| knot * self.n_agents + agent;

        for f in &self.factors {
            match *f {
                Factor::GpPrior { agent, interval } => {
                    let e = self.gp_error(flat, agent, interval);
                    if !e.iter().all(|v| v.is_finite()) {
                        return Err(GraphError::NonFinite {
                            factor: format!("gp_prior agent {agent} interval {interval}"),
                        });
                    }
                    let bi = block_of(agent, interval);
                    let bn = block_of(agent, interval + 1);
                    mat.add_block(bi, bi, &self.phi_t_qinv_phi);
                    mat.add_block(bi, bn, &(-&self.phi_t_qinv));
                    mat.add_block(bn, bn, &self.q_inv);
                    let g_i = &self.phi_t_qinv * &e;
                    let g_n = &self.q_inv * &e;
                    let off_i = self.offset(agent, interval);
                    let off_n = self.offset(agent, interval + 1);
                    for k in 0..bd {
                        b[off_i + k] -= g_i[k];
                        b[off_n + k] += g_n[k];
                    }
                }
                Factor::InitialPrior { agent } => {
                    let b0 = block_of(agent, 0);
                    mat.add_block(b0, b0, &self.k0_inv);
                    let off = self.offset(agent, 0);
                    let dev = flat.rows(off, bd) - self.mu.rows(off, bd);
                    let g = &self.k0_inv * dev;
                    for k in 0..bd {
                        b[off + k] -= g[k];
                    }
                }
                Factor::Anchor { agent, knot } => {
                    let target = if knot == 0 {
                        &self.anchor_targets[agent].0
                    } else {
                        &self.anchor_targets[agent].1
                    };
                    let w = 1.0 / (self.sigma_anchor * self.sigma_anchor);
                    let bk = block_of(agent, knot);
                    let eye = DMatrix::identity(bd, bd) * w;
                    mat.add_block(bk, bk, &eye);
                    let off = self.offset(agent, knot);
                    for k in 0..bd {
                        b[off + k] -= w * (flat[off + k] - target[k]);
                    }
                }
                Factor::Static { agent, knot } => {
                    let Some(sdf) = &self.sdf else { continue };
                    let s = self.state(flat, agent, knot);
                    let (d, grad) = sdf.query(&crate::env::Point2::new(s[0], s[1]));
                    let d_signed = d - self.radii[agent];
                    if d_signed > self.weights.eps_obs {
                        continue;
                    }
                    let e = self.weights.eps_obs - d_signed;
                    if !e.is_finite() || !grad.x.is_finite() || !grad.y.is_finite() {
                        return Err(GraphError::NonFinite {
                            factor: format!("static agent {agent} knot {knot}"),
                        });
                    }
                    let w = 1.0 / (self.weights.sigma_obs * self.weights.sigma_obs);
                    let mut row = DVector::zeros(bd);
                    row[0] = -grad.x;
                    row[1] = -grad.y;
                    let bk = block_of(agent, knot);
                    mat.add_block(bk, bk, &((&row * row.transpose()) * w));
                    let off = self.offset(agent, knot);
                    for k in 0..bd {
                        b[off + k] -= w * row[k] * e;
                    }
                }
                Factor::InterpStatic {
                    agent,
                    interval,
                    tau_idx,
                } => {
                    let Some(sdf) = &self.sdf else { continue };
                    let xt = self.interp_state_flat(flat, agent, interval, tau_idx);
                    let (d, grad) = sdf.query(&crate::env::Point2::new(xt[0], xt[1]));
                    let d_signed = d - self.radii[agent];
                    if d_signed > self.weights.eps_obs {
                        continue;
                    }
                    let e = self.weights.eps_obs - d_signed;
                    if !e.is_finite() || !grad.x.is_finite() || !grad.y.is_finite() {
                        return Err(GraphError::NonFinite {
                            factor: format!(
                                "interp_static agent {agent} interval {interval} tau {tau_idx}"
                            ),
                        });
                    }
                    let c = &self.interp[tau_idx];
                    let mut row_tau = nalgebra::RowDVector::zeros(bd);
                    row_tau[0] = -grad.x;
                    row_tau[1] = -grad.y;
                    let j_i = &row_tau * &c.lambda;
                    let j_n = &row_tau * &c.psi;
                    let w = 1.0 / (self.weights.sigma_obs * self.weights.sigma_obs);
                    let bi = block_of(agent, interval);
                    let bn = block_of(agent, interval + 1);
                    mat.add_block(bi, bi, &((j_i.transpose() * &j_i) * w));
                    mat.add_block(bi, bn, &((j_i.transpose() * &j_n) * w));
                    mat.add_block(bn, bn, &((j_n.transpose() * &j_n) * w));
                    let off_i = self.offset(agent, interval);
                    let off_n = self.offset(agent, interval + 1);
                    for k in 0..bd {
                        b[off_i + k] -= w * j_i[k] * e;
                        b[off_n + k] -= w * j_n[k] * e;
                    }
                }
                Factor::Mutual { a, b: bb, knot } => {
                    let sa = self.state(flat, a, knot);
                    let sb = self.state(flat, bb, knot);
                    let pa = crate::env::Point2::new(sa[0], sa[1]);
                    let pb = crate::env::Point2::new(sb[0], sb[1]);
                    let e = hinge_mutual(&pa, &pb, self.weights.eps_mul);
                    if e == 0.0 {
                        continue;
                    }
                    if !e.is_finite() {
                        return Err(GraphError::NonFinite {
                            factor: format!("mutual ({a},{bb}) knot {knot}"),
                        });
                    }
                    let g = mutual_jacobian(&pa, &pb, self.weights.eps_mul);
                    let w = 1.0 / (self.weights.sigma_mul * self.weights.sigma_mul);
                    let mut row_a = DVector::zeros(bd);
                    row_a[0] = g.x;
                    row_a[1] = g.y;
                    let row_b = -&row_a;
                    let ba = block_of(a, knot);
                    let bbk = block_of(bb, knot);
                    mat.add_block(ba, ba, &((&row_a * row_a.transpose()) * w));
                    mat.add_block(bbk, bbk, &((&row_b * row_b.transpose()) * w));
                    mat.add_block(ba, bbk, &((&row_a * row_b.transpose()) * w));
                    let off_a = self.offset(a, knot);
                    let off_b = self.offset(bb, knot);
                    for k in 0..bd {
                        b[off_a + k] -= w * row_a[k] * e;
                        b[off_b + k] -= w * row_b[k] * e;
                    }
                }
                Factor::InterpMutual {
                    a,
                    b: bb,
                    interval,
                    tau_idx,
                } => {
                    let xa = self.interp_state_flat(flat, a, interval, tau_idx);
                    let xb = self.interp_state_flat(flat, bb, interval, tau_idx);
                    let pa = crate::env::Point2::new(xa[0], xa[1]);
                    let pb = crate::env::Point2::new(xb[0], xb[1]);
                    let e = hinge_mutual(&pa, &pb, self.weights.eps_mul);
                    if e == 0.0 {
                        continue;
                    }
                    if !e.is_finite() {
                        return Err(GraphError::NonFinite {
                            factor: format!("interp_mutual ({a},{bb}) interval {interval}"),
                        });
                    }
                    let g = mutual_jacobian(&pa, &pb, self.weights.eps_mul);
                    let w = 1.0 / (self.weights.sigma_mul * self.weights.sigma_mul);
                    let c = &self.interp[tau_idx];
                    let mut row_tau = nalgebra::RowDVector::zeros(bd);
                    row_tau[0] = g.x;
                    row_tau[1] = g.y;
                    let ja_i = &row_tau * &c.lambda;
                    let ja_n = &row_tau * &c.psi;
                    let jb_i = -&ja_i;
                    let jb_n = -&ja_n;
                    let blocks = [
                        (block_of(a, interval), &ja_i),
                        (block_of(a, interval + 1), &ja_n),
                        (block_of(bb, interval), &jb_i),
                        (block_of(bb, interval + 1), &jb_n),
                    ];
                    for (bi, ji) in &blocks {
                        for (bj, jj) in &blocks {
                            if bi <= bj {
                                mat.add_block(*bi, *bj, &((ji.transpose() * *jj) * w));
                            }
                        }
                        let off = bi * bd;
                        for k in 0..bd {
                            b[off + k] -= w * ji[k] * e;
                        }
                    }
                }
            }
        }
        if !b.iter().all(|v| v.is_finite()) {
            return Err(GraphError::NonFinite {
                factor: "right-hand side".into(),
            });
        }
        Ok((mat, b))
    }

    /// Hessian of the GP prior factors plus the initial anchor only.
    pub fn prior_hessian(&self) -> BlockSparseMatrix {
        let n_blocks = (self.num_intervals + 1) * self.n_agents;
        let mut mat = BlockSparseMatrix::new(self.block_dim, n_blocks);
        let block_of = |agent: usize, knot: usize| knot * self.n_agents + agent;
        for f in &self.factors {
            match *f {
                Factor::GpPrior { agent, interval } => {
                    let bi = block_of(agent, interval);
                    let bn = block_of(agent, interval + 1);
                    mat.add_block(bi, bi, &self.phi_t_qinv_phi);
                    mat.add_block(bi, bn, &(-&self.phi_t_qinv));
                    mat.add_block(bn, bn, &self.q_inv);
                }
                Factor::InitialPrior { agent } => {
                    let b0 = block_of(agent, 0);
                    mat.add_block(b0, b0, &self.k0_inv);
                }
                _ => {}
            }
        }
        mat
    }

    /// The assembled inverse kernel of one agent's prior chain, for
    /// cross-checks against the factor-assembled Hessian.
    pub fn inverse_kernel(&self) -> Result<BlockTridiagonal, GraphError> {
        let mean = self.prior_mean_trajectory().agents[0].clone();
        let prior = PriorMean {
            mean,
            k0: DMatrix::identity(self.block_dim, self.block_dim)
                * self.k0_inv[(0, 0)].recip(),
        };
        Ok(assemble_inverse_kernel(
            &self.model,
            &prior,
            self.num_intervals,
            self.dt,
        )?)
    }

    /// Levenberg-Marquardt: linearize, solve the damped system, accept the
    /// step only if the total cost decreases; λ shrinks on acceptance and grows
    /// on rejection. Deterministic for identical inputs.
    pub fn optimize(
        &self,
        x0: &JointTrajectory,
        config: &SolverConfig,
    ) -> Result<(JointTrajectory, SolveStats), GraphError> {
        let started = Instant::now();
        let mut flat = self.flatten(x0)?;
        let mut cost = self.cost_flat(&flat);
        if !cost.is_finite() {
            return Err(GraphError::NonFiniteCost);
        }
        let initial_cost = cost;
        let mut trace = vec![cost];
        let mut lambda = config.initial_damping;
        let mut reason = ConvergenceReason::MaxIterations;
        let mut iterations = 0;

        'outer: for _ in 0..config.max_iterations {
            iterations += 1;
            let (mat, b) = self.linearize_flat(&flat)?;
            loop {
                let delta = match solve_normal_equations(&mat, &b, lambda) {
                    Ok(d) => d,
                    Err(GraphError::NotPositiveDefinite) => {
                        lambda *= config.damping_scale;
                        if lambda > LAMBDA_MAX {
                            reason = ConvergenceReason::DampingOverflow;
                            break 'outer;
                        }
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                if delta.norm() < STEP_TOLERANCE {
                    reason = ConvergenceReason::StepSizeTolerance;
                    break 'outer;
                }
                let candidate = &flat + &delta;
                let cand_cost = self.cost_flat(&candidate);
                if cand_cost.is_finite() && cand_cost < cost {
                    let drop = cost - cand_cost;
                    flat = candidate;
                    cost = cand_cost;
                    trace.push(cost);
                    lambda = (lambda / config.damping_scale).max(LAMBDA_MIN);
                    if drop < config.absolute_cost_tolerance {
                        reason = ConvergenceReason::AbsoluteCostTolerance;
                        break 'outer;
                    }
                    if drop < config.relative_cost_tolerance * cost.max(1e-300) {
                        reason = ConvergenceReason::RelativeCostTolerance;
                        break 'outer;
                    }
                    break;
                }
                lambda *= config.damping_scale;
                if lambda > LAMBDA_MAX {
                    reason = ConvergenceReason::DampingOverflow;
                    break 'outer;
                }
            }
        }

        let stats = SolveStats {
            iterations,
            initial_cost,
            final_cost: cost,
            cost_trace: trace,
            solve_time_ms: started.elapsed().as_secs_f64() * 1e3,
            reason,
        };
        Ok((self.unflatten(&flat), stats))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{OccupancyGrid, Point2};
    use crate::scenario::{formation_permutations, line_trajectory, AgentSpec, InitMode, Scenario};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::ops::AddAssign;

    fn empty_scenario(agents: Vec<AgentSpec>, n: usize, n_p: usize) -> Scenario {
        Scenario {
            agents,
            map: None,
            environment: None,
            t_total: 10.0,
            num_intervals: n,
            n_p,
            eps_obs: 2.0,
            sigma_obs: 0.3,
            eps_mul: 15.0,
            sigma_mul: 0.7,
            qc: 1.0,
            init: InitMode::Line,
        }
    }

    fn agent(start: [f64; 2], goal: [f64; 2]) -> AgentSpec {
        AgentSpec {
            start,
            goal,
            radius: 1.0,
        }
    }

    #[test]
    fn factor_counts_match_combinatorics() {
        let sc = empty_scenario(vec![agent([0.0, 0.0], [10.0, 0.0])], 9, 9);
        let config = SolverConfig::from_scenario(&sc);
        let g = build_graph(&sc, &config).unwrap();
        let c = g.factor_counts();
        assert_eq!(c.mutual, 0);
        assert_eq!(c.interp_mutual, 0);
        assert_eq!(c.static_obstacle, 10);
        assert_eq!(c.interp_static, 81);
        assert_eq!(c.gp_prior, 9);
        assert_eq!(c.anchor, 2);

        let sc = empty_scenario(
            vec![agent([0.0, 0.0], [10.0, 0.0]), agent([10.0, 3.0], [0.0, 3.0])],
            2,
            0,
        );
        let config = SolverConfig::from_scenario(&sc);
        let g = build_graph(&sc, &config).unwrap();
        assert_eq!(g.factor_counts().mutual, 3);
        assert_eq!(g.factor_counts().interp_mutual, 0);

        // 5 agents, N=9, n_p=9: 10*C(5,2)=100 mutual + 810 interpolated mutual
        let sc = formation_permutations(5).remove(1);
        let config = SolverConfig::from_scenario(&sc);
        let g = build_graph(&sc, &config).unwrap();
        let c = g.factor_counts();
        let pairs = 5 * 4 / 2;
        assert_eq!(c.mutual, pairs * 10);
        assert_eq!(c.mutual, 100);
        assert_eq!(c.interp_mutual, pairs * 9 * 9);
        assert_eq!(c.interp_mutual, 810);
        assert_eq!(c.static_obstacle, 5 * 10);
        assert_eq!(c.interp_static, 5 * 9 * 9);
    }

    #[test]
    fn rejects_invalid_scenario() {
        let sc = empty_scenario(
            vec![agent([0.0, 0.0], [10.0, 0.0]), agent([0.0, 0.0], [0.0, 5.0])],
            5,
            0,
        );
        let config = SolverConfig::from_scenario(&sc);
        match build_graph(&sc, &config) {
            Err(GraphError::InvalidScenario { violations }) => {
                assert!(!violations.is_empty());
            }
            Err(other) => panic!("expected validation error, got {other}"),
            Ok(_) => panic!("expected validation error, got a graph"),
        }
    }

    #[test]
    fn prior_only_b_is_zero_at_mean() {
        let model = ConstantVelocityModel::isotropic(2, 1.0).unwrap();
        let mean = line_trajectory(Point2::new(0.0, 0.0), Point2::new(5.0, 5.0), 4, 0.0, 4.0);
        let g = FactorGraph::prior_only(model, vec![mean], 1e-6).unwrap();
        let x0 = g.prior_mean_trajectory();
        let (_, b) = g.linearize(&x0).unwrap();
        assert_eq!(b.norm(), 0.0);
    }

    #[test]
    fn linearize_matches_dense_assembly_oracle() {
        // 2-knot single-agent problem with a wall so one static factor is active
        let mut grid = OccupancyGrid::free(Point2::new(0.0, 0.0), 0.5, 20, 20);
        for r in 0..20 {
            grid.set_occupied(r, 10, true);
        }
        let sdf = crate::env::SignedDistanceField::compute(&grid);
        let model = ConstantVelocityModel::isotropic(2, 1.0).unwrap();
        let mean = line_trajectory(Point2::new(1.5, 5.0), Point2::new(3.5, 5.0), 1, 0.0, 1.0);
        let weights = NoiseWeights::default();
        let parts = GraphParts {
            model: model.clone(),
            prior_mean: vec![mean.clone()],
            sdf: Some(sdf.clone()),
            radii: vec![1.0],
            anchor_targets: vec![(mean.states[0].clone(), mean.states[1].clone())],
            weights,
            sigma_anchor: 1e-4,
            k0: 1e-6,
            n_p: 0,
            with_anchors: false,
            with_obstacle_factors: true,
            with_mutual_factors: false,
        };
        let g = FactorGraph::from_parts(parts).unwrap();
        // evaluate away from the mean so the prior residual is nonzero too
        let x = JointTrajectory {
            agents: vec![SupportTrajectory::new(
                0.0,
                1.0,
                vec![
                    nalgebra::dvector![2.0, 5.0, 1.0, 0.0],
                    nalgebra::dvector![3.8, 5.2, 1.5, 0.1],
                ],
            )
            .unwrap()],
        };
        let (mat, b) = g.linearize(&x).unwrap();

        // dense oracle: K^-1 plus J^T W J assembled with the public factor ops
        let k_inv = g.inverse_kernel().unwrap().to_dense();
        let mut dense = k_inv.clone();
        let mut rhs = DVector::zeros(8);
        let mu_flat = nalgebra::dvector![
            mean.states[0][0],
            mean.states[0][1],
            mean.states[0][2],
            mean.states[0][3],
            mean.states[1][0],
            mean.states[1][1],
            mean.states[1][2],
            mean.states[1][3]
        ];
        let x_flat = nalgebra::dvector![2.0, 5.0, 1.0, 0.0, 3.8, 5.2, 1.5, 0.1];
        rhs += &k_inv * (&mu_flat - &x_flat);
        for knot in 0..2usize {
            let state = x_flat.rows(knot * 4, 4).clone_owned();
            let lin = crate::factors::static_factor(&state, &sdf, 1.0, &g.weights);
            let w = 1.0 / (lin.sigma * lin.sigma);
            let j = &lin.jacobians[0];
            dense
                .view_mut((knot * 4, knot * 4), (4, 4))
                .add_assign(j.transpose() * j * w);
            let contrib = j.transpose() * &lin.error * w;
            for k in 0..4 {
                rhs[knot * 4 + k] -= contrib[k];
            }
        }
        assert_relative_eq!(mat.to_dense(), dense, epsilon = 1e-9);
        assert_relative_eq!(b, rhs, epsilon = 1e-9);
    }

    #[test]
    fn inactive_cross_agent_blocks_are_exactly_zero() {
        // agents far apart (hinges off): the stored cross blocks are zero
        let sc = empty_scenario(
            vec![
                agent([0.0, 0.0], [10.0, 0.0]),
                agent([100.0, 0.0], [110.0, 0.0]),
            ],
            3,
            2,
        );
        let config = SolverConfig::from_scenario(&sc);
        let g = build_graph(&sc, &config).unwrap();
        let x0 = g.prior_mean_trajectory();
        let (mat, _) = g.linearize(&x0).unwrap();
        let mut saw_cross = false;
        for knot in 0..=3 {
            let ba = g.block_index(0, knot);
            let bb = g.block_index(1, knot);
            let (lo, hi) = (ba.min(bb), ba.max(bb));
            if let Some(blockm) = mat.block(lo, hi) {
                saw_cross = true;
                assert_eq!(blockm.norm(), 0.0);
            }
        }
        assert!(saw_cross, "cross blocks must be stored in the pattern");
    }

    #[test]
    fn solve_identity_system() {
        let mut mat = BlockSparseMatrix::new(4, 3);
        let eye = DMatrix::identity(4, 4);
        for i in 0..3 {
            mat.add_block(i, i, &eye);
        }
        let b = DVector::from_fn(12, |i, _| (i as f64) - 4.0);
        let x = solve_normal_equations(&mat, &b, 0.0).unwrap();
        assert_relative_eq!(x, b, epsilon = 1e-12);
    }

    #[test]
    fn solve_matches_dense_oracle() {
        // random banded SPD 40x40 built from 10 blocks of dimension 4
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut mat = BlockSparseMatrix::new(4, 10);
        for i in 0..10usize {
            let r = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-1.0..1.0));
            let spd = &r * r.transpose() + DMatrix::identity(4, 4) * 6.0;
            mat.add_block(i, i, &spd);
            if i + 1 < 10 {
                let off = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-0.5..0.5));
                mat.add_block(i, i + 1, &off);
            }
            if i + 2 < 10 {
                let off = DMatrix::from_fn(4, 4, |_, _| rng.gen_range(-0.3..0.3));
                mat.add_block(i, i + 2, &off);
            }
        }
        let b = DVector::from_fn(40, |i, _| ((i * 7919) % 23) as f64 / 10.0 - 1.0);
        for lambda in [0.0, 0.5] {
            let x = solve_normal_equations(&mat, &b, lambda).unwrap();
            let mut dense = mat.to_dense();
            for i in 0..40 {
                dense[(i, i)] *= 1.0 + lambda;
            }
            let oracle = dense.cholesky().unwrap().solve(&b);
            assert_relative_eq!(x, oracle, epsilon = 1e-9);
        }
        // damping limit: step norm shrinks monotonically
        let norms: Vec<f64> = [1.0, 10.0, 100.0]
            .iter()
            .map(|&l| solve_normal_equations(&mat, &b, l).unwrap().norm())
            .collect();
        assert!(norms[0] > norms[1] && norms[1] > norms[2]);
    }

    #[test]
    fn solve_rejects_indefinite() {
        let mut mat = BlockSparseMatrix::new(2, 1);
        mat.add_block(0, 0, &DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]));
        let b = DVector::from_column_slice(&[1.0, 1.0]);
        assert!(matches!(
            solve_normal_equations(&mat, &b, 0.0),
            Err(GraphError::NotPositiveDefinite)
        ));
    }

    #[test]
    fn optimize_already_optimal_converges_first_iteration() {
        let sc = empty_scenario(vec![agent([0.0, 0.0], [10.0, 0.0])], 9, 9);
        let config = SolverConfig::from_scenario(&sc);
        let g = build_graph(&sc, &config).unwrap();
        let x0 = g.prior_mean_trajectory();
        let (x_star, stats) = g.optimize(&x0, &config).unwrap();
        assert_eq!(stats.iterations, 1);
        assert_eq!(stats.reason, ConvergenceReason::StepSizeTolerance);
        assert_eq!(x_star, x0);
        assert!(stats.final_cost.abs() < 1e-18);
    }

    #[test]
    fn optimize_cost_trace_strictly_decreasing() {
        let sc = empty_scenario(
            vec![
                agent([-10.0, 0.0], [10.0, 0.0]),
                agent([10.0, 0.0], [-10.0, 0.0]),
            ],
            9,
            9,
        );
        let config = SolverConfig::from_scenario(&sc);
        let g = build_graph(&sc, &config).unwrap();
        let x0 = g.prior_mean_trajectory();
        let (_, stats) = g.optimize(&x0, &config).unwrap();
        assert!(stats.cost_trace.len() >= 2, "no steps accepted");
        for w in stats.cost_trace.windows(2) {
            assert!(w[1] < w[0], "trace not strictly decreasing: {w:?}");
        }
        assert!(stats.final_cost <= stats.initial_cost);
    }

    #[test]
    fn total_cost_examples() {
        // zero cost at the mean with matching anchors and no hinges
        let sc = empty_scenario(vec![agent([0.0, 0.0], [10.0, 0.0])], 5, 3);
        let config = SolverConfig::from_scenario(&sc);
        let g = build_graph(&sc, &config).unwrap();
        let x0 = g.prior_mean_trajectory();
        assert_eq!(g.total_cost(&x0).unwrap(), 0.0);

        // single mutual factor with e=5, sigma=0.7: 0.5 * 25 / 0.49
        let weights = NoiseWeights::default();
        let a = nalgebra::dvector![0.0, 0.0, 0.0, 0.0];
        let bst = nalgebra::dvector![10.0, 0.0, 0.0, 0.0];
        let lin = crate::factors::mutual_factor(&a, &bst, &weights).unwrap();
        assert_relative_eq!(lin.cost(), 0.5 * 25.0 / 0.49, epsilon = 1e-12);

        // doubling all residuals quadruples a quadratic cost
        let model = ConstantVelocityModel::isotropic(2, 1.0).unwrap();
        let mean = line_trajectory(Point2::new(0.0, 0.0), Point2::new(5.0, 0.0), 3, 0.0, 3.0);
        let g = FactorGraph::prior_only(model, vec![mean.clone()], 1e-2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dev: Vec<DVector<f64>> = (0..4)
            .map(|_| DVector::from_fn(4, |_, _| rng.gen_range(-1.0..1.0)))
            .collect();
        let perturbed = |scale: f64| JointTrajectory {
            agents: vec![SupportTrajectory::new(
                0.0,
                3.0,
                mean.states
                    .iter()
                    .zip(&dev)
                    .map(|(s, d)| s + d * scale)
                    .collect(),
            )
            .unwrap()],
        };
        let c1 = g.total_cost(&perturbed(1.0)).unwrap();
        let c2 = g.total_cost(&perturbed(2.0)).unwrap();
        assert_relative_eq!(c2, 4.0 * c1, max_relative = 1e-12);
    }

    #[test]
    fn gauss_newton_one_step_reaches_mean_on_pure_prior() {
        let model = ConstantVelocityModel::isotropic(2, 1.0).unwrap();
        let mean = line_trajectory(Point2::new(0.0, 0.0), Point2::new(8.0, 4.0), 6, 0.0, 6.0);
        let g = FactorGraph::prior_only(model, vec![mean.clone()], 1e-6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let states: Vec<DVector<f64>> = mean
            .states
            .iter()
            .map(|s| s + DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0)))
            .collect();
        let x = JointTrajectory {
            agents: vec![SupportTrajectory::new(0.0, 6.0, states).unwrap()],
        };
        let (mat, b) = g.linearize(&x).unwrap();
        let delta = solve_normal_equations(&mat, &b, 0.0).unwrap();
        let x1 = g.apply_step(&x, &delta).unwrap();
        for (s, m) in x1.agents[0].states.iter().zip(&mean.states) {
            assert!((s - m).norm() < 1e-8, "GN step missed the mean");
        }
    }

    #[test]
    fn sparsity_block_accounting() {
        let sc = empty_scenario(
            vec![
                agent([0.0, 0.0], [10.0, 0.0]),
                agent([10.0, 3.0], [0.0, 3.0]),
                agent([0.0, 6.0], [10.0, 6.0]),
            ],
            9,
            9,
        );
        let config = SolverConfig::from_scenario(&sc);
        let g = build_graph(&sc, &config).unwrap();
        let x0 = g.prior_mean_trajectory();
        let (mat, _) = g.linearize(&x0).unwrap();
        let n_ag = 3;
        let n = 9;
        let pairs = n_ag * (n_ag - 1) / 2;
        let expected = n_ag * (n + 1)        // diagonal blocks
            + n_ag * n                       // within-agent off-diagonals
            + pairs * (n + 1)                // same-knot cross blocks
            + pairs * 2 * n; // adjacent-knot cross blocks
        assert_eq!(mat.nnz_blocks(), expected);
        let dense_blocks = (n_ag * (n + 1)) * (n_ag * (n + 1) + 1) / 2;
        assert!(mat.nnz_blocks() < dense_blocks / 3);
    }

    #[test]
    fn prior_hessian_matches_inverse_kernel() {
        for d in [1usize, 2] {
            for n in [1usize, 2, 5] {
                let model = ConstantVelocityModel::isotropic(d, 0.8).unwrap();
                let sd = 2 * d;
                let states = vec![DVector::zeros(sd); n + 1];
                let mean = SupportTrajectory::new(0.0, n as f64 * 0.7, states).unwrap();
                let g =
                    FactorGraph::prior_only(model.clone(), vec![mean.clone()], 1e-6).unwrap();
                let from_factors = g.prior_hessian().to_dense();
                let prior = PriorMean {
                    mean,
                    k0: DMatrix::identity(sd, sd) * 1e-6,
                };
                let direct = assemble_inverse_kernel(&model, &prior, n, 0.7)
                    .unwrap()
                    .to_dense();
                assert_relative_eq!(from_factors, direct, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn linearize_cost_consistent_with_total_cost() {
        // 0.5 * e^T W e summed from the linearization equals total_cost
        let sc = empty_scenario(
            vec![
                agent([-10.0, 0.0], [10.0, 0.0]),
                agent([10.0, 0.5], [-10.0, 0.5]),
            ],
            5,
            3,
        );
        let config = SolverConfig::from_scenario(&sc);
        let g = build_graph(&sc, &config).unwrap();
        let x0 = g.prior_mean_trajectory();
        let flat = g.flatten(&x0).unwrap();
        let total: f64 = g.factors.iter().map(|f| g.factor_cost(f, &flat)).sum();
        assert_relative_eq!(total, g.total_cost(&x0).unwrap(), epsilon = 1e-12);
        assert!(total > 0.0, "mutual hinges should be active");
    }
}
