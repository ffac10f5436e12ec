//! Scenario definitions, benchmark generators, the sequential-replanning
//! baseline, collision checking, and metrics.

use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{astar_path, resample_path, GridPath, OccupancyGrid, Point2, SignedDistanceField};
use crate::factors::NoiseWeights;
use crate::gp::{ConstantVelocityModel, SupportTrajectory};
use crate::graph::{build_graph, FactorGraph, GraphError, JointTrajectory, SolverConfig};

/// Final interpolated position must be within this distance of the goal for a
/// run to count as a success, meters.
pub const GOAL_TOLERANCE: f64 = 0.5;
/// Collision-check slack, meters.
pub const COLLISION_TOL: f64 = 1e-6;
/// Amplitude of the deterministic lateral bend applied to multi-agent
/// initializations, meters. Bending every agent towards its own motion-left
/// removes the exactly symmetric head-on configurations that otherwise pin the
/// optimizer on a colliding stationary point.
pub const INIT_LATERAL_BIAS: f64 = 1.0;
/// Strength of the deterministic progress stagger in multi-agent
/// initializations: agents start ahead of or behind the uniform schedule by
/// canonical rank, which seeds the time de-confliction in passages too narrow
/// for a lateral dodge.
pub const INIT_TIME_WARP: f64 = 0.3;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario:\n  {}", violations.join("\n  "))]
    Invalid { violations: Vec<String> },
    #[error("scenario io: {0}")]
    Io(#[from] std::io::Error),
    #[error("scenario parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("map load: {0}")]
    Map(#[from] crate::env::EnvError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub start: [f64; 2],
    pub goal: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitMode {
    #[serde(rename = "line")]
    Line,
    #[serde(rename = "astar")]
    Astar,
}

/// Declarative planning problem: agents, optional environment, horizon,
/// discretization, cost weights, and the initialization mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub agents: Vec<AgentSpec>,
    /// Path of a plain-text map file, or null for an obstacle-free world.
    pub map: Option<String>,
    pub t_total: f64,
    #[serde(rename = "N")]
    pub num_intervals: usize,
    pub n_p: usize,
    pub eps_obs: f64,
    pub sigma_obs: f64,
    pub eps_mul: f64,
    pub sigma_mul: f64,
    pub qc: f64,
    pub init: InitMode,
    /// In-memory environment; populated from `map` on load or set directly by
    /// the built-in scenario constructors.
    #[serde(skip)]
    pub environment: Option<OccupancyGrid>,
}

impl Scenario {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn weights(&self) -> NoiseWeights {
        NoiseWeights {
            sigma_obs: self.sigma_obs,
            sigma_mul: self.sigma_mul,
            eps_obs: self.eps_obs,
            eps_mul: self.eps_mul,
        }
    }

    /// Loads a scenario JSON file; a `map` path is resolved relative to the
    /// scenario file's directory.
    pub fn from_file(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        let mut sc: Scenario = serde_json::from_str(&text)?;
        if let Some(map) = &sc.map {
            let map_path = match path.parent() {
                Some(dir) => dir.join(map),
                None => Path::new(map).to_path_buf(),
            };
            let map_text = std::fs::read_to_string(&map_path)?;
            sc.environment = Some(OccupancyGrid::from_text(&map_text)?);
        }
        Ok(sc)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Checks every declared invariant, collecting all violations.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut violations = Vec::new();
        if self.agents.is_empty() {
            violations.push("at least one agent required".to_string());
        }
        for (i, a) in self.agents.iter().enumerate() {
            if !(a.radius > 0.0) {
                violations.push(format!("agent {i}: radius must be positive"));
            }
        }
        for i in 0..self.agents.len() {
            for j in i + 1..self.agents.len() {
                let a = &self.agents[i];
                let b = &self.agents[j];
                let d = ((a.start[0] - b.start[0]).powi(2) + (a.start[1] - b.start[1]).powi(2))
                    .sqrt();
                if d < a.radius + b.radius {
                    violations.push(format!(
                        "agents {i} and {j}: starts {d:.3} m apart, need >= {:.3}",
                        a.radius + b.radius
                    ));
                }
            }
        }
        if !(self.t_total > 0.0) {
            violations.push("t_total must be positive".to_string());
        }
        if self.num_intervals < 1 {
            violations.push("N must be >= 1".to_string());
        }
        if let Err(e) = self.weights().validate() {
            violations.push(e.to_string());
        }
        if !(self.qc > 0.0) {
            violations.push("qc must be positive".to_string());
        }
        if self.init == InitMode::Astar && self.environment.is_none() && self.map.is_none() {
            violations.push("astar initialization requires a map".to_string());
        }
        if let Some(grid) = &self.environment {
            let sdf = SignedDistanceField::compute(grid);
            for (i, a) in self.agents.iter().enumerate() {
                let (ds, _) = sdf.query(&Point2::new(a.start[0], a.start[1]));
                if ds - a.radius < 0.0 {
                    violations.push(format!("agent {i}: start in collision"));
                }
                let (dg, _) = sdf.query(&Point2::new(a.goal[0], a.goal[1]));
                if dg - a.radius < 0.0 {
                    violations.push(format!("agent {i}: goal in collision"));
                }
            }
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid { violations })
        }
    }
}

/// Label-free agent ordering by (start, goal, radius); all solver-internal
/// iteration follows it so relabeling agents permutes outputs bitwise.
pub fn canonical_order(agents: &[AgentSpec]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..agents.len()).collect();
    order.sort_by(|&i, &j| {
        let a = &agents[i];
        let b = &agents[j];
        a.start[0]
            .total_cmp(&b.start[0])
            .then(a.start[1].total_cmp(&b.start[1]))
            .then(a.goal[0].total_cmp(&b.goal[0]))
            .then(a.goal[1].total_cmp(&b.goal[1]))
            .then(a.radius.total_cmp(&b.radius))
    });
    order
}

/// Constant-velocity straight line from `start` to `goal` over the horizon.
pub fn line_trajectory(
    start: Point2,
    goal: Point2,
    num_intervals: usize,
    t0: f64,
    t_end: f64,
) -> SupportTrajectory {
    let horizon = t_end - t0;
    let v = (goal - start) / horizon;
    let n = num_intervals;
    let states = (0..=n)
        .map(|i| {
            let t = horizon * i as f64 / n as f64;
            let p = start + v * t;
            DVector::from_column_slice(&[p.x, p.y, v.x, v.y])
        })
        .collect();
    SupportTrajectory::new(t0, t_end, states).expect("valid by construction")
}

/// Adds the deterministic lateral half-sine bend: every agent bows towards its
/// own motion-left, with the amplitude growing mildly in the canonical rank so
/// that no two agents deform identically.
fn apply_lateral_bias(traj: &mut SupportTrajectory, rank: usize, amplitude: f64) {
    let n = traj.num_intervals();
    let first = &traj.states[0];
    let last = &traj.states[n];
    let chord = Point2::new(last[0] - first[0], last[1] - first[1]);
    let len = chord.norm();
    if len == 0.0 || amplitude == 0.0 {
        return;
    }
    let left = Point2::new(-chord.y / len, chord.x / len);
    let a = amplitude.min(0.25 * len) * (1.0 + 0.1 * rank as f64);
    let horizon = traj.t_end - traj.t0;
    for (i, s) in traj.states.iter_mut().enumerate() {
        let phase = std::f64::consts::PI * i as f64 / n as f64;
        let offset = a * phase.sin();
        let d_offset = a * (std::f64::consts::PI / horizon) * phase.cos();
        s[0] += offset * left.x;
        s[1] += offset * left.y;
        s[2] += d_offset * left.x;
        s[3] += d_offset * left.y;
    }
}

/// Builds the initialization (= prior mean) for every agent, in scenario order.
///
/// Straight lines at constant velocity, or A*-seeded paths resampled at
/// constant speed; multi-agent problems additionally get the lateral bend.
pub fn build_initialization(scenario: &Scenario) -> Result<Vec<SupportTrajectory>, ScenarioError> {
    let order = canonical_order(&scenario.agents);
    let mut rank_of = vec![0usize; scenario.agents.len()];
    for (rank, &idx) in order.iter().enumerate() {
        rank_of[idx] = rank;
    }
    let n_agents = scenario.agents.len();
    let mut out = Vec::with_capacity(n_agents);
    for (i, agent) in scenario.agents.iter().enumerate() {
        let start = Point2::new(agent.start[0], agent.start[1]);
        let goal = Point2::new(agent.goal[0], agent.goal[1]);
        // progress stagger, +beta (ahead of schedule) down to -beta (behind)
        let beta = if n_agents >= 2 {
            INIT_TIME_WARP * (1.0 - 2.0 * rank_of[i] as f64 / (n_agents - 1) as f64)
        } else {
            0.0
        };
        let warp = |u: f64| (u + beta * u * (1.0 - u), 1.0 + beta * (1.0 - 2.0 * u));
        let polyline = match scenario.init {
            InitMode::Line => GridPath {
                waypoints: vec![start, goal],
            },
            InitMode::Astar => {
                let grid =
                    scenario
                        .environment
                        .as_ref()
                        .ok_or_else(|| ScenarioError::Invalid {
                            violations: vec!["astar initialization requires a map".into()],
                        })?;
                let mut path = astar_path(grid, &start, &goal, 4, agent.radius)?;
                // snap the endpoints from cell centers to the exact poses
                let last = path.waypoints.len() - 1;
                path.waypoints[0] = start;
                path.waypoints[last] = goal;
                path
            }
        };
        let mut traj = resample_path(
            &polyline,
            scenario.num_intervals,
            0.0,
            scenario.t_total,
            warp,
        )?;
        if n_agents > 1 && scenario.init == InitMode::Line {
            apply_lateral_bias(&mut traj, rank_of[i], INIT_LATERAL_BIAS);
        }
        out.push(traj);
    }
    Ok(out)
}

/// One agent's trajectory sampled densely (support and interpolated states).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTrajectory {
    pub times: Vec<f64>,
    /// Rows `[x, y, vx, vy]`.
    pub states: Vec<[f64; 4]>,
}

impl DenseTrajectory {
    pub fn position(&self, k: usize) -> Point2 {
        Point2::new(self.states[k][0], self.states[k][1])
    }
}

/// Samples a support trajectory at `per_interval` interpolated states per
/// interval plus the knots themselves.
pub fn densify(
    model: &ConstantVelocityModel,
    traj: &SupportTrajectory,
    per_interval: usize,
) -> DenseTrajectory {
    let n = traj.num_intervals();
    let dt = traj.dt();
    let coeffs: Vec<_> = (1..=per_interval)
        .map(|k| {
            model
                .interp_coeffs(dt, dt * k as f64 / (per_interval + 1) as f64)
                .expect("tau inside interval")
        })
        .collect();
    let mut times = Vec::with_capacity(n * (per_interval + 1) + 1);
    let mut states = Vec::with_capacity(n * (per_interval + 1) + 1);
    let push = |times: &mut Vec<f64>, states: &mut Vec<[f64; 4]>, t: f64, s: &DVector<f64>| {
        times.push(t);
        states.push([s[0], s[1], s[2], s[3]]);
    };
    for i in 0..n {
        push(&mut times, &mut states, traj.knot_time(i), &traj.states[i]);
        for (k, c) in coeffs.iter().enumerate() {
            let x = crate::factors::interp_state(&traj.states[i], &traj.states[i + 1], c);
            let t = traj.knot_time(i) + dt * (k + 1) as f64 / (per_interval + 1) as f64;
            push(&mut times, &mut states, t, &x);
        }
    }
    push(&mut times, &mut states, traj.t_end, &traj.states[n]);
    DenseTrajectory { times, states }
}

/// Collision verdict and the observed minima.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionReport {
    pub collision_free: bool,
    /// Minimum inter-agent center distance over all sampled times, or None for
    /// a single agent.
    pub min_inter_clearance: Option<f64>,
    /// Minimum of `sdf(p) - r` over all agents and samples, or None without an
    /// environment.
    pub min_static_clearance: Option<f64>,
}

/// Checks densely sampled trajectories: a collision is any inter-center
/// distance below `r_i + r_j - tol` or any `sdf(p) - r < -tol`.
///
/// All trajectories must share the time horizon and sampling.
pub fn check_collision_free(
    trajectories: &[DenseTrajectory],
    sdf: Option<&SignedDistanceField>,
    radii: &[f64],
) -> CollisionReport {
    let mut min_inter = f64::INFINITY;
    let mut min_static = f64::INFINITY;
    let mut collision = false;
    let steps = trajectories
        .iter()
        .map(|t| t.states.len())
        .min()
        .unwrap_or(0);
    for k in 0..steps {
        for (i, ti) in trajectories.iter().enumerate() {
            let p = ti.position(k);
            if let Some(sdf) = sdf {
                let (d, _) = sdf.query(&p);
                let clearance = d - radii[i];
                min_static = min_static.min(clearance);
                if clearance < -COLLISION_TOL {
                    collision = true;
                }
            }
            for (j, tj) in trajectories.iter().enumerate().skip(i + 1) {
                let dist = (p - tj.position(k)).norm();
                min_inter = min_inter.min(dist);
                if dist < radii[i] + radii[j] - COLLISION_TOL {
                    collision = true;
                }
            }
        }
    }
    CollisionReport {
        collision_free: !collision,
        min_inter_clearance: (trajectories.len() > 1).then_some(min_inter),
        min_static_clearance: sdf.map(|_| min_static),
    }
}

/// Outcome of one planning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub success: bool,
    pub trajectories: Vec<DenseTrajectory>,
    pub min_inter_clearance: Option<f64>,
    pub min_static_clearance: Option<f64>,
    pub goal_errors: Vec<f64>,
    pub solve_time_ms: f64,
    pub iterations: usize,
    pub smoothness_cost: f64,
    pub cost_trace: Vec<f64>,
    /// Execution step at which a sequential replan failed, if any.
    pub failure_step: Option<usize>,
}

/// Runs one joint solve: build the graph, optimize from the prior mean,
/// densify, and evaluate all metrics.
pub fn run_joint(scenario: &Scenario, config: &SolverConfig) -> Result<RunResult, ScenarioError> {
    let started = Instant::now();
    let graph = build_graph(scenario, config)?;
    let x0 = graph.prior_mean_trajectory();
    let (x_star, stats) = graph.optimize(&x0, config)?;
    let solve_time_ms = started.elapsed().as_secs_f64() * 1e3;

    let model = ConstantVelocityModel::isotropic(2, config.qc).expect("qc validated");
    let trajectories: Vec<DenseTrajectory> = x_star
        .agents
        .iter()
        .map(|t| densify(&model, t, config.n_p))
        .collect();
    let radii: Vec<f64> = scenario.agents.iter().map(|a| a.radius).collect();
    let report = check_collision_free(&trajectories, graph.sdf(), &radii);
    let goal_errors: Vec<f64> = scenario
        .agents
        .iter()
        .zip(&trajectories)
        .map(|(a, t)| {
            let last = t.states.last().unwrap();
            ((last[0] - a.goal[0]).powi(2) + (last[1] - a.goal[1]).powi(2)).sqrt()
        })
        .collect();
    let smoothness_cost = graph.smoothness_cost(&x_star);
    let success = report.collision_free && goal_errors.iter().all(|&e| e <= GOAL_TOLERANCE);
    Ok(RunResult {
        success,
        trajectories,
        min_inter_clearance: report.min_inter_clearance,
        min_static_clearance: report.min_static_clearance,
        goal_errors,
        solve_time_ms,
        iterations: stats.iterations,
        smoothness_cost,
        cost_trace: stats.cost_trace,
        failure_step: None,
    })
}

/// Base grid used by the baseline when the scenario has no environment: an
/// all-free grid covering the agents' bounding box with margin.
fn baseline_grid(scenario: &Scenario) -> OccupancyGrid {
    const CELL: f64 = 0.2;
    let r_max = scenario
        .agents
        .iter()
        .map(|a| a.radius)
        .fold(0.0f64, f64::max);
    let margin = scenario.eps_obs + 3.0 * r_max + 2.0;
    let mut min = Point2::new(f64::INFINITY, f64::INFINITY);
    let mut max = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for a in &scenario.agents {
        for p in [a.start, a.goal] {
            min.x = min.x.min(p[0]);
            min.y = min.y.min(p[1]);
            max.x = max.x.max(p[0]);
            max.y = max.y.max(p[1]);
        }
    }
    let origin = Point2::new(min.x - margin, min.y - margin);
    let width = ((max.x + margin - origin.x) / CELL).ceil() as usize + 1;
    let height = ((max.y + margin - origin.y) / CELL).ceil() as usize + 1;
    OccupancyGrid::free(origin, CELL, width, height)
}

/// Simulates per-agent replanning: at every knot time each agent plans its full
/// remaining trajectory against an SDF containing the other agents' current
/// positions as discs, then everyone advances one knot.
///
/// Wall time aggregates the full replanning work (SDF recompute, graph build,
/// solve) over all steps and agents.
pub fn run_sequential_baseline(
    scenario: &Scenario,
    config: &SolverConfig,
) -> Result<RunResult, ScenarioError> {
    scenario.validate()?;
    let n_agents = scenario.n_agents();
    let n = scenario.num_intervals;
    let dt = scenario.t_total / n as f64;
    let base_grid = match &scenario.environment {
        Some(g) => g.clone(),
        None => baseline_grid(scenario),
    };
    let radii: Vec<f64> = scenario.agents.iter().map(|a| a.radius).collect();
    let model = ConstantVelocityModel::isotropic(2, config.qc).expect("qc validated");

    // initial plans: the same initializer the joint method uses
    let mut plans = build_initialization(scenario)?;
    // executed states, one per knot time, per agent
    let mut executed: Vec<Vec<DVector<f64>>> =
        plans.iter().map(|p| vec![p.states[0].clone()]).collect();
    // dense executed segments for collision checking
    let mut executed_dense: Vec<Vec<DenseTrajectory>> = vec![Vec::new(); n_agents];

    let mut total_ms = 0.0;
    let mut iterations = 0usize;
    let mut failure_step = None;
    let mut cost_trace = Vec::new();

    'steps: for step in 0..n {
        let remaining = n - step;
        let t0 = step as f64 * dt;
        let positions: Vec<Point2> = executed
            .iter()
            .map(|e| Point2::new(e[step][0], e[step][1]))
            .collect();
        for agent in 0..n_agents {
            let replan_start = Instant::now();
            let discs: Vec<(Point2, f64)> = (0..n_agents)
                .filter(|&j| j != agent)
                .map(|j| (positions[j], radii[j]))
                .collect();
            let grid = base_grid.with_discs(&discs);
            let current = executed[agent][step].clone();
            let goal = Point2::new(
                scenario.agents[agent].goal[0],
                scenario.agents[agent].goal[1],
            );
            // fresh straight-line initialization from the current state
            let mean = line_trajectory(
                Point2::new(current[0], current[1]),
                goal,
                remaining,
                t0,
                scenario.t_total,
            );
            let result = FactorGraph::single_agent_replan(
                config,
                radii[agent],
                &grid,
                mean,
                current.clone(),
            )
            .and_then(|graph| {
                let x0 = graph.prior_mean_trajectory();
                graph.optimize(&x0, config)
            });
            total_ms += replan_start.elapsed().as_secs_f64() * 1e3;
            match result {
                Ok((x_star, stats)) => {
                    iterations += stats.iterations;
                    cost_trace = stats.cost_trace;
                    plans[agent] = x_star.agents.into_iter().next().unwrap();
                }
                Err(_) => {
                    failure_step = Some(step);
                    break 'steps;
                }
            }
        }
        // synchronous advance: everyone moves one knot along its current plan
        for (agent, plan) in plans.iter().enumerate() {
            let seg = densify_interval(&model, plan, 0, config.n_p);
            executed_dense[agent].push(seg);
            executed[agent].push(plan.states[1].clone());
        }
    }

    // assemble executed dense trajectories
    let trajectories: Vec<DenseTrajectory> = (0..n_agents)
        .map(|agent| {
            let mut times = Vec::new();
            let mut states = Vec::new();
            for (k, seg) in executed_dense[agent].iter().enumerate() {
                let offset = k as f64 * dt;
                for (i, t) in seg.times.iter().enumerate() {
                    times.push(offset + t);
                    states.push(seg.states[i]);
                }
            }
            let last = executed[agent].last().unwrap();
            times.push(executed[agent].len() as f64 * dt - dt);
            states.push([last[0], last[1], last[2], last[3]]);
            DenseTrajectory { times, states }
        })
        .collect();

    let sdf_for_check = scenario
        .environment
        .as_ref()
        .map(SignedDistanceField::compute);
    let report = check_collision_free(&trajectories, sdf_for_check.as_ref(), &radii);
    let goal_errors: Vec<f64> = scenario
        .agents
        .iter()
        .zip(&trajectories)
        .map(|(a, t)| {
            let last = t.states.last().unwrap();
            ((last[0] - a.goal[0]).powi(2) + (last[1] - a.goal[1]).powi(2)).sqrt()
        })
        .collect();
    let reached = failure_step.is_none() && executed[0].len() == n + 1;
    let success =
        reached && report.collision_free && goal_errors.iter().all(|&e| e <= GOAL_TOLERANCE);

    // smoothness of the executed knots, measured against the same prior mean
    // the joint method uses
    let smoothness_cost = executed_smoothness(scenario, config, &executed)?;

    Ok(RunResult {
        success,
        trajectories,
        min_inter_clearance: report.min_inter_clearance,
        min_static_clearance: report.min_static_clearance,
        goal_errors,
        solve_time_ms: total_ms,
        iterations,
        smoothness_cost,
        cost_trace,
        failure_step,
    })
}

/// Densifies one interval of a plan: the left knot plus `per_interval`
/// interpolated states (the right knot belongs to the next segment).
fn densify_interval(
    model: &ConstantVelocityModel,
    plan: &SupportTrajectory,
    interval: usize,
    per_interval: usize,
) -> DenseTrajectory {
    let dt = plan.dt();
    let mut times = vec![0.0];
    let mut states = vec![[
        plan.states[interval][0],
        plan.states[interval][1],
        plan.states[interval][2],
        plan.states[interval][3],
    ]];
    for k in 1..=per_interval {
        let tau = dt * k as f64 / (per_interval + 1) as f64;
        let c = model.interp_coeffs(dt, tau).expect("tau inside interval");
        let x =
            crate::factors::interp_state(&plan.states[interval], &plan.states[interval + 1], &c);
        times.push(tau);
        states.push([x[0], x[1], x[2], x[3]]);
    }
    DenseTrajectory { times, states }
}

/// GP-prior quadratic of the executed knots against the joint initialization,
/// so both methods report smoothness in the same measure.
fn executed_smoothness(
    scenario: &Scenario,
    config: &SolverConfig,
    executed: &[Vec<DVector<f64>>],
) -> Result<f64, ScenarioError> {
    if executed
        .iter()
        .any(|e| e.len() != scenario.num_intervals + 1)
    {
        return Ok(f64::NAN);
    }
    let graph = build_graph(scenario, config)?;
    let trajs: Vec<SupportTrajectory> = executed
        .iter()
        .map(|states| SupportTrajectory::new(0.0, scenario.t_total, states.clone()).unwrap())
        .collect();
    let joint = JointTrajectory { agents: trajs };
    Ok(graph.smoothness_cost(&joint))
}

// ---------------------------------------------------------------------------
// formation benchmark
// ---------------------------------------------------------------------------

/// Canonical formation slots: a triangle for 3 and 5 agents (vertices plus two
/// edge midpoints), a square for 4, circumradius 10 m, centered at the origin.
pub fn formation_slots(n: usize) -> Vec<[f64; 2]> {
    let r = 10.0;
    let at = |deg: f64| {
        let a = deg.to_radians();
        [r * a.cos(), r * a.sin()]
    };
    let tri = vec![at(90.0), at(210.0), at(330.0)];
    match n {
        3 => tri,
        4 => vec![at(45.0), at(135.0), at(225.0), at(315.0)],
        5 => {
            let mut slots = tri.clone();
            slots.push([(tri[0][0] + tri[1][0]) / 2.0, (tri[0][1] + tri[1][1]) / 2.0]);
            slots.push([(tri[1][0] + tri[2][0]) / 2.0, (tri[1][1] + tri[2][1]) / 2.0]);
            slots
        }
        _ => panic!("formations are defined for 3, 4 or 5 agents"),
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    // lexicographic order, identity first
    let mut result = Vec::new();
    let mut current: Vec<usize> = (0..n).collect();
    loop {
        result.push(current.clone());
        // next_permutation
        let Some(i) = (0..n - 1).rev().find(|&i| current[i] < current[i + 1]) else {
            break;
        };
        let j = (i + 1..n).rev().find(|&j| current[j] > current[i]).unwrap();
        current.swap(i, j);
        current[i + 1..].reverse();
    }
    result
}

/// One scenario per permutation of goal slots within the `n`-agent formation,
/// in lexicographic order (identity first), with the benchmark parameters.
pub fn formation_permutations(n: usize) -> Vec<Scenario> {
    assert!(
        matches!(n, 3 | 4 | 5),
        "formations are defined for 3, 4 or 5 agents"
    );
    let slots = formation_slots(n);
    permutations(n)
        .into_iter()
        .map(|perm| Scenario {
            agents: (0..n)
                .map(|i| AgentSpec {
                    start: slots[i],
                    goal: slots[perm[i]],
                    radius: 1.0,
                })
                .collect(),
            map: None,
            environment: None,
            t_total: 10.0,
            num_intervals: 9,
            n_p: 9,
            eps_obs: 2.0,
            sigma_obs: 0.3,
            eps_mul: 15.0,
            sigma_mul: 0.7,
            qc: 1.0,
            init: InitMode::Line,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// hallway scenario
// ---------------------------------------------------------------------------

/// Builds the two-room map: 10 m x 10 m rooms joined by a 12 m long, 3.6 m wide
/// corridor, fine cells of 0.2 m, solid walls everywhere else.
pub fn hallway_grid() -> OccupancyGrid {
    let cell = 0.2;
    let origin = Point2::new(-0.4, -0.4);
    let width = 164; // covers x in [-0.4, 32.4]
    let height = 54; // covers y in [-0.4, 10.4]
    let mut grid = OccupancyGrid::free(origin, cell, width, height);
    let free = |x: f64, y: f64| -> bool {
        let in_left = (0.0..=10.0).contains(&x) && (0.0..=10.0).contains(&y);
        let in_right = (22.0..=32.0).contains(&x) && (0.0..=10.0).contains(&y);
        let in_corridor = (10.0..=22.0).contains(&x) && (3.2..=6.8).contains(&y);
        in_left || in_right || in_corridor
    };
    for r in 0..height {
        for c in 0..width {
            let p = grid.cell_center(r, c);
            if !free(p.x, p.y) {
                grid.set_occupied(r, c, true);
            }
        }
    }
    grid
}

/// Two agents swapping rooms through a corridor too narrow to pass abreast;
/// A*-seeded initialization.
pub fn hallway_scenario() -> Scenario {
    Scenario {
        agents: vec![
            AgentSpec {
                start: [5.0, 5.0],
                goal: [27.0, 5.0],
                radius: 1.0,
            },
            AgentSpec {
                start: [27.0, 5.0],
                goal: [5.0, 5.0],
                radius: 1.0,
            },
        ],
        map: None,
        environment: Some(hallway_grid()),
        t_total: 20.0,
        num_intervals: 19,
        n_p: 9,
        eps_obs: 2.0,
        sigma_obs: 0.3,
        eps_mul: 15.0,
        sigma_mul: 0.7,
        qc: 1.0,
        init: InitMode::Astar,
    }
}

// ---------------------------------------------------------------------------
// benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "joint")]
    Joint,
    #[serde(rename = "sequential")]
    Sequential,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Joint => write!(f, "joint"),
            Method::Sequential => write!(f, "sequential"),
        }
    }
}

/// Slim per-problem record kept in the benchmark index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub n_agents: usize,
    pub problem_id: usize,
    pub method: Method,
    pub success: bool,
    pub solve_time_ms: f64,
    pub iterations: usize,
    pub min_inter_clearance: Option<f64>,
    pub max_goal_error: f64,
    pub smoothness_cost: f64,
    pub cost_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub n_agents: usize,
    pub method: Method,
    pub problems: usize,
    pub success_pct: f64,
    pub mean_time_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub index: Vec<ProblemRecord>,
}

impl BenchmarkReport {
    pub fn row(&self, n_agents: usize, method: Method) -> Option<&BenchmarkRow> {
        self.rows
            .iter()
            .find(|r| r.n_agents == n_agents && r.method == method)
    }

    /// Fixed-width text table, one row per formation size.
    pub fn to_table(&self, methods: &[Method]) -> String {
        let mut s = String::new();
        s.push_str("robots");
        for m in methods {
            s.push_str(&format!("  {:>18}", format!("{m} succ %")));
            s.push_str(&format!("  {:>18}", format!("{m} mean ms")));
        }
        s.push('\n');
        let mut ns: Vec<usize> = self.rows.iter().map(|r| r.n_agents).collect();
        ns.sort_unstable();
        ns.dedup();
        for n in ns {
            s.push_str(&format!("{n:>6}"));
            for m in methods {
                if let Some(row) = self.row(n, *m) {
                    s.push_str(&format!("  {:>18.1}", row.success_pct));
                    s.push_str(&format!("  {:>18.1}", row.mean_time_ms));
                } else {
                    s.push_str(&format!("  {:>18}  {:>18}", "-", "-"));
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Runs every formation permutation under every requested method; individual
/// failures are recorded, never fatal.
pub fn benchmark(ns: &[usize], methods: &[Method], parallel: bool) -> BenchmarkReport {
    let mut jobs = Vec::new();
    for &n in ns {
        for (pid, sc) in formation_permutations(n).into_iter().enumerate() {
            for &m in methods {
                jobs.push((n, pid, m, sc.clone()));
            }
        }
    }
    let run_one = |(n, pid, m, sc): &(usize, usize, Method, Scenario)| -> ProblemRecord {
        let config = SolverConfig::from_scenario(sc);
        let outcome = match m {
            Method::Joint => run_joint(sc, &config),
            Method::Sequential => run_sequential_baseline(sc, &config),
        };
        match outcome {
            Ok(r) => ProblemRecord {
                n_agents: *n,
                problem_id: *pid,
                method: *m,
                success: r.success,
                solve_time_ms: r.solve_time_ms,
                iterations: r.iterations,
                min_inter_clearance: r.min_inter_clearance,
                max_goal_error: r.goal_errors.iter().cloned().fold(0.0, f64::max),
                smoothness_cost: r.smoothness_cost,
                cost_trace: r.cost_trace,
            },
            Err(_) => ProblemRecord {
                n_agents: *n,
                problem_id: *pid,
                method: *m,
                success: false,
                solve_time_ms: 0.0,
                iterations: 0,
                min_inter_clearance: None,
                max_goal_error: f64::NAN,
                smoothness_cost: f64::NAN,
                cost_trace: Vec::new(),
            },
        }
    };
    let index: Vec<ProblemRecord> = if parallel {
        jobs.par_iter().map(run_one).collect()
    } else {
        jobs.iter().map(run_one).collect()
    };

    let mut rows = Vec::new();
    let mut ns_sorted = ns.to_vec();
    ns_sorted.sort_unstable();
    for &n in &ns_sorted {
        for &m in methods {
            let recs: Vec<&ProblemRecord> = index
                .iter()
                .filter(|r| r.n_agents == n && r.method == m)
                .collect();
            if recs.is_empty() {
                continue;
            }
            let successes = recs.iter().filter(|r| r.success).count();
            let mean_time = recs.iter().map(|r| r.solve_time_ms).sum::<f64>() / recs.len() as f64;
            rows.push(BenchmarkRow {
                n_agents: n,
                method: m,
                problems: recs.len(),
                success_pct: 100.0 * successes as f64 / recs.len() as f64,
                mean_time_ms: mean_time,
            });
        }
    }
    BenchmarkReport { rows, index }
}
