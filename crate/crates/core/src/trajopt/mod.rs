//! Time/energy-optimal trajectory generation by direct collocation.
//!
//! The optimal control problem minimizes the hybrid cost
//!
//! ```text
//! J(u, T) = (1 - eps) * T + eps * integral ||u(t)||^2 dt
//! ```
//!
//! over rotor commands `u(t)` in `[0,1]^4` and the free final time `T`,
//! subject to the quadcopter dynamics, an initial state, terminal conditions
//! (position, heading, optional velocity-direction/rest conditions, and zero
//! body-rate acceleration), and optionally a spherical intermediate waypoint
//! constraint. `eps = 0` gives pure time-optimal flight with bang-bang rotor
//! profiles; `eps = 1` gives smooth energy-conscious trajectories.
//!
//! The transcription is separated Hermite-Simpson collocation with explicit
//! midpoint control variables: on each of the `N` uniform segments of width
//! `h = T/N`, the defect
//!
//! ```text
//! x_{k+1} - x_k - h/6 (f_k + 4 f_c + f_{k+1}) = 0,
//! x_c = (x_k + x_{k+1})/2 + h/8 (f_k - f_{k+1}),
//! ```
//!
//! is enforced, the free final time enters through a single dilation variable,
//! and the resulting sparse NLP is solved by the built-in interior-point
//! method ([`nlp`]) with exact first and second derivatives from the forward
//! AD types in [`crate::ad`] and a banded-plus-arrow factorization
//! ([`band`]). Node-doubling refinement re-solves on progressively finer
//! grids warm-started from quadratic interpolants of the coarse solution.

mod band;
mod nlp;
mod transcription;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    state_derivative, ControlInput, DynamicsError, ModelParams, QuadState, STATE_DIM,
};
use transcription::{Guess, Transcription};

/// Hard bounds on the free final time, seconds.
pub const TIME_BOUNDS: (f64, f64) = (0.1, 20.0);
/// Largest per-component collocation defect accepted in a converged solution,
/// in the natural unit of each state row.
pub const DEFECT_TOLERANCE: f64 = 1e-6;
/// First-order stationarity tolerance of the solver.
pub const STATIONARITY_TOLERANCE: f64 = 1e-5;
/// Iteration cap for a single solve.
pub const MAX_ITERATIONS: usize = 500;

/// Errors from problem validation, solving, and refinement.
#[derive(Debug, Error)]
pub enum TrajoptError {
    /// The problem description violates an invariant or is contradictory.
    #[error("invalid problem: {reason}")]
    InvalidSpec { reason: String },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    /// The solver stopped without meeting the convergence tolerances.
    #[error(
        "no convergence after {iterations} iterations \
         (stationarity {stationarity:.3e}, feasibility {feasibility:.3e}, \
         complementarity {complementarity:.3e})"
    )]
    NotConverged {
        iterations: usize,
        stationarity: f64,
        feasibility: f64,
        complementarity: f64,
    },
    /// A refinement stage failed; `segments` is the grid size at failure.
    #[error("refinement to {segments} segments failed: {source}")]
    Refinement {
        segments: usize,
        #[source]
        source: Box<TrajoptError>,
    },
    #[error("refinement target {requested} is not {current} segments doubled k >= 1 times")]
    InvalidRefinementTarget { current: usize, requested: usize },
}

/// Terminal velocity requirement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityCondition {
    /// Final velocity unconstrained.
    Free,
    /// Final velocity points along the final heading with free forward
    /// magnitude: `v_f = m (cos psi_f, sin psi_f, 0)`, `m >= 0`.
    ForwardAlongHeading,
    /// Final velocity fixed to the given vector.
    Fixed(Vector3<f64>),
}

/// Boundary conditions at the final node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalConditions {
    /// Target position, m.
    pub position: Vector3<f64>,
    /// Final heading, rad (unwrapped).
    pub heading: f64,
    pub velocity: VelocityCondition,
    /// Require `Omega_f = 0`.
    pub zero_body_rates: bool,
    /// Require `Omega_dot_f = 0`, imposed algebraically at `(x_N, u_N)`.
    pub zero_body_rate_accel: bool,
    /// Require `phi_f = theta_f = 0` (level attitude).
    pub zero_attitude: bool,
}

impl FinalConditions {
    /// Forward flight through the target: velocity aligned with the heading,
    /// zero body rates and body-rate acceleration, attitude free.
    pub fn forward_flight(position: Vector3<f64>, heading: f64) -> Self {
        Self {
            position,
            heading,
            velocity: VelocityCondition::ForwardAlongHeading,
            zero_body_rates: true,
            zero_body_rate_accel: true,
            zero_attitude: false,
        }
    }

    /// Complete stop at the target: zero velocity, level attitude, zero body
    /// rates and body-rate acceleration.
    pub fn rest_at(position: Vector3<f64>, heading: f64) -> Self {
        Self {
            position,
            heading,
            velocity: VelocityCondition::Fixed(Vector3::zeros()),
            zero_body_rates: true,
            zero_body_rate_accel: true,
            zero_attitude: true,
        }
    }
}

/// Spherical pass-through constraint at one interior node: the sum of the
/// squared position deviation (m^2) and squared heading deviation (rad^2)
/// must not exceed `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntermediateWaypoint {
    /// Sphere center, m.
    pub position: Vector3<f64>,
    /// Desired heading at passage, rad (unwrapped difference).
    pub heading: f64,
    /// Bound on the mixed squared-deviation sum.
    pub threshold: f64,
    /// Node index the constraint is attached to. When `None`, the solver
    /// picks the initial-guess node closest to `position` and records it in
    /// the solved trajectory's spec.
    pub node: Option<usize>,
}

/// Full description of one optimal control problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpSpec {
    /// Cost blend in `[0, 1]`: 0 = pure time, 1 = pure control energy.
    pub epsilon: f64,
    /// Initial state.
    pub x0: QuadState,
    pub final_conditions: FinalConditions,
    pub params: ModelParams,
    /// Constant external moment disturbance over the whole trajectory, N m.
    pub m_ext: Vector3<f64>,
    pub intermediate: Option<IntermediateWaypoint>,
    /// Segment count N (N+1 nodes).
    pub n_segments: usize,
    /// Optional cap on the free final time, s. Useful for pure-energy
    /// problems, whose cost is otherwise indifferent to arbitrarily slow
    /// low-throttle arcs.
    #[serde(default)]
    pub t_max: Option<f64>,
}

impl OcpSpec {
    /// Checks invariants: blend weight range, segment count, initial-state
    /// validity, and boundary values inside the variable bounds.
    pub fn validate(&self) -> Result<(), TrajoptError> {
        let bad = |reason: String| Err(TrajoptError::InvalidSpec { reason });
        if !(0.0..=1.0).contains(&self.epsilon) || !self.epsilon.is_finite() {
            return bad(format!("epsilon {} outside [0, 1]", self.epsilon));
        }
        if self.n_segments < 10 {
            return bad(format!("n_segments {} below the minimum of 10", self.n_segments));
        }
        self.params.validate()?;
        if self.x0.attitude[1].abs() >= std::f64::consts::FRAC_PI_2 {
            return bad(format!(
                "initial pitch {} rad is outside the attitude-validity range",
                self.x0.attitude[1]
            ));
        }
        let fc = &self.final_conditions;
        if fc.position.amax() > transcription::POSITION_BOUND {
            return bad(format!(
                "target position {:?} outside the +/-{} m box",
                fc.position,
                transcription::POSITION_BOUND
            ));
        }
        if fc.heading.abs() > transcription::HEADING_BOUND {
            return bad(format!("final heading {} rad outside solver bounds", fc.heading));
        }
        if let VelocityCondition::Fixed(v) = fc.velocity {
            if v.amax() > transcription::VELOCITY_BOUND {
                return bad(format!("fixed final velocity {v:?} outside solver bounds"));
            }
        }
        if let Some(t_max) = self.t_max {
            if !(t_max > TIME_BOUNDS.0) || !t_max.is_finite() {
                return bad(format!(
                    "t_max {t_max} must be a finite duration above {} s",
                    TIME_BOUNDS.0
                ));
            }
        }
        if let Some(wp) = &self.intermediate {
            if !(wp.threshold > 0.0) {
                return bad(format!("waypoint threshold {} must be positive", wp.threshold));
            }
            if wp.position.amax() > transcription::POSITION_BOUND {
                return bad("waypoint position outside solver bounds".to_string());
            }
            if let Some(node) = wp.node {
                if node == 0 || node >= self.n_segments {
                    return bad(format!(
                        "waypoint node {node} must be an interior node (1..{})",
                        self.n_segments
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Convergence diagnostics attached to a solved trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// Objective value at the solution.
    pub objective: f64,
    /// Scaled first-order stationarity measure at the solution.
    pub stationarity: f64,
    pub complementarity: f64,
    /// Largest collocation defect component, natural units.
    pub max_defect: f64,
    /// Largest terminal-condition residual, natural units.
    pub boundary_residual: f64,
    /// Excess of the waypoint constraint over its threshold, if one was set.
    pub waypoint_residual: Option<f64>,
}

/// A discretized trajectory: `N+1` node states/controls plus per-segment
/// midpoint controls on a uniform grid over `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// Node times `0 = t_0 < ... < t_N = T`, s.
    pub times: Vec<f64>,
    pub states: Vec<QuadState>,
    pub controls: Vec<ControlInput>,
    /// One midpoint control per segment.
    pub midpoint_controls: Vec<ControlInput>,
    /// Final time, s.
    pub final_time: f64,
    /// Objective value reported by the solver.
    pub cost: f64,
    /// The problem this trajectory solves (waypoint node resolved).
    pub spec: OcpSpec,
    pub solve: SolveReport,
}

impl Trajectory {
    pub fn n_segments(&self) -> usize {
        self.times.len() - 1
    }
}

/// Feasibility audit of a trajectory against its own spec.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    /// Largest collocation defect component, natural units (infinite when a
    /// node state is dynamically invalid).
    pub max_defect: f64,
    /// Largest terminal-condition residual, natural units.
    pub boundary_residual: f64,
    /// Largest excursion of any control sample outside `[0, 1]`.
    pub control_bound_violation: f64,
    /// Excess of the waypoint constraint over its threshold, if one was set.
    pub intermediate_residual: Option<f64>,
    /// Share of nodes where at least one rotor command is within 1% of a
    /// bound.
    pub saturation_fraction: f64,
}

/// Hybrid cost of a trajectory under blend weight `epsilon`, using the same
/// Simpson quadrature as the transcription:
/// `(1-eps) T + eps sum_k h/6 (||u_k||^2 + 4 ||u_ck||^2 + ||u_{k+1}||^2)`.
pub fn evaluate_cost(traj: &Trajectory, epsilon: f64) -> f64 {
    let mut energy = 0.0;
    for k in 0..traj.n_segments() {
        let h = traj.times[k + 1] - traj.times[k];
        let n0 = traj.controls[k].0.norm_squared();
        let nc = traj.midpoint_controls[k].0.norm_squared();
        let n1 = traj.controls[k + 1].0.norm_squared();
        energy += h / 6.0 * (n0 + 4.0 * nc + n1);
    }
    (1.0 - epsilon) * traj.final_time + epsilon * energy
}

/// Hermite-Simpson defects of an arbitrary state sequence under an arbitrary
/// derivative function; one vector per segment.
///
/// For each segment of width `h`, the defect is
/// `x_{k+1} - x_k - h/6 (f_k + 4 f_c + f_{k+1})` with the collocation state
/// `x_c = (x_k + x_{k+1})/2 + h/8 (f_k - f_{k+1})` evaluated at the segment's
/// midpoint control. Exact for solutions whose states are polynomials of
/// degree <= 3 in time.
///
/// # Panics
/// Panics when the slice lengths are inconsistent (`states` and `controls`
/// one longer than `midpoint_controls`, matching `times`).
pub fn collocation_defects_with<E>(
    times: &[f64],
    states: &[Vec<f64>],
    controls: &[Vec<f64>],
    midpoint_controls: &[Vec<f64>],
    mut derivative: impl FnMut(&[f64], &[f64]) -> Result<Vec<f64>, E>,
) -> Result<Vec<Vec<f64>>, E> {
    let n = times.len() - 1;
    assert_eq!(states.len(), n + 1, "one state per node");
    assert_eq!(controls.len(), n + 1, "one control per node");
    assert_eq!(midpoint_controls.len(), n, "one midpoint control per segment");
    let mut defects = Vec::with_capacity(n);
    let mut f_nodes = Vec::with_capacity(n + 1);
    for k in 0..=n {
        f_nodes.push(derivative(&states[k], &controls[k])?);
    }
    for k in 0..n {
        let h = times[k + 1] - times[k];
        let dim = states[k].len();
        let mut xc = vec![0.0; dim];
        for i in 0..dim {
            xc[i] = 0.5 * (states[k][i] + states[k + 1][i])
                + h / 8.0 * (f_nodes[k][i] - f_nodes[k + 1][i]);
        }
        let fc = derivative(&xc, &midpoint_controls[k])?;
        let mut d = vec![0.0; dim];
        for i in 0..dim {
            d[i] = states[k + 1][i]
                - states[k][i]
                - h / 6.0 * (f_nodes[k][i] + 4.0 * fc[i] + f_nodes[k + 1][i]);
        }
        defects.push(d);
    }
    Ok(defects)
}

/// Collocation defects of a quadcopter trajectory, one 19-vector per segment
/// in natural state units.
pub fn hermite_simpson_defects(
    traj: &Trajectory,
    params: &ModelParams,
) -> Result<Vec<[f64; STATE_DIM]>, DynamicsError> {
    let states: Vec<Vec<f64>> = traj.states.iter().map(|s| s.as_array().to_vec()).collect();
    let controls: Vec<Vec<f64>> = traj.controls.iter().map(|c| c.as_array().to_vec()).collect();
    let mids: Vec<Vec<f64>> =
        traj.midpoint_controls.iter().map(|c| c.as_array().to_vec()).collect();
    let defects = collocation_defects_with(&traj.times, &states, &controls, &mids, |x, u| {
        let state = QuadState::from_array(x.try_into().expect("19 state components"));
        let control = ControlInput::from_array(u.try_into().expect("4 control components"));
        state_derivative(&state, &control, params).map(|d| d.to_vec())
    })?;
    Ok(defects
        .into_iter()
        .map(|d| {
            let arr: [f64; STATE_DIM] = d.try_into().expect("19 defect components");
            arr
        })
        .collect())
}

/// Largest terminal-condition residual of a trajectory, natural units.
fn boundary_residual(traj: &Trajectory) -> f64 {
    let fc = &traj.spec.final_conditions;
    let xn = traj.states.last().expect("nonempty trajectory");
    let un = traj.controls.last().expect("nonempty trajectory");
    let mut r = (xn.position - fc.position).amax();
    r = r.max((xn.attitude[2] - fc.heading).abs());
    match fc.velocity {
        VelocityCondition::Free => {}
        VelocityCondition::Fixed(v) => r = r.max((xn.velocity - v).amax()),
        VelocityCondition::ForwardAlongHeading => {
            let (s, c) = fc.heading.sin_cos();
            r = r.max((-xn.velocity[0] * s + xn.velocity[1] * c).abs());
            r = r.max(xn.velocity[2].abs());
            r = r.max((-(xn.velocity[0] * c + xn.velocity[1] * s)).max(0.0));
        }
    }
    if fc.zero_body_rates {
        r = r.max(xn.body_rates.amax());
    }
    if fc.zero_attitude {
        r = r.max(xn.attitude[0].abs()).max(xn.attitude[1].abs());
    }
    if fc.zero_body_rate_accel {
        match state_derivative(xn, un, &traj.spec.params) {
            Ok(d) => r = r.max(d[9].abs()).max(d[10].abs()).max(d[11].abs()),
            Err(_) => r = f64::INFINITY,
        }
    }
    r
}

/// Waypoint constraint excess (zero when satisfied) at the recorded node, or
/// at the best interior node when none is recorded.
fn waypoint_residual(traj: &Trajectory) -> Option<f64> {
    let wp = traj.spec.intermediate.as_ref()?;
    let residual_at = |k: usize| {
        let s = &traj.states[k];
        (s.position - wp.position).norm_squared() + (s.attitude[2] - wp.heading).powi(2)
    };
    let n = traj.n_segments();
    let value = match wp.node {
        Some(k) if k < traj.states.len() => residual_at(k),
        _ => (1..n).map(residual_at).fold(f64::INFINITY, f64::min),
    };
    Some((value - wp.threshold).max(0.0))
}

/// Audits a trajectory against its spec: defects, boundary residuals, control
/// bounds, the waypoint constraint, and the control saturation fraction.
pub fn audit_solution(traj: &Trajectory) -> FeasibilityReport {
    let max_defect = match hermite_simpson_defects(traj, &traj.spec.params) {
        Ok(defects) => defects
            .iter()
            .flat_map(|d| d.iter())
            .fold(0.0f64, |a, &v| a.max(v.abs())),
        Err(_) => f64::INFINITY,
    };
    let control_bound_violation = traj
        .controls
        .iter()
        .chain(traj.midpoint_controls.iter())
        .map(|c| c.bound_violation())
        .fold(0.0f64, f64::max);
    let saturated = traj
        .controls
        .iter()
        .filter(|c| c.as_array().iter().any(|&u| u <= 0.01 || u >= 0.99))
        .count();
    FeasibilityReport {
        max_defect,
        boundary_residual: boundary_residual(traj),
        control_bound_violation,
        intermediate_residual: waypoint_residual(traj),
        saturation_fraction: saturated as f64 / traj.controls.len() as f64,
    }
}

/// Default initialization: positions and velocities interpolated linearly
/// from the initial state to the target, constant level attitude at the mean
/// of initial and final heading, hover rotor speeds and throttle, and
/// `T = distance / 3 m/s` clamped to `[0.5, 5]` s.
/// Stabilizing throttle mix used only to build rollout guesses: hover
/// collective plus vertical-rate damping, rate/attitude damping through the
/// rotor moment signs, and mild yaw-rate damping.
fn damping_law(state: &QuadState, params: &ModelParams) -> ControlInput {
    let hover = params.hover_throttle();
    let collective = hover + 0.05 * state.velocity[2];
    let a_roll = -0.012 * state.body_rates[0] - 0.02 * state.attitude[0];
    let a_pitch = -0.012 * state.body_rates[1] - 0.02 * state.attitude[1];
    let a_yaw = -0.05 * state.body_rates[2];
    const S_ROLL: [f64; 4] = [1.0, -1.0, -1.0, 1.0];
    const S_PITCH: [f64; 4] = [1.0, 1.0, -1.0, -1.0];
    const S_YAW: [f64; 4] = [-1.0, 1.0, -1.0, 1.0];
    ControlInput::from_array(&std::array::from_fn(|i| {
        (collective + S_ROLL[i] * a_roll + S_PITCH[i] * a_pitch + S_YAW[i] * a_yaw)
            .clamp(0.02, 0.98)
    }))
}

/// Checks a rollout state against comfortable margins inside the solver's
/// variable bounds.
fn rollout_in_box(state: &QuadState) -> bool {
    state.position.amax() < 0.9 * transcription::POSITION_BOUND
        && state.velocity.amax() < 0.9 * transcription::VELOCITY_BOUND
        && state.attitude[0].abs() < 0.95 * transcription::TILT_BOUND
        && state.attitude[1].abs() < 0.95 * transcription::TILT_BOUND
        && state.attitude[2].abs() < 0.9 * transcription::HEADING_BOUND
        && state.body_rates.amax() < 0.9 * transcription::RATE_BOUND
}

/// Straight-line path length from the initial position to the target,
/// detouring through the intermediate waypoint when one is set.
fn guess_path_length(spec: &OcpSpec) -> f64 {
    match &spec.intermediate {
        Some(wp) => {
            (wp.position - spec.x0.position).norm()
                + (spec.final_conditions.position - wp.position).norm()
        }
        None => (spec.final_conditions.position - spec.x0.position).norm(),
    }
}

/// Heuristic duration for initial guesses, kept inside the admissible range.
fn guess_time(spec: &OcpSpec) -> f64 {
    let hi = spec.t_max.map_or(TIME_BOUNDS.1, |t| t.min(TIME_BOUNDS.1));
    (guess_path_length(spec) / 3.0).clamp(0.5, 5.0).clamp(TIME_BOUNDS.0, 0.9 * hi)
}

/// Share of the two-leg path length covered by the leg from the initial
/// position to the intermediate waypoint.
fn waypoint_fraction(spec: &OcpSpec, wp_position: &Vector3<f64>) -> f64 {
    let leg0 = (wp_position - spec.x0.position).norm();
    let leg1 = (spec.final_conditions.position - wp_position).norm();
    if leg0 + leg1 > 0.0 {
        (leg0 / (leg0 + leg1)).clamp(0.05, 0.95)
    } else {
        0.5
    }
}

/// Dynamically consistent initial guess: integrates the model from the
/// initial state under [`damping_law`], so collocation defects start near
/// zero and only the boundary conditions carry residual. If the rollout
/// leaves the solver's variable box or hits a singularity it freezes at the
/// last good state.
fn rollout_guess(spec: &OcpSpec) -> Guess {
    let n = spec.n_segments;
    let params = &spec.params;
    let t = guess_time(spec);
    let h = t / n as f64;
    let substeps = ((h / 0.01).ceil() as usize).max(2);
    let dt = h / substeps as f64;

    let mut x = spec.x0;
    x.moment_disturbance = spec.m_ext;
    let mut states = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n + 1);
    let mut midpoints = Vec::with_capacity(n);
    states.push(x.as_array());
    controls.push(damping_law(&x, params).as_array());
    let mut frozen = false;

    for _ in 0..n {
        let mut mid = x;
        for step in 0..substeps {
            if frozen {
                break;
            }
            let u = damping_law(&x, params);
            match rk4_step(&x, &u, params, dt) {
                Some(next) if rollout_in_box(&next) => x = next,
                _ => frozen = true,
            }
            if 2 * (step + 1) == substeps {
                mid = x;
            }
        }
        midpoints.push(damping_law(&mid, params).as_array());
        states.push(x.as_array());
        controls.push(damping_law(&x, params).as_array());
    }
    Guess { states, controls, midpoints, final_time: t }
}

/// One classical fourth-order Runge-Kutta step with the control held fixed.
fn rk4_step(
    state: &QuadState,
    control: &ControlInput,
    params: &ModelParams,
    dt: f64,
) -> Option<QuadState> {
    let advance = |base: &[f64; STATE_DIM], k: &[f64; STATE_DIM], w: f64| {
        QuadState::from_array(&std::array::from_fn(|i| base[i] + w * k[i]))
    };
    let a = state.as_array();
    let k1 = state_derivative(state, control, params).ok()?;
    let k2 = state_derivative(&advance(&a, &k1, 0.5 * dt), control, params).ok()?;
    let k3 = state_derivative(&advance(&a, &k2, 0.5 * dt), control, params).ok()?;
    let k4 = state_derivative(&advance(&a, &k3, dt), control, params).ok()?;
    Some(QuadState::from_array(&std::array::from_fn(|i| {
        a[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    })))
}

fn default_guess(spec: &OcpSpec) -> Guess {
    let n = spec.n_segments;
    let x0 = &spec.x0;
    let pf = spec.final_conditions.position;
    let psi0 = x0.attitude[2];
    let psi_f = spec.final_conditions.heading;
    let hover = spec.params.hover_rpm();
    let throttle = spec.params.hover_throttle();
    let t = guess_time(spec);
    // Piecewise-linear position profile threading the intermediate waypoint
    // when one is set, with the kink at the same time fraction the passage
    // constraint is pinned to; heading interpolates between the boundary and
    // waypoint values along each leg.
    let legs: Vec<(f64, Vector3<f64>, f64)> = match &spec.intermediate {
        Some(wp) => vec![
            (0.0, x0.position, psi0),
            (waypoint_fraction(spec, &wp.position), wp.position, wp.heading),
            (1.0, pf, psi_f),
        ],
        None => vec![(0.0, x0.position, psi0), (1.0, pf, psi_f)],
    };
    let along_path = |s: f64| -> (Vector3<f64>, Vector3<f64>, f64) {
        let j = match legs[1..].iter().position(|&(sj, _, _)| s <= sj) {
            Some(i) => i + 1,
            None => legs.len() - 1,
        };
        let (sa, pa, psi_a) = legs[j - 1];
        let (sb, pb, psi_b) = legs[j];
        let w = ((s - sa) / (sb - sa)).clamp(0.0, 1.0);
        let velocity = (pb - pa) / ((sb - sa) * t);
        (pa + w * (pb - pa), velocity, psi_a + w * (psi_b - psi_a))
    };
    let mut states = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let s = k as f64 / n as f64;
        let (position, velocity, psi) = along_path(s);
        let mut node = QuadState {
            position,
            velocity,
            attitude: Vector3::new(0.0, 0.0, psi),
            body_rates: Vector3::zeros(),
            rotor_speeds: nalgebra::Vector4::repeat(hover),
            moment_disturbance: spec.m_ext,
        };
        if k == 0 {
            node = *x0;
            node.moment_disturbance = spec.m_ext;
        }
        states.push(node.as_array());
    }
    Guess {
        states,
        controls: vec![[throttle; 4]; n + 1],
        midpoints: vec![[throttle; 4]; n],
        final_time: t,
    }
}

/// Adapts a trajectory onto `n` segments by linear interpolation in
/// normalized time, for use as a warm start.
fn resample_guess(traj: &Trajectory, n: usize) -> Guess {
    let m = traj.n_segments();
    if m == n {
        return Guess {
            states: traj.states.iter().map(|s| s.as_array()).collect(),
            controls: traj.controls.iter().map(|c| c.as_array()).collect(),
            midpoints: traj.midpoint_controls.iter().map(|c| c.as_array()).collect(),
            final_time: traj.final_time,
        };
    }
    let state_at = |s: f64| -> [f64; STATE_DIM] {
        let x = s * m as f64;
        let k = (x.floor() as usize).min(m - 1);
        let w = x - k as f64;
        let a = traj.states[k].as_array();
        let b = traj.states[k + 1].as_array();
        std::array::from_fn(|i| (1.0 - w) * a[i] + w * b[i])
    };
    let control_at = |s: f64| -> [f64; 4] {
        let x = s * m as f64;
        let k = (x.floor() as usize).min(m - 1);
        let w = x - k as f64;
        let a = traj.controls[k].as_array();
        let b = traj.controls[k + 1].as_array();
        std::array::from_fn(|i| (1.0 - w) * a[i] + w * b[i])
    };
    Guess {
        states: (0..=n).map(|k| state_at(k as f64 / n as f64)).collect(),
        controls: (0..=n).map(|k| control_at(k as f64 / n as f64)).collect(),
        midpoints: (0..n).map(|k| control_at((k as f64 + 0.5) / n as f64)).collect(),
        final_time: traj.final_time,
    }
}

fn solve_with_guess(
    spec: &OcpSpec,
    guess: &Guess,
    mu_init: f64,
) -> Result<Trajectory, TrajoptError> {
    // Attach the waypoint constraint to the node whose time fraction matches
    // the waypoint's share of the two-leg path length. The split depends only
    // on the problem geometry, so every stage of a continuation chain pins the
    // row to the same node; the resolved index is kept in the returned
    // trajectory's spec.
    let mut resolved = spec.clone();
    if let Some(wp) = &mut resolved.intermediate {
        if wp.node.is_none() {
            let n = spec.n_segments;
            let frac = waypoint_fraction(spec, &wp.position);
            wp.node = Some(((n as f64 * frac).round() as usize).clamp(1, n - 1));
        }
    }
    let tr = Transcription::new(&resolved)?;
    let z0 = tr.pack(guess);
    let opts = nlp::IpOptions {
        max_iterations: MAX_ITERATIONS,
        mu_init,
        tol_stationarity: STATIONARITY_TOLERANCE,
        verbose: std::env::var_os("GCNET_TRAJOPT_VERBOSE").is_some(),
        ..nlp::IpOptions::default()
    };
    let sol = nlp::solve(&tr, &z0, &opts);
    if sol.status != nlp::IpStatus::Converged {
        return Err(TrajoptError::NotConverged {
            iterations: sol.iterations,
            stationarity: sol.stationarity,
            feasibility: sol.feasibility,
            complementarity: sol.complementarity,
        });
    }
    let mut traj = tr.extract(&sol.z, resolved);
    traj.cost = sol.objective;
    let defects = hermite_simpson_defects(&traj, &traj.spec.params)?;
    let max_defect = defects
        .iter()
        .flat_map(|d| d.iter())
        .fold(0.0f64, |a, &v| a.max(v.abs()));
    traj.solve = SolveReport {
        iterations: sol.iterations,
        objective: sol.objective,
        stationarity: sol.stationarity,
        complementarity: sol.complementarity,
        max_defect,
        boundary_residual: boundary_residual(&traj),
        waypoint_residual: waypoint_residual(&traj),
    };
    Ok(traj)
}

/// Solves the optimal control problem described by `spec`.
///
/// Without an initial guess, the default initialization is used and a failed
/// solve is retried once from a 1.5x longer initial time guess. A provided
/// guess is resampled onto the spec's grid when the node counts differ.
pub fn solve_ocp(
    spec: &OcpSpec,
    initial_guess: Option<&Trajectory>,
) -> Result<Trajectory, TrajoptError> {
    spec.validate()?;
    match initial_guess {
        Some(traj) => {
            let guess = resample_guess(traj, spec.n_segments);
            solve_with_guess(spec, &guess, 1e-2)
        }
        None => {
            let guess = rollout_guess(spec);
            match solve_with_guess(spec, &guess, 1e-2) {
                Ok(traj) => Ok(traj),
                Err(TrajoptError::InvalidSpec { reason }) => {
                    Err(TrajoptError::InvalidSpec { reason })
                }
                Err(_) => {
                    let hi = spec.t_max.map_or(TIME_BOUNDS.1, |t| t.min(TIME_BOUNDS.1));
                    let mut fallback = default_guess(spec);
                    fallback.final_time = (fallback.final_time * 1.5).min(0.95 * hi);
                    solve_with_guess(spec, &fallback, 1e-2)
                }
            }
        }
    }
}

/// One node-doubling step: even nodes copy the coarse solution, odd node
/// states use the collocation midpoint formula, odd node controls take the
/// segment midpoint control, and new midpoint controls evaluate the
/// per-segment quadratic control interpolant at the quarter points.
fn double_guess(traj: &Trajectory) -> Result<Guess, TrajoptError> {
    let n = traj.n_segments();
    let params = &traj.spec.params;
    let mut states = Vec::with_capacity(2 * n + 1);
    let mut controls = Vec::with_capacity(2 * n + 1);
    let mut midpoints = Vec::with_capacity(2 * n);
    for k in 0..n {
        let h = traj.times[k + 1] - traj.times[k];
        let xa = traj.states[k].as_array();
        let xb = traj.states[k + 1].as_array();
        let fa = state_derivative(&traj.states[k], &traj.controls[k], params)?;
        let fb = state_derivative(&traj.states[k + 1], &traj.controls[k + 1], params)?;
        let mid: [f64; STATE_DIM] =
            std::array::from_fn(|i| 0.5 * (xa[i] + xb[i]) + h / 8.0 * (fa[i] - fb[i]));
        states.push(xa);
        states.push(mid);
        let ua = traj.controls[k].as_array();
        let ub = traj.controls[k + 1].as_array();
        let uc = traj.midpoint_controls[k].as_array();
        controls.push(ua);
        controls.push(uc);
        let quarter = |w0: f64, wc: f64, w1: f64| -> [f64; 4] {
            std::array::from_fn(|i| (w0 * ua[i] + wc * uc[i] + w1 * ub[i]).clamp(0.0, 1.0))
        };
        midpoints.push(quarter(0.375, 0.75, -0.125));
        midpoints.push(quarter(-0.125, 0.75, 0.375));
    }
    states.push(traj.states[n].as_array());
    controls.push(traj.controls[n].as_array());
    Ok(Guess { states, controls, midpoints, final_time: traj.final_time })
}

/// Evaluates the collocation interpolant of a solved trajectory at time `t`.
///
/// States follow the cubic Hermite interpolant implied by the collocation
/// scheme (dynamics-consistent at the segment ends), controls the per-segment
/// quadratic through the node and midpoint values, clamped to `[0, 1]`.
/// Times outside `[0, T]` clamp to the nearest endpoint.
pub fn sample_solution(
    traj: &Trajectory,
    t: f64,
) -> Result<(QuadState, ControlInput), DynamicsError> {
    let n = traj.n_segments();
    let t = t.clamp(0.0, traj.final_time);
    let h = traj.final_time / n as f64;
    let k = ((t / h).floor() as usize).min(n - 1);
    let s = (t - traj.times[k]) / h;

    let fa = state_derivative(&traj.states[k], &traj.controls[k], &traj.spec.params)?;
    let fb = state_derivative(&traj.states[k + 1], &traj.controls[k + 1], &traj.spec.params)?;
    let xa = traj.states[k].as_array();
    let xb = traj.states[k + 1].as_array();
    let (h00, h10) = (2.0 * s * s * s - 3.0 * s * s + 1.0, s * s * s - 2.0 * s * s + s);
    let (h01, h11) = (-2.0 * s * s * s + 3.0 * s * s, s * s * s - s * s);
    let state = QuadState::from_array(&std::array::from_fn(|i| {
        h00 * xa[i] + h10 * h * fa[i] + h01 * xb[i] + h11 * h * fb[i]
    }));

    let ua = traj.controls[k].as_array();
    let uc = traj.midpoint_controls[k].as_array();
    let ub = traj.controls[k + 1].as_array();
    let (l0, lc, l1) = ((1.0 - s) * (1.0 - 2.0 * s), 4.0 * s * (1.0 - s), s * (2.0 * s - 1.0));
    let control = ControlInput::from_array(&std::array::from_fn(|i| {
        (l0 * ua[i] + lc * uc[i] + l1 * ub[i]).clamp(0.0, 1.0)
    }));
    Ok((state, control))
}

/// Refines a solved trajectory by repeated node doubling: each stage
/// interpolates the current solution onto twice as many segments and
/// re-solves warm-started from the interpolant.
pub fn refine_node_doubling(
    traj: &Trajectory,
    target_segments: usize,
) -> Result<Trajectory, TrajoptError> {
    let current = traj.n_segments();
    let mut reach = current;
    while reach < target_segments {
        reach *= 2;
    }
    if reach != target_segments || target_segments <= current {
        return Err(TrajoptError::InvalidRefinementTarget {
            current,
            requested: target_segments,
        });
    }
    let mut refined = traj.clone();
    while refined.n_segments() < target_segments {
        let guess = double_guess(&refined)?;
        let mut spec = refined.spec.clone();
        spec.n_segments *= 2;
        if let Some(wp) = &mut spec.intermediate {
            wp.node = wp.node.map(|k| 2 * k);
        }
        refined = solve_with_guess(&spec, &guess, 1e-4).map_err(|e| TrajoptError::Refinement {
            segments: spec.n_segments,
            source: Box::new(e),
        })?;
    }
    Ok(refined)
}
