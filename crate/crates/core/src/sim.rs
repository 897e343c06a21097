//! Closed-loop flight simulation.
//!
//! Integrates the vehicle model under a neural controller with the adaptive
//! Dormand-Prince 5(4) Runge-Kutta pair, advancing through a waypoint track,
//! clamping rotor commands at an actuator ceiling that may sag over time, and
//! optionally running the rotor-limit tracker in the loop. A run produces a
//! [`FlightLog`]: a dense state/command time series plus waypoint, lap, and
//! tracker events, with CSV export and the flight energy metric.

use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{
    state_derivative, ControlInput, DynamicsError, ModelParams, QuadState, STATE_DIM,
};
use crate::policy::{assemble_features, PolicyError, PolicyNet, Variant};
use crate::tracker::{PeakTracker, TrackerConfig, TrackerError};
use crate::trajopt::{sample_solution, Trajectory};

/// Errors from simulation setup, integration stalls, or logging.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation setup: {reason}")]
    InvalidConfig { reason: String },
    #[error("integration stalled: {reason}")]
    Stalled { reason: String },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One gate of a track.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    /// Gate position in the world frame [m].
    pub position: Vector3<f64>,
    /// Yaw of the leg arriving at this gate [rad]; orients the feature frame
    /// the controller sees while steering for it.
    pub heading: f64,
}

/// Rule deciding when the active gate hands over to the next one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum SwitchRule {
    /// Advance when the 3-D distance to the active gate drops below this [m].
    DistanceThreshold(f64),
    /// Advance on entering a passage sphere around the active gate [m].
    Passage { radius: f64 },
}

impl SwitchRule {
    /// Whether a vehicle at `distance` from the active gate switches now.
    pub fn fires(&self, distance: f64) -> bool {
        match *self {
            SwitchRule::DistanceThreshold(d) => distance < d,
            SwitchRule::Passage { radius } => distance < radius,
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let v = match *self {
            SwitchRule::DistanceThreshold(d) => d,
            SwitchRule::Passage { radius } => radius,
        };
        if !v.is_finite() || v < 0.0 {
            return Err(SimError::InvalidConfig {
                reason: format!("switch distance {v} must be finite and non-negative"),
            });
        }
        Ok(())
    }
}

/// An ordered, cyclic gate sequence with its switching rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Track {
    pub waypoints: Vec<Waypoint>,
    pub rule: SwitchRule,
    /// Full circuits to fly; the run completes when the last gate of the
    /// last lap is passed.
    pub laps: usize,
}

impl Track {
    /// Single-target track with the standard 1.2 m switching distance.
    pub fn single(position: Vector3<f64>, heading: f64) -> Self {
        Self {
            waypoints: vec![Waypoint { position, heading }],
            rule: SwitchRule::DistanceThreshold(1.2),
            laps: 1,
        }
    }

    /// Rectangular right-hand circuit at the height of `corner`.
    ///
    /// The first leg runs `side_a` along world x starting from `corner`, the
    /// second `side_b` along world y. Gates are ordered for a start at
    /// `corner` heading along +x, and each gate's heading is the yaw of its
    /// incoming leg.
    pub fn rectangle(
        corner: Vector3<f64>,
        side_a: f64,
        side_b: f64,
        rule: SwitchRule,
        laps: usize,
    ) -> Self {
        let p1 = corner + Vector3::new(side_a, 0.0, 0.0);
        let p2 = corner + Vector3::new(side_a, side_b, 0.0);
        let p3 = corner + Vector3::new(0.0, side_b, 0.0);
        Self::polygon(vec![p1, p2, p3, corner], rule, laps)
    }

    /// Cyclic polygon track; each gate's heading is computed from the leg
    /// arriving at it, the first gate's from the leg leaving the last one.
    pub fn polygon(corners: Vec<Vector3<f64>>, rule: SwitchRule, laps: usize) -> Self {
        let n = corners.len();
        let waypoints = corners
            .iter()
            .enumerate()
            .map(|(i, &position)| {
                let leg = position - corners[(i + n - 1) % n];
                Waypoint { position, heading: leg.y.atan2(leg.x) }
            })
            .collect();
        Self { waypoints, rule, laps }
    }

    /// Copy of the track with every gate moved uniformly within a horizontal
    /// `side` x `side` square centered on its nominal position, headings
    /// recomputed from the perturbed legs.
    pub fn randomized(&self, side: f64, rng: &mut impl Rng) -> Self {
        let corners: Vec<Vector3<f64>> = self
            .waypoints
            .iter()
            .map(|wp| {
                let dx = rng.random_range(-side / 2.0..=side / 2.0);
                let dy = rng.random_range(-side / 2.0..=side / 2.0);
                wp.position + Vector3::new(dx, dy, 0.0)
            })
            .collect();
        if corners.len() < 2 {
            let mut track = self.clone();
            for (wp, p) in track.waypoints.iter_mut().zip(corners) {
                wp.position = p;
            }
            return track;
        }
        Self::polygon(corners, self.rule, self.laps)
    }

    /// Index of the gate after `index`, wrapping at the end of the lap.
    pub fn next_index(&self, index: usize) -> usize {
        (index + 1) % self.waypoints.len()
    }

    /// Checks the gate list, switch rule, and lap count.
    pub fn validate(&self) -> Result<(), SimError> {
        if self.waypoints.is_empty() {
            return Err(SimError::InvalidConfig {
                reason: "track needs at least one waypoint".to_string(),
            });
        }
        if self.laps == 0 {
            return Err(SimError::InvalidConfig { reason: "laps must be positive".to_string() });
        }
        for (i, wp) in self.waypoints.iter().enumerate() {
            if !wp.position.iter().all(|c| c.is_finite()) || !wp.heading.is_finite() {
                return Err(SimError::InvalidConfig {
                    reason: format!("waypoint {i} has non-finite position or heading"),
                });
            }
        }
        self.rule.validate()
    }
}

/// True actuator ceiling over flight time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum CeilingModel {
    /// Constant ceiling [RPM].
    Fixed(f64),
    /// Battery sag `start - rate * t` [RPM], floored at `omega_min + 500`.
    Drift { start: f64, rate: f64 },
}

/// The true rotor ceiling at flight time `t`.
pub fn battery_drift(model: &CeilingModel, t: f64, params: &ModelParams) -> f64 {
    match *model {
        CeilingModel::Fixed(v) => v,
        CeilingModel::Drift { start, rate } => (start - rate * t).max(params.omega_min + 500.0),
    }
}

/// Where the controller's believed rotor ceiling comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub enum OmegaMaxSource {
    /// Constant believed ceiling [RPM].
    Fixed(f64),
    /// Online estimate from the rotor-limit tracker, seeded with `initial`.
    Tracker {
        initial: f64,
        #[serde(default)]
        config: TrackerConfig,
    },
}

/// Integrator, actuator, and run-length settings for one simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Relative integration tolerance.
    pub rtol: f64,
    /// Absolute integration tolerance.
    pub atol: f64,
    /// Largest accepted step [s]; also bounds the logging interval.
    pub max_step: f64,
    /// Simulated-time budget [s]; reaching it ends the run as a time-out.
    pub max_time: f64,
    /// True actuator ceiling model.
    pub ceiling: CeilingModel,
    /// Source of the believed ceiling fed to the controller.
    pub believed: OmegaMaxSource,
    /// Controller refresh period [s]; 0 re-evaluates the network inside
    /// every derivative call.
    pub zoh_period: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            rtol: 1e-8,
            atol: 1e-8,
            max_step: 0.01,
            max_time: 60.0,
            ceiling: CeilingModel::Fixed(12000.0),
            believed: OmegaMaxSource::Fixed(12000.0),
            zoh_period: 0.0,
        }
    }
}

impl SimConfig {
    /// Checks positivity and finiteness of every setting.
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("rtol", self.rtol),
            ("atol", self.atol),
            ("max_step", self.max_step),
            ("max_time", self.max_time),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(SimError::InvalidConfig {
                    reason: format!("{name} = {v} must be finite and positive"),
                });
            }
        }
        if !self.zoh_period.is_finite() || self.zoh_period < 0.0 {
            return Err(SimError::InvalidConfig {
                reason: format!("zoh_period = {} must be finite and non-negative", self.zoh_period),
            });
        }
        match self.ceiling {
            CeilingModel::Fixed(v) if v.is_finite() && v > 0.0 => {}
            CeilingModel::Drift { start, rate }
                if start.is_finite() && start > 0.0 && rate.is_finite() && rate >= 0.0 => {}
            _ => {
                return Err(SimError::InvalidConfig {
                    reason: "ceiling model needs a positive level and non-negative rate".to_string(),
                });
            }
        }
        match &self.believed {
            OmegaMaxSource::Fixed(v) if v.is_finite() && *v > 0.0 => {}
            OmegaMaxSource::Tracker { initial, config }
                if initial.is_finite() && *initial > 0.0 =>
            {
                config.validate()?;
            }
            _ => {
                return Err(SimError::InvalidConfig {
                    reason: "believed ceiling must be positive".to_string(),
                });
            }
        }
        Ok(())
    }
}

/// Discrete occurrence during a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Event {
    /// Flight time of the occurrence [s].
    pub t: f64,
    pub kind: EventKind,
}

/// What happened at an [`Event`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// The active gate advanced to `index`.
    WaypointSwitch { index: usize },
    /// A full circuit of the track was closed.
    LapCompleted { lap: usize },
    /// The rotor-limit tracker corrected its ceiling estimate.
    TrackerTrigger { estimate: f64 },
    /// The run aborted.
    Diverged { reason: String },
}

/// How a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    /// All laps were flown.
    Completed,
    /// The simulated-time budget ran out.
    TimeLimit,
    /// The vehicle left the flight envelope or hit a kinematic singularity.
    Diverged,
}

/// One logged integrator step.
#[derive(Debug, Clone, Serialize)]
pub struct LogRow {
    /// Flight time [s].
    pub t: f64,
    pub state: QuadState,
    /// Network output in force at this instant, in [0, 1].
    pub u: [f64; 4],
    /// Commanded rotor speeds through the believed ceiling [RPM].
    pub w_cmd: [f64; 4],
    /// Active waypoint index.
    pub wp_index: usize,
    /// Believed rotor ceiling [RPM].
    pub believed: f64,
}

/// Complete record of one simulated flight.
#[derive(Debug, Clone, Serialize)]
pub struct FlightLog {
    /// One row per accepted integrator step, timestamps strictly increasing.
    pub rows: Vec<LogRow>,
    pub events: Vec<Event>,
    /// Completion time of each lap [s].
    pub lap_times: Vec<f64>,
    pub outcome: Outcome,
}

impl FlightLog {
    /// State at the last logged step.
    pub fn final_state(&self) -> &QuadState {
        &self.rows.last().expect("a run logs at least its initial state").state
    }

    /// Trapezoidal integral of the squared network output over the flight.
    pub fn energy_cost(&self) -> f64 {
        self.rows
            .windows(2)
            .map(|w| {
                let a: f64 = w[0].u.iter().map(|u| u * u).sum();
                let b: f64 = w[1].u.iter().map(|u| u * u).sum();
                0.5 * (a + b) * (w[1].t - w[0].t)
            })
            .sum()
    }

    /// Fraction of logged rotor commands within `margin` of the output
    /// bounds 0 and 1.
    pub fn saturation_fraction(&self, margin: f64) -> f64 {
        let total = 4 * self.rows.len();
        if total == 0 {
            return 0.0;
        }
        let saturated = self
            .rows
            .iter()
            .flat_map(|r| r.u.iter())
            .filter(|&&u| u <= margin || u >= 1.0 - margin)
            .count();
        saturated as f64 / total as f64
    }

    /// Writes the log as CSV: time, the 19 state columns, network outputs,
    /// commanded and observed rotor speeds, active waypoint, and the
    /// believed ceiling.
    pub fn write_csv(&self, path: &Path) -> Result<(), SimError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend(STATE_COLUMNS.iter().map(|c| c.to_string()));
        for stem in ["u", "w_cmd", "w_obs"] {
            for i in 1..=4 {
                header.push(format!("{stem}{i}"));
            }
        }
        header.push("wp_index".to_string());
        header.push("tracker_estimate".to_string());
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.t.to_string()];
            rec.extend(row.state.as_array().iter().map(|v| v.to_string()));
            rec.extend(row.u.iter().map(|v| v.to_string()));
            rec.extend(row.w_cmd.iter().map(|v| v.to_string()));
            rec.extend(row.state.rotor_speeds.iter().map(|v| v.to_string()));
            rec.push(row.wp_index.to_string());
            rec.push(row.believed.to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// State-vector column names shared by trajectory and flight-log CSV output.
pub const STATE_COLUMNS: [&str; STATE_DIM] = [
    "x", "y", "z", "vx", "vy", "vz", "phi", "theta", "psi", "p", "q", "r", "w1", "w2", "w3",
    "w4", "mx", "my", "mz",
];

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let w = angle.rem_euclid(tau);
    if w > std::f64::consts::PI { w - tau } else { w }
}

/// Rotates a world-frame vector into a frame yawed `yaw` about world z.
fn yaw_into_frame(v: &Vector3<f64>, yaw: f64) -> Vector3<f64> {
    let (s, c) = yaw.sin_cos();
    Vector3::new(c * v.x + s * v.y, c * v.y - s * v.x, v.z)
}

/// The state as the controller sees it: pose re-expressed in a gate frame
/// with origin at the gate and x axis along `heading`, yaw wrapped to
/// `(-pi, pi]`. Roll, pitch, body rates, rotor speeds, and the disturbance
/// estimate are invariant under the yaw change.
pub fn frame_state(state: &QuadState, origin: &Vector3<f64>, heading: f64) -> QuadState {
    let mut framed = *state;
    framed.position = yaw_into_frame(&(state.position - origin), heading);
    framed.velocity = yaw_into_frame(&state.velocity, heading);
    framed.attitude.z = wrap_angle(state.attitude.z - heading);
    framed
}

/// Gate geometry inputs for a waypoint-relative policy: the offset of the
/// gate being passed, expressed in the target gate's frame, reported at the
/// policy's trained arity.
fn pair_extension(arity: usize, passed: &Waypoint, target: &Waypoint) -> Vec<f64> {
    let off = yaw_into_frame(&(passed.position - target.position), target.heading);
    match arity {
        1 => vec![off.norm()],
        2 => vec![off.x, off.y],
        _ => vec![off.x, off.y, off.z],
    }
}

/// Butcher tableau of the Dormand-Prince 5(4) embedded pair.
const STAGES: usize = 7;
const RK_C: [f64; STAGES] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const RK_A: [[f64; 6]; STAGES] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
/// Fifth-order weights (the last tableau row).
const RK_B5: [f64; STAGES] =
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
/// Embedded fourth-order weights.
const RK_B4: [f64; STAGES] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Smallest step before a run is declared stalled [s].
const MIN_STEP: f64 = 1e-10;
/// Trial steps allowed per accepted step.
const MAX_ATTEMPTS: usize = 64;
/// Flight-envelope position bound [m].
const POSITION_BOUND: f64 = 100.0;
/// Flight-envelope body-rate bound [rad/s].
const RATE_BOUND: f64 = 50.0;

/// One trial step of the embedded pair: the fifth-order solution and the
/// local error estimate (difference between the two orders).
fn rk_trial<const N: usize, E>(
    f: &mut impl FnMut(f64, &[f64; N]) -> Result<[f64; N], E>,
    t: f64,
    y: &[f64; N],
    h: f64,
) -> Result<([f64; N], [f64; N]), E> {
    let mut k = [[0.0; N]; STAGES];
    k[0] = f(t, y)?;
    let mut y5 = *y;
    for s in 1..STAGES {
        let mut trial = *y;
        for (j, k_j) in k.iter().enumerate().take(s) {
            let a = RK_A[s][j];
            if a != 0.0 {
                for i in 0..N {
                    trial[i] += h * a * k_j[i];
                }
            }
        }
        if s == STAGES - 1 {
            y5 = trial;
        }
        k[s] = f(t + RK_C[s] * h, &trial)?;
    }
    let mut err = [0.0; N];
    for (s, k_s) in k.iter().enumerate() {
        let d = RK_B5[s] - RK_B4[s];
        if d != 0.0 {
            for i in 0..N {
                err[i] += h * d * k_s[i];
            }
        }
    }
    Ok((y5, err))
}

/// RMS of the error components scaled by the mixed tolerance.
fn error_norm<const N: usize>(
    err: &[f64; N],
    y: &[f64; N],
    y5: &[f64; N],
    rtol: f64,
    atol: f64,
) -> f64 {
    let mut sum = 0.0;
    for i in 0..N {
        let scale = atol + rtol * y[i].abs().max(y5[i].abs());
        let r = err[i] / scale;
        sum += r * r;
    }
    (sum / N as f64).sqrt()
}

/// Step-size multiplier from the scaled error, clamped to [0.2, 5].
fn step_factor(err_norm: f64) -> f64 {
    if err_norm <= 0.0 {
        5.0
    } else {
        (0.9 * err_norm.powf(-0.2)).clamp(0.2, 5.0)
    }
}

/// Integrates with a fixed step count and no error control.
///
/// Exposes the fifth-order member of the embedded pair on its own, for
/// convergence studies against problems with known solutions.
pub fn integrate_fixed<const N: usize>(
    mut f: impl FnMut(f64, &[f64; N]) -> [f64; N],
    y0: [f64; N],
    t0: f64,
    t1: f64,
    steps: usize,
) -> [f64; N] {
    let h = (t1 - t0) / steps as f64;
    let mut wrapped =
        |t: f64, y: &[f64; N]| -> Result<[f64; N], std::convert::Infallible> { Ok(f(t, y)) };
    let mut y = y0;
    for s in 0..steps {
        let t = t0 + h * s as f64;
        let (y5, _) = rk_trial(&mut wrapped, t, &y, h).unwrap_or_else(|never| match never {});
        y = y5;
    }
    y
}

/// Why a state has left the flight envelope, if it has.
fn divergence_reason(state: &QuadState) -> Option<String> {
    let p = state.position.norm();
    if p > POSITION_BOUND {
        return Some(format!("position {p:.1} m outside the {POSITION_BOUND} m envelope"));
    }
    let w = state.body_rates.norm();
    if w > RATE_BOUND {
        return Some(format!("body rate {w:.1} rad/s outside the {RATE_BOUND} rad/s envelope"));
    }
    None
}

/// Controller state threaded through a closed-loop run.
struct Controller<'a> {
    net: &'a PolicyNet,
    track: &'a Track,
    config: &'a SimConfig,
    params: &'a ModelParams,
    /// Index of the gate currently steered for (or, for waypoint-relative
    /// policies, the gate currently being passed).
    active: usize,
    tracker: Option<PeakTracker>,
    believed_fixed: f64,
    /// Held command when a zero-order hold is configured.
    held: Option<([f64; 4], [f64; 4])>,
    /// Next hold-refresh time [s].
    next_refresh: f64,
}

impl<'a> Controller<'a> {
    fn new(
        net: &'a PolicyNet,
        track: &'a Track,
        config: &'a SimConfig,
        params: &'a ModelParams,
        x0: &QuadState,
    ) -> Result<Self, SimError> {
        if matches!(net.variant(), Variant::WaypointRelative(_)) && track.waypoints.len() < 2 {
            return Err(SimError::InvalidConfig {
                reason: "a waypoint-relative policy needs a track with at least two gates"
                    .to_string(),
            });
        }
        let (tracker, believed_fixed) = match &config.believed {
            OmegaMaxSource::Fixed(v) => (None, *v),
            OmegaMaxSource::Tracker { initial, config: tc } => {
                (Some(PeakTracker::new(*tc, *initial, x0.rotor_speeds.into())?), *initial)
            }
        };
        let ctl = Self {
            net,
            track,
            config,
            params,
            active: 0,
            tracker,
            believed_fixed,
            held: None,
            next_refresh: 0.0,
        };
        // Surface feature-arity problems before flying.
        ctl.command(x0)?;
        Ok(ctl)
    }

    /// The ceiling the controller currently believes in [RPM].
    fn believed(&self) -> f64 {
        self.tracker.as_ref().map_or(self.believed_fixed, |t| t.estimate())
    }

    /// Feature frame for the active gate: origin, yaw, variant extension.
    fn feature_frame(&self) -> (Vector3<f64>, f64, Vec<f64>) {
        let wps = &self.track.waypoints;
        match self.net.variant() {
            Variant::WaypointRelative(arity) => {
                let passed = &wps[self.active];
                let target = &wps[self.track.next_index(self.active)];
                (target.position, target.heading, pair_extension(arity, passed, target))
            }
            Variant::AdaptiveLimit => {
                let wp = &wps[self.active];
                (wp.position, wp.heading, vec![self.believed()])
            }
            Variant::Base => {
                let wp = &wps[self.active];
                (wp.position, wp.heading, Vec::new())
            }
        }
    }

    /// Fresh network evaluation for `state` in the current feature frame.
    fn command(&self, state: &QuadState) -> Result<([f64; 4], [f64; 4]), SimError> {
        let (origin, yaw, ext) = self.feature_frame();
        let framed = frame_state(state, &origin, yaw);
        let features = assemble_features(self.net.variant(), &framed, &Vector3::zeros(), &ext)?;
        Ok(self.net.command(&features)?)
    }

    /// Command in force at `state` (held or freshly evaluated).
    fn active_command(&self, state: &QuadState) -> Result<([f64; 4], [f64; 4]), SimError> {
        match self.held {
            Some(c) => Ok(c),
            None => self.command(state),
        }
    }

    /// Realized throttle after clamping the command at the true ceiling.
    fn realized(&self, w_cmd: &[f64; 4], t: f64) -> ControlInput {
        let ceiling = battery_drift(&self.config.ceiling, t, self.params);
        let span = self.params.omega_max - self.params.omega_min;
        let u: [f64; 4] = std::array::from_fn(|i| {
            ((w_cmd[i].min(ceiling) - self.params.omega_min) / span).clamp(0.0, 1.0)
        });
        ControlInput::from_array(&u)
    }

    /// Vehicle derivative under the controller at flight time `t`.
    fn derivative(&self, t: f64, y: &[f64; STATE_DIM]) -> Result<[f64; STATE_DIM], SimError> {
        let state = QuadState::from_array(y);
        let (_, w_cmd) = self.active_command(&state)?;
        let control = self.realized(&w_cmd, t);
        Ok(state_derivative(&state, &control, self.params)?)
    }

    /// Re-evaluates the held command when its hold period has expired.
    fn refresh_hold(&mut self, t: f64, state: &QuadState) -> Result<(), SimError> {
        if self.config.zoh_period > 0.0 && t + 1e-12 >= self.next_refresh {
            self.held = Some(self.command(state)?);
            while self.next_refresh <= t + 1e-12 {
                self.next_refresh += self.config.zoh_period;
            }
        }
        Ok(())
    }
}

/// Flies `net` around `track` from `x0` under `config`.
///
/// Aborts (divergence, kinematic singularities, stalled steps) are reported
/// through the log's outcome and events; `Err` is reserved for invalid
/// setups.
pub fn simulate_closed_loop(
    x0: &QuadState,
    net: &PolicyNet,
    track: &Track,
    config: &SimConfig,
    params: &ModelParams,
) -> Result<FlightLog, SimError> {
    run_closed_loop(x0, net, track, config, params, &[]).map(|(log, _)| log)
}

/// Closed-loop run that also returns the state at each requested sample
/// time (sorted, within the time budget).
fn run_closed_loop(
    x0: &QuadState,
    net: &PolicyNet,
    track: &Track,
    config: &SimConfig,
    params: &ModelParams,
    sample_times: &[f64],
) -> Result<(FlightLog, Vec<QuadState>), SimError> {
    config.validate()?;
    track.validate()?;
    params.validate()?;
    let mut ctl = Controller::new(net, track, config, params, x0)?;

    let mut t = 0.0;
    let mut y = x0.as_array();
    let mut state = *x0;
    let mut rows = Vec::new();
    let mut events = Vec::new();
    let mut lap_times = Vec::new();
    let mut sampled = Vec::new();
    let mut si = 0;
    while si < sample_times.len() && sample_times[si] <= 1e-12 {
        sampled.push(state);
        si += 1;
    }

    ctl.refresh_hold(0.0, &state)?;
    let mut cmd = ctl.active_command(&state)?;
    rows.push(LogRow {
        t,
        state,
        u: cmd.0,
        w_cmd: cmd.1,
        wp_index: ctl.active,
        believed: ctl.believed(),
    });

    let mut h = config.max_step.min(1e-3);
    let mut outcome = Outcome::TimeLimit;

    while t < config.max_time - 1e-12 {
        // Cap the step at the next controller, sampling, or budget boundary.
        let mut cap = (config.max_time - t).min(config.max_step);
        if let Some(&ts) = sample_times.get(si) {
            cap = cap.min(ts - t);
        }
        if config.zoh_period > 0.0 {
            cap = cap.min(ctl.next_refresh - t);
        }
        let cap = cap.max(MIN_STEP);

        // Shrink trial steps until the error controller accepts one.
        let mut h_try = h.min(cap);
        let mut accepted = None;
        for _ in 0..MAX_ATTEMPTS {
            let trial = {
                let ctl_ref = &ctl;
                let mut f = |tt: f64, yy: &[f64; STATE_DIM]| ctl_ref.derivative(tt, yy);
                rk_trial(&mut f, t, &y, h_try)
            };
            match trial {
                Ok((y5, err)) => {
                    let en = error_norm(&err, &y, &y5, config.rtol, config.atol);
                    if en <= 1.0 {
                        accepted = Some((y5, en));
                        break;
                    }
                    if h_try <= MIN_STEP * 2.0 {
                        break;
                    }
                    h_try = (h_try * step_factor(en)).max(MIN_STEP);
                }
                Err(SimError::Dynamics(_)) => {
                    // A trial stage hit the kinematic singularity; retry
                    // shorter before giving up.
                    if h_try <= MIN_STEP * 2.0 {
                        break;
                    }
                    h_try *= 0.5;
                }
                Err(other) => return Err(other),
            }
        }
        let Some((y5, en)) = accepted else {
            events.push(Event {
                t,
                kind: EventKind::Diverged { reason: "integrator step size underflow".to_string() },
            });
            outcome = Outcome::Diverged;
            break;
        };

        t += h_try;
        if let Some(&ts) = sample_times.get(si) {
            if (t - ts).abs() <= 1e-9 {
                t = ts;
            }
        }
        if config.zoh_period > 0.0 && (t - ctl.next_refresh).abs() <= 1e-9 {
            t = ctl.next_refresh;
        }
        if (t - config.max_time).abs() <= 1e-9 {
            t = config.max_time;
        }
        y = y5;
        state = QuadState::from_array(&y);
        h = (h_try * step_factor(en)).min(config.max_step);

        // Feed the tracker the command that drove this step.
        if let Some(tracker) = ctl.tracker.as_mut() {
            let before = tracker.estimate();
            let obs: [f64; 4] = state.rotor_speeds.into();
            let after = tracker.update(&cmd.1, &obs, h_try);
            if after != before {
                events.push(Event { t, kind: EventKind::TrackerTrigger { estimate: after } });
            }
        }

        let diverged = divergence_reason(&state);
        if diverged.is_none() {
            let dist = (state.position - track.waypoints[ctl.active].position).norm();
            if track.rule.fires(dist) {
                ctl.active = track.next_index(ctl.active);
                events.push(Event { t, kind: EventKind::WaypointSwitch { index: ctl.active } });
                if ctl.active == 0 {
                    lap_times.push(t);
                    events.push(Event { t, kind: EventKind::LapCompleted { lap: lap_times.len() } });
                    if lap_times.len() >= track.laps {
                        outcome = Outcome::Completed;
                    }
                }
                // The frame jumped to a new gate: refresh any held command.
                if config.zoh_period > 0.0 {
                    ctl.held = Some(ctl.command(&state)?);
                }
            }
        }

        ctl.refresh_hold(t, &state)?;
        while si < sample_times.len() && t + 1e-9 >= sample_times[si] {
            sampled.push(state);
            si += 1;
        }
        cmd = ctl.active_command(&state)?;
        rows.push(LogRow {
            t,
            state,
            u: cmd.0,
            w_cmd: cmd.1,
            wp_index: ctl.active,
            believed: ctl.believed(),
        });
        if let Some(reason) = diverged {
            events.push(Event { t, kind: EventKind::Diverged { reason } });
            outcome = Outcome::Diverged;
            break;
        }
        if outcome == Outcome::Completed {
            break;
        }
    }

    Ok((FlightLog { rows, events, lap_times, outcome }, sampled))
}

/// Closed-loop tracking errors of `net` against refined reference
/// trajectories.
///
/// Each reference is reflown from its own initial state with the network
/// told `omega_max_input` as its believed ceiling while the vehicle's true
/// ceiling is the reference's `omega_max`. The value per reference is the
/// mean over its nodes of the distance between the simulated and reference
/// positions at equal fractions of the reference final time; diverged runs
/// keep contributing their last logged position.
pub fn evaluate_tracking(
    net: &PolicyNet,
    references: &[Trajectory],
    omega_max_input: f64,
    config: &SimConfig,
) -> Result<Vec<f64>, SimError> {
    references
        .par_iter()
        .map(|reference| {
            let params = reference.spec.params;
            let mut cfg = *config;
            cfg.ceiling = CeilingModel::Fixed(params.omega_max);
            cfg.believed = OmegaMaxSource::Fixed(omega_max_input);
            cfg.max_time = reference.final_time;
            let track = Track {
                waypoints: vec![Waypoint {
                    position: reference.spec.final_conditions.position,
                    heading: 0.0,
                }],
                rule: SwitchRule::DistanceThreshold(0.0),
                laps: 1,
            };
            let (log, sampled) =
                run_closed_loop(&reference.spec.x0, net, &track, &cfg, &params, &reference.times)?;
            let fallback = log.final_state().position;
            let n = reference.times.len();
            let mean = (0..n)
                .map(|j| {
                    let sim = sampled.get(j).map_or(fallback, |s| s.position);
                    (sim - reference.states[j].position).norm()
                })
                .sum::<f64>()
                / n as f64;
            Ok(mean)
        })
        .collect()
}

/// Integrates the vehicle under a reference trajectory's own control
/// interpolant and returns the state at each reference node time.
pub fn replay_open_loop(
    reference: &Trajectory,
    config: &SimConfig,
) -> Result<Vec<QuadState>, SimError> {
    config.validate()?;
    let params = reference.spec.params;
    params.validate()?;
    let mut f = |t: f64, y: &[f64; STATE_DIM]| -> Result<[f64; STATE_DIM], SimError> {
        let (_, control) = sample_solution(reference, t)?;
        Ok(state_derivative(&QuadState::from_array(y), &control, &params)?)
    };

    let mut t = 0.0;
    let mut y = reference.spec.x0.as_array();
    let mut out = Vec::with_capacity(reference.times.len());
    let mut si = 0;
    while si < reference.times.len() && reference.times[si] <= 1e-12 {
        out.push(QuadState::from_array(&y));
        si += 1;
    }
    let mut h = config.max_step.min(1e-3);
    while t < reference.final_time - 1e-12 && si < reference.times.len() {
        let cap = (reference.times[si] - t).min(config.max_step).max(MIN_STEP);
        let mut h_try = h.min(cap);
        let mut accepted = None;
        for _ in 0..MAX_ATTEMPTS {
            match rk_trial(&mut f, t, &y, h_try) {
                Ok((y5, err)) => {
                    let en = error_norm(&err, &y, &y5, config.rtol, config.atol);
                    if en <= 1.0 {
                        accepted = Some((y5, en));
                        break;
                    }
                    if h_try <= MIN_STEP * 2.0 {
                        break;
                    }
                    h_try = (h_try * step_factor(en)).max(MIN_STEP);
                }
                Err(e) => return Err(e),
            }
        }
        let Some((y5, en)) = accepted else {
            return Err(SimError::Stalled {
                reason: format!("open-loop replay step size underflow at t = {t:.6}"),
            });
        };
        t += h_try;
        if (t - reference.times[si]).abs() <= 1e-9 {
            t = reference.times[si];
        }
        y = y5;
        h = (h_try * step_factor(en)).min(config.max_step);
        while si < reference.times.len() && t + 1e-9 >= reference.times[si] {
            out.push(QuadState::from_array(&y));
            si += 1;
        }
    }
    Ok(out)
}
