//! Boundary-condition sampling, bulk trajectory solving, and dataset assembly
//! for imitation training.
//!
//! A dataset is built by drawing optimal control problems from configured
//! uniform bounds, solving each one, and resampling every solution into
//! (feature, throttle) records. The sampling box is expressed in
//! target-approach coordinates: along-track offsets are negative behind the
//! gate, and the whole box can be rotated about the gate by an approach yaw.
//! Single-gate problems anchor the box at the target; consecutive-gate
//! problems anchor it at the intermediate gate, with the approach rotated
//! relative to the exit leg so every solved trajectory is one gate-to-gate
//! turn.
//!
//! Everything is deterministic: each trajectory derives its own RNG stream
//! from the config seed and its index, so parallel generation, reruns, and
//! partial failures all reproduce bit-identically.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
use std::path::Path;

use nalgebra::Vector3;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{ModelParams, QuadState};
use crate::io::{self, ArtifactHeader};
use crate::policy::{assemble_features, derive_seed, PolicyError, TrainingSet, Variant};
use crate::trajopt::{
    sample_solution, solve_ocp, FinalConditions, IntermediateWaypoint, OcpSpec, Trajectory,
    TrajoptError,
};

/// Errors from dataset configuration, generation, or persistence.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset config: {reason}")]
    InvalidConfig { reason: String },
    #[error("{failed} of {attempted} solves failed, above the 20% abort threshold")]
    TooManyFailures { failed: usize, attempted: usize },
    #[error("dataset has no records")]
    Empty,
    #[error(transparent)]
    Io(#[from] io::IoError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Solver(#[from] TrajoptError),
    #[error("csv export failed: {0}")]
    Csv(#[from] csv::Error),
}

/// Uniform sampling ranges for the initial state, in target-approach
/// coordinates. Angles are in degrees, positions in meters, velocities in
/// m/s, body rates in rad/s, moments in N m.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingBounds {
    /// Along-track start offset (negative = behind the gate).
    pub x0: [f64; 2],
    /// Cross-track start offset.
    pub y0: [f64; 2],
    /// Vertical start offset.
    pub z0: [f64; 2],
    /// Along-track start velocity.
    pub vx0: [f64; 2],
    pub vy0: [f64; 2],
    pub vz0: [f64; 2],
    pub phi0_deg: [f64; 2],
    pub theta0_deg: [f64; 2],
    /// Start heading relative to the approach direction.
    pub psi0_deg: [f64; 2],
    pub p0: [f64; 2],
    pub q0: [f64; 2],
    pub r0: [f64; 2],
    /// Initial rotor speeds, RPM; `None` samples the model's full range.
    pub omega0: Option<[f64; 2]>,
    /// Constant external moment about the body x and y axes.
    pub m_ext_xy: [f64; 2],
    /// Constant external moment about the body z axis.
    pub m_ext_z: [f64; 2],
}

impl Default for SamplingBounds {
    fn default() -> Self {
        Self {
            x0: [-5.0, -2.0],
            y0: [-1.0, 1.0],
            z0: [-0.5, 0.5],
            vx0: [-0.5, 5.0],
            vy0: [-3.0, 3.0],
            vz0: [-1.0, 1.0],
            phi0_deg: [-40.0, 40.0],
            theta0_deg: [-40.0, 40.0],
            psi0_deg: [-60.0, 60.0],
            p0: [-1.0, 1.0],
            q0: [-1.0, 1.0],
            r0: [-1.0, 1.0],
            omega0: None,
            m_ext_xy: [-0.04, 0.04],
            m_ext_z: [-0.01, 0.01],
        }
    }
}

impl SamplingBounds {
    /// Checks ordering and the pitch-singularity margin.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |reason: String| Err(DatasetError::InvalidConfig { reason });
        let ranges: [(&str, &[f64; 2]); 14] = [
            ("x0", &self.x0),
            ("y0", &self.y0),
            ("z0", &self.z0),
            ("vx0", &self.vx0),
            ("vy0", &self.vy0),
            ("vz0", &self.vz0),
            ("phi0_deg", &self.phi0_deg),
            ("theta0_deg", &self.theta0_deg),
            ("psi0_deg", &self.psi0_deg),
            ("p0", &self.p0),
            ("q0", &self.q0),
            ("r0", &self.r0),
            ("m_ext_xy", &self.m_ext_xy),
            ("m_ext_z", &self.m_ext_z),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(format!("bound {name} = [{lo}, {hi}] is not an ordered range"));
            }
        }
        if self.theta0_deg[0] <= -90.0 || self.theta0_deg[1] >= 90.0 {
            return bad(format!(
                "pitch bounds [{}, {}] deg reach the attitude singularity",
                self.theta0_deg[0], self.theta0_deg[1]
            ));
        }
        if let Some([lo, hi]) = self.omega0 {
            if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
                return bad(format!("omega0 = [{lo}, {hi}] is not an ordered RPM range"));
            }
        }
        Ok(())
    }
}

/// Placement rule for the intermediate gate relative to the final gate (the
/// exit leg runs from the intermediate gate along +x to the final gate at
/// the origin).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaypointPlacement {
    /// Gate on the exit-leg axis at one of the listed distances; the
    /// network extension is that distance (arity 1).
    DistanceSet(Vec<f64>),
    /// Gate drawn from an axis-aligned square of side `side` centered
    /// `center_distance` before the final gate, at the same altitude; the
    /// extension is the planar offset (arity 2).
    PlanarSquare { center_distance: f64, side: f64 },
    /// Gate drawn from a 3-D box around `center`; the extension is the full
    /// offset (arity 3).
    OffsetBox { center: [f64; 3], half_extent: [f64; 3] },
}

impl WaypointPlacement {
    /// Network inputs contributed by this placement.
    pub fn arity(&self) -> usize {
        match self {
            WaypointPlacement::DistanceSet(_) => 1,
            WaypointPlacement::PlanarSquare { .. } => 2,
            WaypointPlacement::OffsetBox { .. } => 3,
        }
    }
}

/// Geometry of consecutive-gate training problems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsecutiveGeometry {
    pub placement: WaypointPlacement,
    /// Yaw of the approach direction into the intermediate gate, measured
    /// from the exit leg, rad. The default quarter turn makes every sampled
    /// problem one 90-degree corner.
    #[serde(default = "default_approach_yaw")]
    pub approach_yaw: f64,
    /// Bound on squared position (m^2) plus squared heading (rad^2)
    /// deviation at the gate.
    #[serde(default = "default_gate_threshold")]
    pub threshold: f64,
    /// Heading enforced inside the gate sphere, rad.
    #[serde(default = "default_gate_heading")]
    pub heading: f64,
}

fn default_approach_yaw() -> f64 {
    FRAC_PI_2
}

fn default_gate_threshold() -> f64 {
    0.2
}

fn default_gate_heading() -> f64 {
    FRAC_PI_4
}

/// Full recipe for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub variant: Variant,
    /// Cost blend of the solved problems.
    pub epsilon: f64,
    pub n_trajectories: usize,
    /// Collocation segments per solve.
    #[serde(default = "default_segments")]
    pub n_segments: usize,
    /// Records taken per trajectory; `None` uses every collocation node.
    #[serde(default)]
    pub samples_per_traj: Option<usize>,
    #[serde(default)]
    pub bounds: SamplingBounds,
    #[serde(default)]
    pub params: ModelParams,
    /// Rotor-ceiling range sampled per trajectory (adaptive variant only).
    #[serde(default)]
    pub omega_max_range: Option<[f64; 2]>,
    /// Intermediate-gate geometry (waypoint-relative variant only).
    #[serde(default)]
    pub consecutive: Option<ConsecutiveGeometry>,
    /// Heading enforced at the final gate, rad.
    #[serde(default = "default_gate_heading")]
    pub final_heading: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_segments() -> usize {
    60
}

impl DatasetConfig {
    /// Checks the config invariants, including variant/extras coherence.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |reason: String| Err(DatasetError::InvalidConfig { reason });
        self.variant.validate()?;
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon {} outside [0, 1]", self.epsilon));
        }
        if self.n_trajectories == 0 {
            return bad("n_trajectories must be positive".into());
        }
        if let Some(s) = self.samples_per_traj {
            if s < 2 {
                return bad(format!("samples_per_traj {s} must be at least 2"));
            }
        }
        self.bounds.validate()?;
        self.params.validate().map_err(|e| DatasetError::InvalidConfig {
            reason: e.to_string(),
        })?;
        match (self.variant, &self.omega_max_range) {
            (Variant::AdaptiveLimit, None) => {
                return bad("adaptive_limit variant needs omega_max_range".into());
            }
            (Variant::AdaptiveLimit, Some([lo, hi])) => {
                if !(self.params.omega_min < *lo && lo <= hi) {
                    return bad(format!(
                        "omega_max_range [{lo}, {hi}] must sit above omega_min {}",
                        self.params.omega_min
                    ));
                }
            }
            (_, Some(_)) => {
                return bad("omega_max_range is only meaningful for adaptive_limit".into());
            }
            _ => {}
        }
        match (self.variant, &self.consecutive) {
            (Variant::WaypointRelative(k), Some(geo)) => {
                if geo.placement.arity() != k {
                    return bad(format!(
                        "placement contributes {} inputs but the variant expects {k}",
                        geo.placement.arity()
                    ));
                }
                if !(geo.threshold > 0.0) {
                    return bad(format!("gate threshold {} must be positive", geo.threshold));
                }
                if let WaypointPlacement::DistanceSet(set) = &geo.placement {
                    if set.is_empty() || set.iter().any(|d| !(*d > 0.0)) {
                        return bad("distance set must be non-empty and positive".into());
                    }
                }
            }
            (Variant::WaypointRelative(_), None) => {
                return bad("waypoint_relative variant needs consecutive geometry".into());
            }
            (_, Some(_)) => {
                return bad("consecutive geometry is only meaningful for waypoint_relative".into());
            }
            _ => {}
        }
        Ok(())
    }

    /// Records taken per solved trajectory.
    pub fn samples(&self) -> usize {
        self.samples_per_traj.unwrap_or(self.n_segments + 1)
    }
}

/// One sampled problem plus the per-trajectory network inputs it contributes.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledOcp {
    pub spec: OcpSpec,
    /// Variant extension values shared by every record of this trajectory.
    pub extension: Vec<f64>,
}

/// Draws the `index`-th problem of a dataset. Deterministic: the draw stream
/// is derived from the config seed and the index alone, and the draw order
/// is fixed (ceiling, gate geometry, then the state box in field order).
pub fn sample_ocp(config: &DatasetConfig, index: u64) -> SampledOcp {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, index));
    let mut params = config.params;
    let mut extension = Vec::new();

    if let Some([lo, hi]) = config.omega_max_range {
        params.omega_max = rng.random_range(lo..=hi);
        extension.push(params.omega_max);
    }

    let (intermediate, approach_yaw, anchor) = match &config.consecutive {
        Some(geo) => {
            let position = match &geo.placement {
                WaypointPlacement::DistanceSet(set) => {
                    let d = set[rng.random_range(0..set.len())];
                    extension.push(d);
                    Vector3::new(-d, 0.0, 0.0)
                }
                WaypointPlacement::PlanarSquare { center_distance, side } => {
                    let half = side / 2.0;
                    let x = -center_distance + rng.random_range(-half..=half);
                    let y = rng.random_range(-half..=half);
                    extension.push(x);
                    extension.push(y);
                    Vector3::new(x, y, 0.0)
                }
                WaypointPlacement::OffsetBox { center, half_extent } => {
                    let mut p = Vector3::zeros();
                    for i in 0..3 {
                        p[i] = center[i] + rng.random_range(-half_extent[i]..=half_extent[i]);
                        extension.push(p[i]);
                    }
                    p
                }
            };
            let wp = IntermediateWaypoint {
                position,
                heading: geo.heading,
                threshold: geo.threshold,
                node: None,
            };
            (Some(wp), geo.approach_yaw, position)
        }
        None => (None, 0.0, Vector3::zeros()),
    };

    let b = &config.bounds;
    let draw = |rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]| {
        if lo == hi {
            lo
        } else {
            rng.random_range(lo..hi)
        }
    };
    let box_pos = Vector3::new(draw(&mut rng, b.x0), draw(&mut rng, b.y0), draw(&mut rng, b.z0));
    let box_vel =
        Vector3::new(draw(&mut rng, b.vx0), draw(&mut rng, b.vy0), draw(&mut rng, b.vz0));
    let deg = std::f64::consts::PI / 180.0;
    let roll = draw(&mut rng, b.phi0_deg) * deg;
    let pitch = draw(&mut rng, b.theta0_deg) * deg;
    let yaw_rel = draw(&mut rng, b.psi0_deg) * deg;
    let rates = Vector3::new(draw(&mut rng, b.p0), draw(&mut rng, b.q0), draw(&mut rng, b.r0));
    let omega_range = b.omega0.unwrap_or([params.omega_min, params.omega_max]);
    let rotors = nalgebra::Vector4::from_fn(|_, _| draw(&mut rng, omega_range));
    let m_ext = Vector3::new(
        draw(&mut rng, b.m_ext_xy),
        draw(&mut rng, b.m_ext_xy),
        draw(&mut rng, b.m_ext_z),
    );

    // Rotate the approach box about the anchor gate into problem coordinates.
    let (sin_a, cos_a) = approach_yaw.sin_cos();
    let rotate = |v: &Vector3<f64>| {
        Vector3::new(cos_a * v[0] - sin_a * v[1], sin_a * v[0] + cos_a * v[1], v[2])
    };
    let x0 = QuadState {
        position: anchor + rotate(&box_pos),
        velocity: rotate(&box_vel),
        attitude: Vector3::new(roll, pitch, approach_yaw + yaw_rel),
        body_rates: rates,
        rotor_speeds: rotors,
        moment_disturbance: m_ext,
    };

    // Cap the free final time at roughly 3x the path-length heuristic: at
    // pure-energy blends, uncapped problems admit arbitrarily slow
    // low-throttle glides of equal cost that look nothing like the fast
    // flight the records are meant to teach.
    let path = match &intermediate {
        Some(wp) => (wp.position - x0.position).norm() + wp.position.norm(),
        None => x0.position.norm(),
    };
    let spec = OcpSpec {
        epsilon: config.epsilon,
        x0,
        final_conditions: FinalConditions::forward_flight(Vector3::zeros(), config.final_heading),
        params,
        m_ext,
        intermediate,
        n_segments: config.n_segments,
        t_max: Some(path.max(4.0)),
    };
    SampledOcp { spec, extension }
}

/// One (feature, throttle) pair with its trajectory/node origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub trajectory: u32,
    pub node: u32,
    pub features: Vec<f64>,
    pub label: [f64; 4],
}

/// Per-feature mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Generation metadata carried inside the dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: DatasetConfig,
    /// Trajectory indices whose solves failed (skipped, not retried).
    pub failed: Vec<u32>,
    pub attempted: usize,
}

/// A generated imitation-learning dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub variant: Variant,
    pub records: Vec<Record>,
    /// Statistics over all records (training recomputes its own split).
    pub stats: FeatureStats,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct trajectory indices present, ascending.
    pub fn trajectory_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.records.iter().map(|r| r.trajectory).collect();
        ids.dedup();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Packs the records into dense feature/label matrices.
    pub fn to_training_set(&self) -> TrainingSet {
        let arity = self.variant.arity();
        let mut features = Array2::zeros((self.len(), arity));
        let mut labels = Array2::zeros((self.len(), 4));
        for (i, rec) in self.records.iter().enumerate() {
            for (j, v) in rec.features.iter().enumerate() {
                features[[i, j]] = *v;
            }
            for j in 0..4 {
                labels[[i, j]] = rec.label[j];
            }
        }
        TrainingSet { features, labels }
    }

    /// Column headers for the CSV export, matching the feature layout.
    pub fn feature_names(&self) -> Vec<String> {
        let mut names: Vec<String> = [
            "dx", "dy", "dz", "vx", "vy", "vz", "phi", "theta", "psi", "p", "q", "r", "w1",
            "w2", "w3", "w4", "mx", "my", "mz",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        match self.variant {
            Variant::Base => {}
            Variant::AdaptiveLimit => names.push("w_max".into()),
            Variant::WaypointRelative(k) => {
                for i in 1..=k {
                    names.push(format!("wp_rel_{i}"));
                }
            }
        }
        names
    }

    /// Writes the dataset as a versioned container file.
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let arity = self.variant.arity();
        let header = DatasetHeader {
            variant: self.variant,
            arity,
            n_records: self.len(),
            stats: self.stats.clone(),
            provenance: self.provenance.clone(),
        };
        let stride = 2 + arity + 4;
        let mut payload = Vec::with_capacity(self.len() * stride);
        for rec in &self.records {
            payload.push(rec.trajectory as f64);
            payload.push(rec.node as f64);
            payload.extend_from_slice(&rec.features);
            payload.extend_from_slice(&rec.label);
        }
        io::write_container(path, &header, &payload)?;
        Ok(())
    }

    /// Reads a dataset written by [`Dataset::save`].
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let (header, payload): (DatasetHeader, Vec<f64>) = io::read_container(path)?;
        let arity = header.variant.arity();
        let stride = 2 + arity + 4;
        if header.arity != arity || payload.len() != header.n_records * stride {
            return Err(DatasetError::InvalidConfig {
                reason: format!(
                    "payload length {} inconsistent with {} records of arity {arity}",
                    payload.len(),
                    header.n_records
                ),
            });
        }
        let mut records = Vec::with_capacity(header.n_records);
        for row in payload.chunks_exact(stride) {
            records.push(Record {
                trajectory: row[0] as u32,
                node: row[1] as u32,
                features: row[2..2 + arity].to_vec(),
                label: [row[stride - 4], row[stride - 3], row[stride - 2], row[stride - 1]],
            });
        }
        Ok(Self {
            variant: header.variant,
            records,
            stats: header.stats,
            provenance: header.provenance,
        })
    }

    /// Writes the records as CSV with a header row.
    pub fn export_csv(&self, path: &Path) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["trajectory".to_string(), "node".to_string()];
        header.extend(self.feature_names());
        header.extend(["u1", "u2", "u3", "u4"].iter().map(|s| s.to_string()));
        w.write_record(&header)?;
        for rec in &self.records {
            let mut row = vec![rec.trajectory.to_string(), rec.node.to_string()];
            row.extend(rec.features.iter().map(|v| format!("{v}")));
            row.extend(rec.label.iter().map(|v| format!("{v}")));
            w.write_record(&row)?;
        }
        w.flush().map_err(io::IoError::from)?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    #[serde(flatten)]
    variant: Variant,
    arity: usize,
    n_records: usize,
    stats: FeatureStats,
    provenance: Provenance,
}

impl ArtifactHeader for DatasetHeader {
    const KIND: &'static str = "dataset";
}

/// Solves one sampled problem. Near-pure-time targets go through a mid-blend
/// continuation stage, which conditions the strongly saturated final solve.
/// A failed route falls back to a full blend continuation from the
/// energy-optimal end.
fn solve_sampled(spec: &OcpSpec) -> Result<Trajectory, TrajoptError> {
    let at_blend = |eps: f64| {
        let mut staged = spec.clone();
        staged.epsilon = eps;
        staged
    };
    let preferred = if spec.epsilon < 0.3 {
        solve_ocp(&at_blend(0.5), None).and_then(|warm| solve_ocp(spec, Some(&warm)))
    } else {
        solve_ocp(spec, None)
    };
    let first = match preferred {
        Ok(traj) => return Ok(traj),
        Err(e) => e,
    };
    let mut warm: Option<Trajectory> = None;
    for eps in [1.0, 0.5] {
        if eps <= spec.epsilon + 1e-9 {
            continue;
        }
        match solve_ocp(&at_blend(eps), warm.as_ref()) {
            Ok(t) => warm = Some(t),
            Err(_) => return Err(first),
        }
    }
    if warm.is_none() {
        return Err(first);
    }
    solve_ocp(spec, warm.as_ref()).map_err(|_| first)
}

/// Extracts `samples` records from one solved trajectory: node values when
/// the counts line up, otherwise the collocation interpolant at uniform
/// fractions of the final time.
fn build_records(
    index: u32,
    traj: &Trajectory,
    samples: usize,
    variant: Variant,
    extension: &[f64],
) -> Result<Vec<Record>, DatasetError> {
    let target = traj.spec.final_conditions.position;
    let nodes = traj.states.len();
    let mut records = Vec::with_capacity(samples);
    for j in 0..samples {
        let (state, control) = if samples == nodes {
            (traj.states[j], traj.controls[j])
        } else {
            let t = traj.final_time * j as f64 / (samples - 1) as f64;
            sample_solution(traj, t).map_err(|e| DatasetError::InvalidConfig {
                reason: format!("trajectory {index} hit a singular state: {e}"),
            })?
        };
        let features = assemble_features(variant, &state, &target, extension)?;
        let u = control.as_array();
        records.push(Record {
            trajectory: index,
            node: j as u32,
            features,
            label: std::array::from_fn(|i| u[i].clamp(0.0, 1.0)),
        });
    }
    Ok(records)
}

/// Samples, solves, and packs a whole dataset. Solves run in parallel;
/// record order and content are independent of the thread schedule. Fails
/// when more than 20% of the solves fail; individual failures are skipped
/// and listed in the provenance.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset, DatasetError> {
    config.validate()?;
    let samples = config.samples();
    let outcomes: Vec<Result<Vec<Record>, u32>> = (0..config.n_trajectories)
        .into_par_iter()
        .map(|i| {
            let sampled = sample_ocp(config, i as u64);
            match solve_sampled(&sampled.spec) {
                Ok(traj) => build_records(
                    i as u32,
                    &traj,
                    samples,
                    config.variant,
                    &sampled.extension,
                )
                .map_err(|_| i as u32),
                Err(_) => Err(i as u32),
            }
        })
        .collect();

    let mut records = Vec::new();
    let mut failed = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(mut recs) => records.append(&mut recs),
            Err(i) => failed.push(i),
        }
    }
    if failed.len() * 5 > config.n_trajectories {
        return Err(DatasetError::TooManyFailures {
            failed: failed.len(),
            attempted: config.n_trajectories,
        });
    }
    if records.is_empty() {
        return Err(DatasetError::Empty);
    }
    let stats = record_stats(&records, config.variant.arity());
    Ok(Dataset {
        variant: config.variant,
        records,
        stats,
        provenance: Provenance {
            config: config.clone(),
            failed,
            attempted: config.n_trajectories,
        },
    })
}

/// Splits a dataset at trajectory granularity: no trajectory contributes to
/// both sides. Deterministic under `seed`.
pub fn split_train_val(
    dataset: &Dataset,
    fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DatasetError> {
    if dataset.is_empty() {
        return Err(DatasetError::Empty);
    }
    if !(0.0 < fraction && fraction < 1.0) {
        return Err(DatasetError::InvalidConfig {
            reason: format!("split fraction {fraction} outside (0, 1)"),
        });
    }
    let mut ids = dataset.trajectory_ids();
    if ids.len() < 2 {
        return Err(DatasetError::InvalidConfig {
            reason: "need at least 2 trajectories for a disjoint split".into(),
        });
    }
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_train = ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len() - 1);
    let train_ids: std::collections::BTreeSet<u32> = ids[..n_train].iter().copied().collect();

    let pick = |keep: bool| -> Dataset {
        let records: Vec<Record> = dataset
            .records
            .iter()
            .filter(|r| train_ids.contains(&r.trajectory) == keep)
            .cloned()
            .collect();
        let stats = record_stats(&records, dataset.variant.arity());
        Dataset {
            variant: dataset.variant,
            records,
            stats,
            provenance: dataset.provenance.clone(),
        }
    };
    Ok((pick(true), pick(false)))
}

fn record_stats(records: &[Record], arity: usize) -> FeatureStats {
    let n = records.len().max(1) as f64;
    let mut mean = vec![0.0; arity];
    for rec in records {
        for (m, v) in mean.iter_mut().zip(&rec.features) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; arity];
    for rec in records {
        for (i, v) in rec.features.iter().enumerate() {
            var[i] += (v - mean[i]).powi(2) / n;
        }
    }
    FeatureStats { mean, std: var.into_iter().map(f64::sqrt).collect() }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config(n: usize) -> DatasetConfig {
        DatasetConfig {
            variant: Variant::Base,
            epsilon: 1.0,
            n_trajectories: n,
            n_segments: 20,
            samples_per_traj: None,
            bounds: SamplingBounds::default(),
            params: ModelParams::default(),
            omega_max_range: None,
            consecutive: None,
            final_heading: FRAC_PI_4,
            seed: 7,
        }
    }

    #[test]
    fn sampling_is_deterministic_and_in_bounds() {
        let config = base_config(1);
        let a = sample_ocp(&config, 3);
        let b = sample_ocp(&config, 3);
        assert_eq!(a, b);
        let c = sample_ocp(&config, 4);
        assert_ne!(a.spec.x0, c.spec.x0);

        for i in 0..200 {
            let s = sample_ocp(&config, i).spec;
            let p = s.x0.position;
            assert!((-5.0..=-2.0).contains(&p[0]), "x0 {p:?}");
            assert!((-1.0..=1.0).contains(&p[1]));
            assert!((-0.5..=0.5).contains(&p[2]));
            let v = s.x0.velocity;
            assert!((-0.5..=5.0).contains(&v[0]));
            let att = s.x0.attitude;
            assert!(att[0].abs() <= 40.0_f64.to_radians() + 1e-12);
            assert!(att[2].abs() <= 60.0_f64.to_radians() + 1e-12);
            for w in s.x0.rotor_speeds.iter() {
                assert!((3000.0..=12000.0).contains(w));
            }
            assert!(s.x0.moment_disturbance[0].abs() <= 0.04);
            assert!(s.x0.moment_disturbance[2].abs() <= 0.01);
            assert_eq!(s.x0.moment_disturbance, s.m_ext);
        }
    }

    #[test]
    fn coverage_spans_the_bounds() {
        let config = base_config(1);
        let mut min_x = f64::INFINITY;
        let mut max_x = f64::NEG_INFINITY;
        let mut min_vx = f64::INFINITY;
        let mut max_vx = f64::NEG_INFINITY;
        for i in 0..10_000 {
            let s = sample_ocp(&config, i).spec;
            min_x = min_x.min(s.x0.position[0]);
            max_x = max_x.max(s.x0.position[0]);
            min_vx = min_vx.min(s.x0.velocity[0]);
            max_vx = max_vx.max(s.x0.velocity[0]);
        }
        // Empirical extremes must cover at least 95% of each range.
        assert!(min_x < -5.0 + 0.05 * 3.0 && max_x > -2.0 - 0.05 * 3.0);
        assert!(min_vx < -0.5 + 0.05 * 5.5 && max_vx > 5.0 - 0.05 * 5.5);
    }

    #[test]
    fn consecutive_sampling_places_the_gate_and_rotates_the_box() {
        let mut config = base_config(1);
        config.variant = Variant::WaypointRelative(1);
        config.consecutive = Some(ConsecutiveGeometry {
            placement: WaypointPlacement::DistanceSet(vec![3.0, 4.0]),
            approach_yaw: default_approach_yaw(),
            threshold: 0.2,
            heading: FRAC_PI_4,
        });
        let mut seen3 = false;
        let mut seen4 = false;
        for i in 0..100 {
            let s = sample_ocp(&config, i);
            let d = s.extension[0];
            assert!(d == 3.0 || d == 4.0);
            seen3 |= d == 3.0;
            seen4 |= d == 4.0;
            let wp = s.spec.intermediate.expect("gate present");
            assert_eq!(wp.position, Vector3::new(-d, 0.0, 0.0));
            // Box rotated a quarter turn: along-track spread appears in y.
            let p = s.spec.x0.position;
            assert!((-d - 1.0..=-d + 1.0).contains(&p[0]), "x {p:?}");
            assert!((-5.0..=-2.0).contains(&p[1]), "y {p:?}");
            let psi = s.spec.x0.attitude[2];
            assert!((FRAC_PI_2 - 1.1..=FRAC_PI_2 + 1.1).contains(&psi));
        }
        assert!(seen3 && seen4, "both gate distances must occur");
    }

    #[test]
    fn adaptive_sampling_draws_ceiling_and_respects_it() {
        let mut config = base_config(1);
        config.variant = Variant::AdaptiveLimit;
        config.omega_max_range = Some([10_000.0, 11_000.0]);
        for i in 0..100 {
            let s = sample_ocp(&config, i);
            let ceiling = s.extension[0];
            assert!((10_000.0..=11_000.0).contains(&ceiling));
            assert_eq!(s.spec.params.omega_max, ceiling);
            for w in s.spec.x0.rotor_speeds.iter() {
                assert!(*w <= ceiling + 1e-9, "rotor {w} above sampled ceiling {ceiling}");
            }
        }
    }

    #[test]
    fn config_validation_rejects_incoherent_variants() {
        let mut config = base_config(1);
        config.variant = Variant::AdaptiveLimit;
        assert!(matches!(
            config.validate(),
            Err(DatasetError::InvalidConfig { .. })
        ));
        config.variant = Variant::Base;
        config.omega_max_range = Some([10_000.0, 11_000.0]);
        assert!(config.validate().is_err());
        config.omega_max_range = None;
        config.bounds.theta0_deg = [-95.0, 40.0];
        assert!(config.validate().is_err());
    }
}
