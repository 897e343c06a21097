//! Rigid-body and rotor model of the quadcopter.
//!
//! Conventions: world frame is x-forward, z **down** (gravity is `+g` along
//! world z), body attitude is ZYX Euler angles `lambda = [phi, theta, psi]`
//! with positive yaw turning right, rotor speeds are in RPM, throttle commands
//! `u` are normalised to `[0, 1]` per rotor.
//!
//! The 19-dim state is `[p, v, lambda, Omega, omega, M_ext]`:
//! position and velocity in the world frame, Euler angles, body rates,
//! the four rotor speeds, and a constant external moment acting on the body
//! (`dM_ext/dt = 0`), which doubles as a disturbance-estimation state.
//!
//! All equations are written once, generically over [`Real`], so the exact
//! same code path produces values, Jacobians ([`Dual`]) and weighted Hessians
//! ([`Taylor2`]) for the trajectory optimizer.
//!
//! [`Dual`]: crate::ad::Dual
//! [`Taylor2`]: crate::ad::Taylor2

use crate::ad::{Dual, Real, Taylor2};
use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Full state dimension (including the constant external moment).
pub const STATE_DIM: usize = 19;
/// Number of rotor throttle commands.
pub const CONTROL_DIM: usize = 4;

/// Active state dimension once the constant `M_ext` rows are treated as
/// parameters (used by the transcription).
pub(crate) const NX: usize = 16;
/// Differentiation directions for one dynamics evaluation: 16 states + 4 controls.
pub(crate) const NJ: usize = 20;
/// Packed upper-triangle length for `NJ` directions.
pub(crate) const NH: usize = NJ * (NJ + 1) / 2;

/// Attitudes with `|cos(theta)|` below this are rejected as singular.
pub const GIMBAL_EPS: f64 = 1e-9;

/// Errors from model evaluation or parameter validation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    /// The Euler-angle kinematics are singular at `|theta| = 90 deg`.
    #[error("attitude singular: |cos(theta)| < 1e-9 at theta = {theta} rad")]
    SingularAttitude { theta: f64 },
    #[error("model parameter `{name}` out of range: {value}")]
    InvalidParameter { name: &'static str, value: f64 },
}

/// Physical model coefficients.
///
/// Serialized with the same symbol names used in the coefficient table
/// (`k_x`, ..., `omega_max`); `g` is optional in JSON and defaults to 9.81.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub k_x: f64,
    pub k_y: f64,
    pub k_omega: f64,
    pub k_z: f64,
    pub k_h: f64,
    #[serde(rename = "I_x")]
    pub i_x: f64,
    #[serde(rename = "I_y")]
    pub i_y: f64,
    #[serde(rename = "I_z")]
    pub i_z: f64,
    pub k_p: f64,
    pub k_pv: f64,
    pub k_q: f64,
    pub k_qv: f64,
    pub k_r1: f64,
    pub k_r2: f64,
    pub k_rr: f64,
    /// Rotor first-order lag time constant [s].
    pub tau: f64,
    /// Idle rotor speed [RPM]; commanded at `u = 0`.
    pub omega_min: f64,
    /// Full-throttle rotor speed [RPM]; commanded at `u = 1`.
    pub omega_max: f64,
    #[serde(default = "default_gravity")]
    pub g: f64,
}

fn default_gravity() -> f64 {
    9.81
}

impl Default for ModelParams {
    /// Coefficients identified for the Parrot Bebop airframe.
    fn default() -> Self {
        Self {
            k_x: 1.08e-05,
            k_y: 9.65e-06,
            k_omega: 4.36e-08,
            k_z: 2.79e-05,
            k_h: 6.26e-02,
            i_x: 0.000906,
            i_y: 0.001242,
            i_z: 0.002054,
            k_p: 1.41e-09,
            k_pv: -7.97e-03,
            k_q: 1.22e-09,
            k_qv: 1.29e-02,
            k_r1: 2.57e-06,
            k_r2: 4.11e-07,
            k_rr: 8.13e-04,
            tau: 0.03,
            omega_min: 3000.0,
            omega_max: 12000.0,
            g: 9.81,
        }
    }
}

impl ModelParams {
    /// Rotor speed at which four rotors exactly cancel gravity: `sqrt(g / (4 k_omega))`.
    pub fn hover_rpm(&self) -> f64 {
        (self.g / (4.0 * self.k_omega)).sqrt()
    }

    /// Throttle that commands [`hover_rpm`](Self::hover_rpm) in steady state.
    pub fn hover_throttle(&self) -> f64 {
        (self.hover_rpm() - self.omega_min) / (self.omega_max - self.omega_min)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let positive: [(&'static str, f64); 7] = [
            ("k_omega", self.k_omega),
            ("I_x", self.i_x),
            ("I_y", self.i_y),
            ("I_z", self.i_z),
            ("tau", self.tau),
            ("g", self.g),
            ("omega_max", self.omega_max),
        ];
        for (name, value) in positive {
            if !(value > 0.0) || !value.is_finite() {
                return Err(DynamicsError::InvalidParameter { name, value });
            }
        }
        if !(self.omega_min >= 0.0) {
            return Err(DynamicsError::InvalidParameter { name: "omega_min", value: self.omega_min });
        }
        if self.omega_max <= self.omega_min {
            return Err(DynamicsError::InvalidParameter { name: "omega_max", value: self.omega_max });
        }
        Ok(())
    }
}

/// Full vehicle state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadState {
    /// World-frame position [m].
    pub position: Vector3<f64>,
    /// World-frame velocity [m/s].
    pub velocity: Vector3<f64>,
    /// ZYX Euler angles `[phi, theta, psi]` [rad].
    pub attitude: Vector3<f64>,
    /// Body rates `[p, q, r]` [rad/s].
    pub body_rates: Vector3<f64>,
    /// Rotor speeds [RPM].
    pub rotor_speeds: Vector4<f64>,
    /// Constant external moment on the body [N m].
    #[serde(default = "Vector3::zeros")]
    pub moment_disturbance: Vector3<f64>,
}

impl QuadState {
    /// Flat layout `[p, v, lambda, Omega, omega, M_ext]` used by logs and CSVs.
    pub fn as_array(&self) -> [f64; STATE_DIM] {
        let mut a = [0.0; STATE_DIM];
        a[0..3].copy_from_slice(self.position.as_slice());
        a[3..6].copy_from_slice(self.velocity.as_slice());
        a[6..9].copy_from_slice(self.attitude.as_slice());
        a[9..12].copy_from_slice(self.body_rates.as_slice());
        a[12..16].copy_from_slice(self.rotor_speeds.as_slice());
        a[16..19].copy_from_slice(self.moment_disturbance.as_slice());
        a
    }

    pub fn from_array(a: &[f64; STATE_DIM]) -> Self {
        Self {
            position: Vector3::new(a[0], a[1], a[2]),
            velocity: Vector3::new(a[3], a[4], a[5]),
            attitude: Vector3::new(a[6], a[7], a[8]),
            body_rates: Vector3::new(a[9], a[10], a[11]),
            rotor_speeds: Vector4::new(a[12], a[13], a[14], a[15]),
            moment_disturbance: Vector3::new(a[16], a[17], a[18]),
        }
    }

    /// Steady hover at `position` with heading `psi` [rad].
    pub fn hover_at(position: Vector3<f64>, psi: f64, params: &ModelParams) -> Self {
        Self {
            position,
            velocity: Vector3::zeros(),
            attitude: Vector3::new(0.0, 0.0, psi),
            body_rates: Vector3::zeros(),
            rotor_speeds: Vector4::repeat(params.hover_rpm()),
            moment_disturbance: Vector3::zeros(),
        }
    }
}

/// Normalised rotor throttle commands, one per rotor, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput(pub Vector4<f64>);

impl ControlInput {
    pub fn new(u1: f64, u2: f64, u3: f64, u4: f64) -> Self {
        Self(Vector4::new(u1, u2, u3, u4))
    }

    pub fn uniform(u: f64) -> Self {
        Self(Vector4::repeat(u))
    }

    pub fn as_array(&self) -> [f64; CONTROL_DIM] {
        [self.0[0], self.0[1], self.0[2], self.0[3]]
    }

    pub fn from_array(a: &[f64; CONTROL_DIM]) -> Self {
        Self(Vector4::new(a[0], a[1], a[2], a[3]))
    }

    /// Largest distance outside `[0, 1]` over the four commands (0 when feasible).
    pub fn bound_violation(&self) -> f64 {
        self.0.iter().map(|&u| (-u).max(u - 1.0).max(0.0)).fold(0.0, f64::max)
    }

    /// Componentwise clamp into `[0, 1]`.
    pub fn clamped(&self) -> Self {
        Self(self.0.map(|u| u.clamp(0.0, 1.0)))
    }
}

/// Rotation matrix rows for ZYX Euler angles, from precomputed sines/cosines.
#[inline]
fn rot_rows<S: Real>(sph: S, cph: S, sth: S, cth: S, sps: S, cps: S) -> [[S; 3]; 3] {
    [
        [cth * cps, sph * sth * cps - cph * sps, cph * sth * cps + sph * sps],
        [cth * sps, cph * cps + sph * sth * sps, cph * sth * sps - sph * cps],
        [-sth, sph * cth, cph * cth],
    ]
}

/// Body-frame aerodynamic specific force `[F_x, F_y, F_z]` from body-frame
/// velocity and rotor speeds. `F_z` includes rotor thrust.
#[inline]
fn aero_force_body<S: Real>(vb: &[S; 3], w: &[S; 4], p: &ModelParams) -> [S; 3] {
    let sw = w[0] + w[1] + w[2] + w[3];
    let sw2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2] + w[3] * w[3];
    [
        vb[0] * sw * (-p.k_x),
        vb[1] * sw * (-p.k_y),
        sw2 * (-p.k_omega) - vb[2] * sw * p.k_z - (vb[0] * vb[0] + vb[1] * vb[1]) * p.k_h,
    ]
}

/// Body-frame moments from rotor speeds and accelerations, in-plane velocity,
/// and yaw rate.
#[inline]
fn aero_moment_body<S: Real>(vb: &[S; 3], w: &[S; 4], wd: &[S; 4], yaw_rate: S, p: &ModelParams) -> [S; 3] {
    [
        (w[0] * w[0] - w[1] * w[1] - w[2] * w[2] + w[3] * w[3]) * p.k_p + vb[1] * p.k_pv,
        (w[0] * w[0] + w[1] * w[1] - w[2] * w[2] - w[3] * w[3]) * p.k_q + vb[0] * p.k_qv,
        (w[1] + w[3] - w[0] - w[2]) * p.k_r1 + (wd[1] + wd[3] - wd[0] - wd[2]) * p.k_r2
            - yaw_rate * p.k_rr,
    ]
}

/// First-order rotor lag toward the commanded speed, in RPM/s.
#[inline]
fn rotor_accel<S: Real>(w: &[S; 4], u: &[S; 4], p: &ModelParams) -> [S; 4] {
    let span = p.omega_max - p.omega_min;
    let inv_tau = 1.0 / p.tau;
    [
        (u[0] * span + p.omega_min - w[0]) * inv_tau,
        (u[1] * span + p.omega_min - w[1]) * inv_tau,
        (u[2] * span + p.omega_min - w[2]) * inv_tau,
        (u[3] * span + p.omega_min - w[3]) * inv_tau,
    ]
}

/// Time derivative of the 16 active states `[p, v, lambda, Omega, omega]`
/// with `M_ext` supplied as a constant parameter.
pub(crate) fn eom_reduced<S: Real>(
    x: &[S; NX],
    u: &[S; CONTROL_DIM],
    m_ext: [f64; 3],
    p: &ModelParams,
) -> Result<[S; NX], DynamicsError> {
    let v = [x[3], x[4], x[5]];
    let (phi, theta, psi) = (x[6], x[7], x[8]);
    let (rate_p, rate_q, rate_r) = (x[9], x[10], x[11]);
    let w = [x[12], x[13], x[14], x[15]];

    let (sph, cph) = (phi.sin(), phi.cos());
    let (sth, cth) = (theta.sin(), theta.cos());
    let (sps, cps) = (psi.sin(), psi.cos());
    if cth.value().abs() < GIMBAL_EPS {
        return Err(DynamicsError::SingularAttitude { theta: theta.value() });
    }

    let r = rot_rows(sph, cph, sth, cth, sps, cps);
    // Body-frame velocity: vb = R^T v.
    let vb = [
        r[0][0] * v[0] + r[1][0] * v[1] + r[2][0] * v[2],
        r[0][1] * v[0] + r[1][1] * v[1] + r[2][1] * v[2],
        r[0][2] * v[0] + r[1][2] * v[1] + r[2][2] * v[2],
    ];

    let f = aero_force_body(&vb, &w, p);
    let wd = rotor_accel(&w, u, p);
    let m = aero_moment_body(&vb, &w, &wd, rate_r, p);

    // v-dot = g e_z + R F.
    let vd = [
        r[0][0] * f[0] + r[0][1] * f[1] + r[0][2] * f[2],
        r[1][0] * f[0] + r[1][1] * f[1] + r[1][2] * f[2],
        r[2][0] * f[0] + r[2][1] * f[1] + r[2][2] * f[2] + p.g,
    ];

    // lambda-dot = Q(lambda) Omega.
    let tth = sth / cth;
    let ld = [
        rate_p + sph * tth * rate_q + cph * tth * rate_r,
        cph * rate_q - sph * rate_r,
        (sph * rate_q + cph * rate_r) / cth,
    ];

    // Omega-dot = I^-1 (-Omega x I Omega + M + M_ext); inertia is diagonal.
    let od = [
        (rate_q * rate_r * (p.i_y - p.i_z) + m[0] + m_ext[0]) * (1.0 / p.i_x),
        (rate_p * rate_r * (p.i_z - p.i_x) + m[1] + m_ext[1]) * (1.0 / p.i_y),
        (rate_p * rate_q * (p.i_x - p.i_y) + m[2] + m_ext[2]) * (1.0 / p.i_z),
    ];

    Ok([
        v[0], v[1], v[2], vd[0], vd[1], vd[2], ld[0], ld[1], ld[2], od[0], od[1], od[2], wd[0],
        wd[1], wd[2], wd[3],
    ])
}

/// Body-to-world rotation matrix `R(lambda)` for ZYX Euler angles.
pub fn rotation_body_to_world(attitude: &Vector3<f64>) -> Matrix3<f64> {
    let (sph, cph) = attitude[0].sin_cos();
    let (sth, cth) = attitude[1].sin_cos();
    let (sps, cps) = attitude[2].sin_cos();
    let r = rot_rows(sph, cph, sth, cth, sps, cps);
    Matrix3::new(
        r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
    )
}

/// Matrix `Q(lambda)` mapping body rates to Euler-angle rates,
/// `lambda-dot = Q(lambda) Omega`. Singular at `|theta| = 90 deg`.
pub fn euler_kinematics(attitude: &Vector3<f64>) -> Result<Matrix3<f64>, DynamicsError> {
    let (sph, cph) = attitude[0].sin_cos();
    let (sth, cth) = attitude[1].sin_cos();
    if cth.abs() < GIMBAL_EPS {
        return Err(DynamicsError::SingularAttitude { theta: attitude[1] });
    }
    let tth = sth / cth;
    Ok(Matrix3::new(
        1.0,
        sph * tth,
        cph * tth,
        0.0,
        cph,
        -sph,
        0.0,
        sph / cth,
        cph / cth,
    ))
}

/// Body-frame aerodynamic specific force (thrust plus drag terms).
pub fn aero_forces(state: &QuadState, params: &ModelParams) -> Vector3<f64> {
    let r = rotation_body_to_world(&state.attitude);
    let vb_v = r.transpose() * state.velocity;
    let vb = [vb_v[0], vb_v[1], vb_v[2]];
    let w = [
        state.rotor_speeds[0],
        state.rotor_speeds[1],
        state.rotor_speeds[2],
        state.rotor_speeds[3],
    ];
    let f = aero_force_body(&vb, &w, params);
    Vector3::new(f[0], f[1], f[2])
}

/// Body-frame moments given the current rotor accelerations [RPM/s].
pub fn aero_moments(
    state: &QuadState,
    rotor_accel: &Vector4<f64>,
    params: &ModelParams,
) -> Vector3<f64> {
    let r = rotation_body_to_world(&state.attitude);
    let vb_v = r.transpose() * state.velocity;
    let vb = [vb_v[0], vb_v[1], vb_v[2]];
    let w = [
        state.rotor_speeds[0],
        state.rotor_speeds[1],
        state.rotor_speeds[2],
        state.rotor_speeds[3],
    ];
    let wd = [rotor_accel[0], rotor_accel[1], rotor_accel[2], rotor_accel[3]];
    let m = aero_moment_body(&vb, &w, &wd, state.body_rates[2], params);
    Vector3::new(m[0], m[1], m[2])
}

/// Rotor speed derivatives [RPM/s] for throttle commands `u`.
pub fn rotor_dynamics(
    rotor_speeds: &Vector4<f64>,
    control: &ControlInput,
    params: &ModelParams,
) -> Vector4<f64> {
    let w = [rotor_speeds[0], rotor_speeds[1], rotor_speeds[2], rotor_speeds[3]];
    let u = control.as_array();
    let wd = rotor_accel(&w, &u, params);
    Vector4::new(wd[0], wd[1], wd[2], wd[3])
}

/// Full 19-dim state derivative; the `M_ext` rows are identically zero.
pub fn state_derivative(
    state: &QuadState,
    control: &ControlInput,
    params: &ModelParams,
) -> Result<[f64; STATE_DIM], DynamicsError> {
    let a = state.as_array();
    let mut x = [0.0; NX];
    x.copy_from_slice(&a[0..NX]);
    let m_ext = [a[16], a[17], a[18]];
    let dx = eom_reduced(&x, &control.as_array(), m_ext, params)?;
    let mut out = [0.0; STATE_DIM];
    out[0..NX].copy_from_slice(&dx);
    Ok(out)
}

/// Splits a full state into the 16 active states plus the `M_ext` parameter.
pub(crate) fn split_state(state: &QuadState) -> ([f64; NX], [f64; 3]) {
    let a = state.as_array();
    let mut x = [0.0; NX];
    x.copy_from_slice(&a[0..NX]);
    (x, [a[16], a[17], a[18]])
}

/// Value and Jacobian of the reduced dynamics over `[x; u]` (16 + 4 directions).
pub(crate) fn eval_jacobian(
    x: &[f64; NX],
    u: &[f64; CONTROL_DIM],
    m_ext: [f64; 3],
    p: &ModelParams,
) -> Result<([f64; NX], [[f64; NJ]; NX]), DynamicsError> {
    let mut xd = [Dual::<NJ>::constant(0.0); NX];
    for i in 0..NX {
        xd[i] = Dual::var(x[i], i);
    }
    let mut ud = [Dual::<NJ>::constant(0.0); CONTROL_DIM];
    for i in 0..CONTROL_DIM {
        ud[i] = Dual::var(u[i], NX + i);
    }
    let f = eom_reduced(&xd, &ud, m_ext, p)?;
    let mut val = [0.0; NX];
    let mut jac = [[0.0; NJ]; NX];
    for i in 0..NX {
        val[i] = f[i].re;
        jac[i] = f[i].d;
    }
    Ok((val, jac))
}

/// Packed upper-triangular Hessian of `w . f(x, u)` over `[x; u]`.
///
/// Weights apply to the 16 active derivative rows; zero-weight rows still cost
/// nothing extra since intermediates are shared.
pub(crate) fn eval_weighted_hessian(
    x: &[f64; NX],
    u: &[f64; CONTROL_DIM],
    m_ext: [f64; 3],
    p: &ModelParams,
    w: &[f64; NX],
) -> Result<[f64; NH], DynamicsError> {
    let mut xt = [Taylor2::<NJ, NH>::constant(0.0); NX];
    for i in 0..NX {
        xt[i] = Taylor2::var(x[i], i);
    }
    let mut ut = [Taylor2::<NJ, NH>::constant(0.0); CONTROL_DIM];
    for i in 0..CONTROL_DIM {
        ut[i] = Taylor2::var(u[i], NX + i);
    }
    let f = eom_reduced(&xt, &ut, m_ext, p)?;
    let mut h = [0.0; NH];
    for i in 0..NX {
        let wi = w[i];
        if wi == 0.0 {
            continue;
        }
        for k in 0..NH {
            h[k] += wi * f[i].h[k];
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::tri_index;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn test_state() -> QuadState {
        QuadState {
            position: Vector3::new(-3.0, 0.4, -0.1),
            velocity: Vector3::new(1.0, 0.5, -0.2),
            attitude: Vector3::new(0.1, -0.2, 0.3),
            body_rates: Vector3::new(0.3, -0.1, 0.2),
            rotor_speeds: Vector4::new(7000.0, 7200.0, 6800.0, 7100.0),
            moment_disturbance: Vector3::new(0.01, -0.02, 0.005),
        }
    }

    fn test_control() -> ControlInput {
        ControlInput::new(0.3, 0.7, 0.5, 0.6)
    }

    #[test]
    fn default_params_hover_point() {
        let p = ModelParams::default();
        assert_eq!(p.hover_rpm(), 7500.0);
        assert_eq!(p.hover_throttle(), 0.5);
        p.validate().unwrap();
    }

    #[test]
    fn params_json_uses_table_symbol_names() {
        let p = ModelParams::default();
        let v = serde_json::to_value(p).unwrap();
        let obj = v.as_object().unwrap();
        for key in [
            "k_x", "k_y", "k_omega", "k_z", "k_h", "I_x", "I_y", "I_z", "k_p", "k_pv", "k_q",
            "k_qv", "k_r1", "k_r2", "k_rr", "tau", "omega_min", "omega_max",
        ] {
            assert!(obj.contains_key(key), "missing key {key}");
        }
        let round: ModelParams = serde_json::from_value(v).unwrap();
        assert_eq!(round, p);
        // g may be omitted and defaults to 9.81.
        let no_g: ModelParams = serde_json::from_str(
            r#"{"k_x":1.08e-05,"k_y":9.65e-06,"k_omega":4.36e-08,"k_z":2.79e-05,
                "k_h":6.26e-02,"I_x":0.000906,"I_y":0.001242,"I_z":0.002054,
                "k_p":1.41e-09,"k_pv":-7.97e-03,"k_q":1.22e-09,"k_qv":1.29e-02,
                "k_r1":2.57e-06,"k_r2":4.11e-07,"k_rr":8.13e-04,"tau":0.03,
                "omega_min":3000,"omega_max":12000}"#,
        )
        .unwrap();
        assert_eq!(no_g.g, 9.81);
    }

    #[test]
    fn rejects_unknown_param_keys() {
        let err = serde_json::from_str::<ModelParams>(r#"{"k_x":1.0,"bogus":2.0}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn rotation_matches_elementary_product() {
        // Oracle: R = Rz(psi) * Ry(theta) * Rx(phi) built from elementary rotations.
        let lam: Vector3<f64> = Vector3::new(0.4, -0.7, 2.1);
        let (sph, cph) = lam[0].sin_cos();
        let (sth, cth) = lam[1].sin_cos();
        let (sps, cps) = lam[2].sin_cos();
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cph, -sph, 0.0, sph, cph);
        let ry = Matrix3::new(cth, 0.0, sth, 0.0, 1.0, 0.0, -sth, 0.0, cth);
        let rz = Matrix3::new(cps, -sps, 0.0, sps, cps, 0.0, 0.0, 0.0, 1.0);
        let oracle = rz * ry * rx;
        let r = rotation_body_to_world(&lam);
        assert_abs_diff_eq!(r, oracle, epsilon = 1e-15);
    }

    #[test]
    fn euler_kinematics_inverts_body_rate_map() {
        // Oracle: Omega = E(lambda) lambda-dot with the standard ZYX rate map;
        // Q must be its exact inverse.
        let lam: Vector3<f64> = Vector3::new(-0.3, 0.6, 1.2);
        let (sph, cph) = lam[0].sin_cos();
        let (sth, cth) = lam[1].sin_cos();
        let e = Matrix3::new(1.0, 0.0, -sth, 0.0, cph, sph * cth, 0.0, -sph, cph * cth);
        let q = euler_kinematics(&lam).unwrap();
        assert_abs_diff_eq!(q * e, Matrix3::identity(), epsilon = 1e-14);
    }

    #[test]
    fn gimbal_lock_is_an_error() {
        let lam = Vector3::new(0.0, std::f64::consts::FRAC_PI_2, 0.0);
        assert!(matches!(
            euler_kinematics(&lam),
            Err(DynamicsError::SingularAttitude { .. })
        ));
        let mut s = test_state();
        s.attitude[1] = -std::f64::consts::FRAC_PI_2;
        assert!(state_derivative(&s, &test_control(), &ModelParams::default()).is_err());
    }

    #[test]
    fn hover_is_an_equilibrium() {
        let p = ModelParams::default();
        let s = QuadState::hover_at(Vector3::new(1.0, -2.0, 0.5), 0.7, &p);
        let u = ControlInput::uniform(p.hover_throttle());
        let dx = state_derivative(&s, &u, &p).unwrap();
        for (i, d) in dx.iter().enumerate() {
            assert!(d.abs() < 1e-12, "component {i} = {d}");
        }
    }

    #[test]
    fn aero_forces_frozen_values() {
        let f = aero_forces(&test_state(), &ModelParams::default());
        assert_abs_diff_eq!(f[0], -0.3160362532134915, epsilon = 1e-14);
        assert_abs_diff_eq!(f[1], -0.03790635552685783, epsilon = 1e-14);
        assert_abs_diff_eq!(f[2], -8.341559109631454, epsilon = 1e-12);
    }

    #[test]
    fn rotor_dynamics_frozen_values() {
        let p = ModelParams::default();
        let wd = rotor_dynamics(&test_state().rotor_speeds, &test_control(), &p);
        assert_abs_diff_eq!(wd[0], -43333.333333333336, epsilon = 1e-8);
        assert_abs_diff_eq!(wd[1], 70000.0, epsilon = 1e-8);
        assert_abs_diff_eq!(wd[2], 23333.333333333336, epsilon = 1e-8);
        assert_abs_diff_eq!(wd[3], 43333.333333333336, epsilon = 1e-8);
        // Full throttle from idle: (omega_max - omega_min) / tau.
        let wd0 = rotor_dynamics(&Vector4::repeat(3000.0), &ControlInput::uniform(1.0), &p);
        assert_eq!(wd0[0], 300000.0);
    }

    #[test]
    fn aero_moments_frozen_values() {
        let p = ModelParams::default();
        let s = test_state();
        let wd = rotor_dynamics(&s.rotor_speeds, &test_control(), &p);
        let m = aero_moments(&s, &wd, &p);
        assert_abs_diff_eq!(m[0], 0.00076116781646209, epsilon = 1e-15);
        assert_abs_diff_eq!(m[1], 0.01854552764746949, epsilon = 1e-15);
        assert_abs_diff_eq!(m[2], 0.05592240000000001, epsilon = 1e-15);
    }

    #[test]
    fn state_derivative_frozen_values() {
        let p = ModelParams::default();
        let s = test_state();
        let dx = state_derivative(&s, &test_control(), &p).unwrap();
        // Position rows are the velocity.
        assert_eq!(&dx[0..3], s.velocity.as_slice());
        let expect = [
            (3, 1.0451481307658261),
            (4, 1.155521398583089),
            (5, 1.609063476237404),
            (6, 0.26168425760838593),
            (7, -0.11946709985716822),
            (8, 0.19286188883949557),
            (9, 11.895593616404074),
            (10, -1.1156138104110411),
            (11, 29.665277507302832),
        ];
        for (i, v) in expect {
            assert_abs_diff_eq!(dx[i], v, epsilon = 1e-11);
        }
        // M_ext rows are exactly zero.
        assert_eq!(&dx[16..19], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn pure_disturbance_angular_response() {
        // At rest with only M_ext: Omega-dot = I^-1 M_ext.
        let p = ModelParams::default();
        let mut s = QuadState::hover_at(Vector3::zeros(), 0.0, &p);
        s.rotor_speeds = Vector4::zeros();
        s.moment_disturbance = Vector3::new(0.04, 0.0, 0.0);
        let dx = state_derivative(&s, &ControlInput::uniform(0.0), &p).unwrap();
        assert_abs_diff_eq!(dx[9], 44.150110375275936, epsilon = 1e-12);
        assert_eq!(dx[10], 0.0);
        assert_eq!(dx[11], 0.0);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let p = ModelParams::default();
        let s = test_state();
        let (x, m_ext) = split_state(&s);
        let u = test_control().as_array();
        let (f0, jac) = eval_jacobian(&x, &u, m_ext, &p).unwrap();
        let fx = eom_reduced(&x, &u, m_ext, &p).unwrap();
        assert_eq!(f0, fx);
        for col in 0..NJ {
            let mut xp = x;
            let mut xm = x;
            let mut up = u;
            let mut um = u;
            let base = if col < NX { x[col] } else { u[col - NX] };
            let h = 1e-6 * base.abs().max(1.0);
            if col < NX {
                xp[col] += h;
                xm[col] -= h;
            } else {
                up[col - NX] += h;
                um[col - NX] -= h;
            }
            let fp = eom_reduced(&xp, &up, m_ext, &p).unwrap();
            let fm = eom_reduced(&xm, &um, m_ext, &p).unwrap();
            for row in 0..NX {
                let fd = (fp[row] - fm[row]) / (2.0 * h);
                let scale = jac[row][col].abs().max(1.0);
                assert!(
                    (jac[row][col] - fd).abs() <= 1e-6 * scale,
                    "jac[{row}][{col}] = {} vs fd {}",
                    jac[row][col],
                    fd
                );
            }
        }
    }

    #[test]
    fn weighted_hessian_matches_jacobian_differences() {
        let p = ModelParams::default();
        let s = test_state();
        let (x, m_ext) = split_state(&s);
        let u = test_control().as_array();
        let mut w = [0.0; NX];
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = 0.1 + 0.07 * i as f64 * if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        let h = eval_weighted_hessian(&x, &u, m_ext, &p, &w).unwrap();
        // FD of the weighted gradient g(z) = J(z)^T w along each direction.
        let grad_at = |x: &[f64; NX], u: &[f64; 4]| -> [f64; NJ] {
            let (_, jac) = eval_jacobian(x, u, m_ext, &p).unwrap();
            let mut g = [0.0; NJ];
            for (row, jrow) in jac.iter().enumerate() {
                for (col, gc) in g.iter_mut().enumerate() {
                    *gc += w[row] * jrow[col];
                }
            }
            g
        };
        for col in 0..NJ {
            let mut xp = x;
            let mut xm = x;
            let mut up = u;
            let mut um = u;
            let base = if col < NX { x[col] } else { u[col - NX] };
            let step = 1e-6 * base.abs().max(1.0);
            if col < NX {
                xp[col] += step;
                xm[col] -= step;
            } else {
                up[col - NX] += step;
                um[col - NX] -= step;
            }
            let gp = grad_at(&xp, &up);
            let gm = grad_at(&xm, &um);
            for row in 0..=col {
                let fd = (gp[row] - gm[row]) / (2.0 * step);
                let ad = h[tri_index(NJ, row, col)];
                let scale = ad.abs().max(1.0);
                assert!(
                    (ad - fd).abs() <= 1e-5 * scale,
                    "H[{row}][{col}] = {ad} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn state_array_round_trip() {
        let s = test_state();
        assert_eq!(QuadState::from_array(&s.as_array()), s);
    }

    proptest! {
        #[test]
        fn rotation_is_orthonormal(
            phi in -1.5f64..1.5,
            theta in -1.5f64..1.5,
            psi in -6.3f64..6.3,
        ) {
            let r = rotation_body_to_world(&Vector3::new(phi, theta, psi));
            let e = r.transpose() * r - Matrix3::identity();
            prop_assert!(e.amax() <= 1e-12, "R^T R deviates by {}", e.amax());
            prop_assert!((r.determinant() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn euler_kinematics_consistent_away_from_singularity(
            phi in -1.5f64..1.5,
            theta in -1.45f64..1.45,
            psi in -6.3f64..6.3,
        ) {
            let lam = Vector3::new(phi, theta, psi);
            let (sph, cph) = phi.sin_cos();
            let (sth, cth) = theta.sin_cos();
            let e = Matrix3::new(1.0, 0.0, -sth, 0.0, cph, sph * cth, 0.0, -sph, cph * cth);
            let q = euler_kinematics(&lam).unwrap();
            let dev = (q * e - Matrix3::identity()).amax();
            prop_assert!(dev <= 1e-11, "Q E deviates by {dev}");
        }
    }
}
