//! Hermite-Simpson transcription of the quadcopter optimal control problem
//! into the banded NLP form consumed by [`super::nlp`].
//!
//! Layout: the fixed initial state and the constant disturbance are
//! eliminated, leaving 16 active states per interior node (rotor speeds
//! internally in kRPM for conditioning), 4 node controls, 4 midpoint controls
//! per segment, slack variables for the inequality rows, and one global
//! final-time variable. Variables and constraint rows are interleaved
//! per-node so the KKT matrix is banded; the final-time column is dense and
//! handled as an arrow row.
//!
//! Derivatives are exact: constraint Jacobians come from forward first-order
//! AD of the dynamics, and the Lagrangian Hessian uses the chain rule of the
//! compressed collocation state, needing three weighted dynamics Hessians per
//! segment plus small dense block products.

use nalgebra::{SMatrix, SVector, Vector3};

use super::nlp::{BandNlp, KktLayout};
use super::{
    IntermediateWaypoint, OcpSpec, SolveReport, Trajectory, TrajoptError, VelocityCondition,
    DEFECT_TOLERANCE, TIME_BOUNDS,
};
use crate::ad::tri_index;
use crate::dynamics::{
    eom_reduced, eval_jacobian, eval_weighted_hessian, split_state, ControlInput, ModelParams,
    QuadState, CONTROL_DIM, NJ, NX, STATE_DIM,
};

pub(crate) const POSITION_BOUND: f64 = 60.0;
pub(crate) const VELOCITY_BOUND: f64 = 40.0;
pub(crate) const TILT_BOUND: f64 = 1.51;
pub(crate) const HEADING_BOUND: f64 = 4.0 * std::f64::consts::PI;
pub(crate) const RATE_BOUND: f64 = 60.0;
const SLACK_MAX: f64 = 1e6;
/// Rotor speeds are scaled to kRPM inside the NLP.
const OMEGA_SCALE: f64 = 1e3;

type Mat16 = SMatrix<f64, 16, 16>;
type Mat16x20 = SMatrix<f64, 16, 20>;
type Mat16x4 = SMatrix<f64, 16, 4>;
type Mat20 = SMatrix<f64, 20, 20>;
type Vec16 = SVector<f64, 16>;
type Vec20 = SVector<f64, 20>;

fn rscale(i: usize) -> f64 {
    if i >= 12 {
        OMEGA_SCALE
    } else {
        1.0
    }
}

fn dscale(j: usize) -> f64 {
    if (12..NX).contains(&j) {
        OMEGA_SCALE
    } else {
        1.0
    }
}

/// Dynamics in scaled coordinates: `f_s(x_s) = S^-1 f(S x_s)`.
fn f_scaled(
    x_s: &[f64; NX],
    u: &[f64; CONTROL_DIM],
    m_ext: [f64; 3],
    p: &ModelParams,
) -> Option<[f64; NX]> {
    let mut xn = *x_s;
    for i in 12..NX {
        xn[i] *= OMEGA_SCALE;
    }
    let f = eom_reduced(&xn, u, m_ext, p).ok()?;
    let mut fs = f;
    for i in 12..NX {
        fs[i] /= OMEGA_SCALE;
    }
    Some(fs)
}

/// Value and Jacobian of the scaled dynamics; primal values are bit-identical
/// to [`f_scaled`].
fn jac_scaled(
    x_s: &[f64; NX],
    u: &[f64; CONTROL_DIM],
    m_ext: [f64; 3],
    p: &ModelParams,
) -> Option<([f64; NX], Mat16x20)> {
    let mut xn = *x_s;
    for i in 12..NX {
        xn[i] *= OMEGA_SCALE;
    }
    let (f, j) = eval_jacobian(&xn, u, m_ext, p).ok()?;
    let mut fs = f;
    for i in 12..NX {
        fs[i] /= OMEGA_SCALE;
    }
    let js = Mat16x20::from_fn(|i, c| j[i][c] * dscale(c) / rscale(i));
    Some((fs, js))
}

/// Weighted Hessian `sum_i w_i d2 f_s_i` of the scaled dynamics over the 20
/// scaled directions, unpacked to a full symmetric matrix.
fn whess_scaled(
    x_s: &[f64; NX],
    u: &[f64; CONTROL_DIM],
    m_ext: [f64; 3],
    p: &ModelParams,
    w_s: &[f64; NX],
) -> Option<Mat20> {
    let mut xn = *x_s;
    for i in 12..NX {
        xn[i] *= OMEGA_SCALE;
    }
    let mut wn = *w_s;
    for i in 12..NX {
        wn[i] /= OMEGA_SCALE;
    }
    let packed = eval_weighted_hessian(&xn, u, m_ext, p, &wn).ok()?;
    let mut h = Mat20::zeros();
    for a in 0..NJ {
        for b in a..NJ {
            let v = packed[tri_index(NJ, a, b)] * dscale(a) * dscale(b);
            h[(a, b)] = v;
            h[(b, a)] = v;
        }
    }
    Some(h)
}

/// Initial point handed to the solver, in natural units.
pub(crate) struct Guess {
    pub states: Vec<[f64; STATE_DIM]>,
    pub controls: Vec<[f64; CONTROL_DIM]>,
    pub midpoints: Vec<[f64; CONTROL_DIM]>,
    pub final_time: f64,
}

/// One terminal constraint row.
#[derive(Debug, Clone, Copy)]
enum TermRow {
    /// `p_N[i] - p_f[i] = 0`.
    Pos(usize),
    /// `psi_N - psi_f = 0`.
    Heading,
    /// `v_N[i] - v_f[i] = 0`.
    VelFixed(usize),
    /// Lateral velocity w.r.t. the target heading vanishes.
    VelPerp,
    /// `v_N,z = 0`.
    VelZ,
    /// Forward velocity is nonnegative: `-(v . heading) + s = 0`, `s >= 0`.
    VelForward,
    /// `Omega_N[i] = 0`.
    BodyRate(usize),
    /// `Omega_dot[i] = 0` at `(x_N, u_N)`.
    BodyRateAccel(usize),
    /// `phi_N = 0` (i = 0) or `theta_N = 0` (i = 1).
    Attitude(usize),
}

/// The assembled NLP for one problem instance.
pub(crate) struct Transcription {
    spec: OcpSpec,
    /// Fixed initial active state, scaled.
    x0s: [f64; NX],
    m_ext: [f64; 3],
    node_x: Vec<Option<usize>>,
    node_u: Vec<usize>,
    mid_u: Vec<usize>,
    t_var: usize,
    sv_slack: Option<usize>,
    wp_slack: Option<usize>,
    wp_node: Option<usize>,
    defect_row: Vec<usize>,
    term_rows: Vec<TermRow>,
    term_row0: usize,
    wp_row: Option<usize>,
    var_slot: Vec<usize>,
    row_slot: Vec<usize>,
    half_bandwidth: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    row_tol: Vec<f64>,
    sin_pf: f64,
    cos_pf: f64,
    /// Target velocity when the final velocity is fixed.
    vf: Vector3<f64>,
}

#[derive(Default)]
struct LayoutBuilder {
    var_slot: Vec<usize>,
    row_slot: Vec<usize>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    row_tol: Vec<f64>,
    slot: usize,
}

impl LayoutBuilder {
    fn var(&mut self, lo: f64, hi: f64) -> usize {
        let i = self.var_slot.len();
        self.var_slot.push(self.slot);
        self.slot += 1;
        self.lo.push(lo);
        self.hi.push(hi);
        i
    }
    fn row(&mut self, tol: f64) -> usize {
        let r = self.row_slot.len();
        self.row_slot.push(self.slot);
        self.slot += 1;
        self.row_tol.push(tol);
        r
    }
}

fn state_bounds(p: &ModelParams) -> ([f64; NX], [f64; NX]) {
    let mut lo = [0.0; NX];
    let mut hi = [0.0; NX];
    for i in 0..3 {
        lo[i] = -POSITION_BOUND;
        hi[i] = POSITION_BOUND;
        lo[3 + i] = -VELOCITY_BOUND;
        hi[3 + i] = VELOCITY_BOUND;
        lo[9 + i] = -RATE_BOUND;
        hi[9 + i] = RATE_BOUND;
    }
    lo[6] = -TILT_BOUND;
    hi[6] = TILT_BOUND;
    lo[7] = -TILT_BOUND;
    hi[7] = TILT_BOUND;
    lo[8] = -HEADING_BOUND;
    hi[8] = HEADING_BOUND;
    for i in 12..NX {
        lo[i] = p.omega_min / OMEGA_SCALE;
        hi[i] = p.omega_max / OMEGA_SCALE;
    }
    (lo, hi)
}

impl Transcription {
    pub(crate) fn new(spec: &OcpSpec) -> Result<Self, TrajoptError> {
        let n = spec.n_segments;
        let fc = &spec.final_conditions;
        let wp_node = match &spec.intermediate {
            Some(wp) => Some(wp.node.ok_or_else(|| TrajoptError::InvalidSpec {
                reason: "waypoint node index not resolved".to_string(),
            })?),
            None => None,
        };

        let mut term_rows = vec![TermRow::Pos(0), TermRow::Pos(1), TermRow::Pos(2), TermRow::Heading];
        match fc.velocity {
            VelocityCondition::Free => {}
            VelocityCondition::Fixed(_) => {
                term_rows.extend((0..3).map(TermRow::VelFixed));
            }
            VelocityCondition::ForwardAlongHeading => {
                term_rows.extend([TermRow::VelPerp, TermRow::VelZ, TermRow::VelForward]);
            }
        }
        if fc.zero_body_rates {
            term_rows.extend((0..3).map(TermRow::BodyRate));
        }
        if fc.zero_body_rate_accel {
            term_rows.extend((0..3).map(TermRow::BodyRateAccel));
        }
        if fc.zero_attitude {
            term_rows.extend([TermRow::Attitude(0), TermRow::Attitude(1)]);
        }

        let (xlo, xhi) = state_bounds(&spec.params);
        let mut b = LayoutBuilder::default();
        let mut node_x = vec![None; n + 1];
        let mut node_u = vec![0usize; n + 1];
        let mut mid_u = vec![0usize; n];
        let mut defect_row = vec![0usize; n];
        let mut blk_start = vec![0usize; n + 1];
        let mut blk_end = vec![0usize; n + 1];
        let mut sv_slack = None;
        let mut wp_slack = None;
        let mut wp_row = None;

        for k in 0..=n {
            blk_start[k] = b.slot;
            if k > 0 {
                let first = b.var(xlo[0], xhi[0]);
                for i in 1..NX {
                    b.var(xlo[i], xhi[i]);
                }
                node_x[k] = Some(first);
            }
            node_u[k] = b.var(0.0, 1.0);
            for _ in 1..CONTROL_DIM {
                b.var(0.0, 1.0);
            }
            if k < n {
                mid_u[k] = b.var(0.0, 1.0);
                for _ in 1..CONTROL_DIM {
                    b.var(0.0, 1.0);
                }
            }
            if k == n && matches!(fc.velocity, VelocityCondition::ForwardAlongHeading) {
                sv_slack = Some(b.var(0.0, SLACK_MAX));
            }
            if wp_node == Some(k) {
                wp_slack = Some(b.var(0.0, SLACK_MAX));
            }
            blk_end[k] = b.slot - 1;
            if wp_node == Some(k) {
                wp_row = Some(b.row(DEFECT_TOLERANCE));
            }
            if k < n {
                defect_row[k] = b.row(DEFECT_TOLERANCE / rscale(0));
                for i in 1..NX {
                    b.row(DEFECT_TOLERANCE / rscale(i));
                }
            }
        }
        let term_row0 = b.row_slot.len();
        for _ in &term_rows {
            b.row(DEFECT_TOLERANCE);
        }
        blk_end[n] = b.slot - 1;
        let t_hi = spec.t_max.map_or(TIME_BOUNDS.1, |t| t.min(TIME_BOUNDS.1));
        let t_var = b.var(TIME_BOUNDS.0, t_hi);
        debug_assert_eq!(b.var_slot[t_var], b.var_slot.len() + b.row_slot.len() - 1);

        let half_bandwidth = (0..n)
            .map(|k| blk_end[k + 1] - blk_start[k])
            .max()
            .expect("at least one segment");

        let (x0_nat, _) = split_state(&spec.x0);
        let mut x0s = x0_nat;
        for i in 12..NX {
            x0s[i] /= OMEGA_SCALE;
        }
        let (sin_pf, cos_pf) = fc.heading.sin_cos();
        let vf = match fc.velocity {
            VelocityCondition::Fixed(v) => v,
            _ => Vector3::zeros(),
        };

        Ok(Self {
            spec: spec.clone(),
            x0s,
            m_ext: [spec.m_ext[0], spec.m_ext[1], spec.m_ext[2]],
            node_x,
            node_u,
            mid_u,
            t_var,
            sv_slack,
            wp_slack,
            wp_node,
            defect_row,
            term_rows,
            term_row0,
            wp_row,
            var_slot: b.var_slot,
            row_slot: b.row_slot,
            half_bandwidth,
            lo: b.lo,
            hi: b.hi,
            row_tol: b.row_tol,
            sin_pf,
            cos_pf,
            vf,
        })
    }

    fn node_state(&self, z: &[f64], k: usize) -> [f64; NX] {
        match self.node_x[k] {
            None => self.x0s,
            Some(i) => {
                let mut x = [0.0; NX];
                x.copy_from_slice(&z[i..i + NX]);
                x
            }
        }
    }

    fn node_control(&self, z: &[f64], k: usize) -> [f64; CONTROL_DIM] {
        let i = self.node_u[k];
        [z[i], z[i + 1], z[i + 2], z[i + 3]]
    }

    fn mid_control(&self, z: &[f64], k: usize) -> [f64; CONTROL_DIM] {
        let i = self.mid_u[k];
        [z[i], z[i + 1], z[i + 2], z[i + 3]]
    }

    /// Global variable indices of a node's 20-dim `(x_k, u_k)` block; state
    /// entries are `None` at the fixed initial node.
    fn blk_indices(&self, k: usize) -> [Option<usize>; NJ] {
        let mut idx = [None; NJ];
        if let Some(x0) = self.node_x[k] {
            for (i, slot) in idx.iter_mut().take(NX).enumerate() {
                *slot = Some(x0 + i);
            }
        }
        let u0 = self.node_u[k];
        for i in 0..CONTROL_DIM {
            idx[NX + i] = Some(u0 + i);
        }
        idx
    }

    fn energy_sums(&self, z: &[f64]) -> (f64, f64) {
        let n = self.spec.n_segments;
        let mut su = 0.0;
        let mut sc = 0.0;
        for k in 0..=n {
            let ck = if k == 0 || k == n { 1.0 } else { 2.0 };
            let u = self.node_control(z, k);
            su += ck * u.iter().map(|v| v * v).sum::<f64>();
        }
        for k in 0..n {
            let uc = self.mid_control(z, k);
            sc += uc.iter().map(|v| v * v).sum::<f64>();
        }
        (su, sc)
    }

    /// Flattens a guess into the solver's variable vector.
    pub(crate) fn pack(&self, guess: &Guess) -> Vec<f64> {
        let n = self.spec.n_segments;
        assert_eq!(guess.states.len(), n + 1);
        assert_eq!(guess.controls.len(), n + 1);
        assert_eq!(guess.midpoints.len(), n);
        let mut z = vec![0.0; self.lo.len()];
        for k in 1..=n {
            let base = self.node_x[k].expect("interior node has state variables");
            for i in 0..NX {
                z[base + i] = guess.states[k][i] / rscale(i);
            }
        }
        for k in 0..=n {
            let base = self.node_u[k];
            for i in 0..CONTROL_DIM {
                z[base + i] = guess.controls[k][i];
            }
        }
        for k in 0..n {
            let base = self.mid_u[k];
            for i in 0..CONTROL_DIM {
                z[base + i] = guess.midpoints[k][i];
            }
        }
        z[self.t_var] = guess.final_time;
        if let Some(si) = self.sv_slack {
            let xf = &guess.states[n];
            let forward = xf[3] * self.cos_pf + xf[4] * self.sin_pf;
            z[si] = forward.max(1e-2);
        }
        if let (Some(si), Some(wp), Some(k)) =
            (self.wp_slack, self.spec.intermediate.as_ref(), self.wp_node)
        {
            let x = &guess.states[k];
            let r2 = (x[0] - wp.position[0]).powi(2)
                + (x[1] - wp.position[1]).powi(2)
                + (x[2] - wp.position[2]).powi(2)
                + (x[8] - wp.heading).powi(2);
            z[si] = (wp.threshold - r2).max(1e-3);
        }
        z
    }

    /// Rebuilds a trajectory (natural units) from a solution vector; the
    /// caller fills in cost and the solve report.
    pub(crate) fn extract(&self, z: &[f64], spec: OcpSpec) -> Trajectory {
        let n = self.spec.n_segments;
        let t = z[self.t_var];
        let mut states = Vec::with_capacity(n + 1);
        let mut x0 = spec.x0;
        x0.moment_disturbance = spec.m_ext;
        states.push(x0);
        for k in 1..=n {
            let xs = self.node_state(z, k);
            let mut a = [0.0; STATE_DIM];
            for i in 0..NX {
                a[i] = xs[i] * rscale(i);
            }
            a[16] = self.m_ext[0];
            a[17] = self.m_ext[1];
            a[18] = self.m_ext[2];
            states.push(QuadState::from_array(&a));
        }
        let controls = (0..=n)
            .map(|k| ControlInput::from_array(&self.node_control(z, k)))
            .collect();
        let midpoint_controls = (0..n)
            .map(|k| ControlInput::from_array(&self.mid_control(z, k)))
            .collect();
        let times = (0..=n)
            .map(|k| if k == n { t } else { t * k as f64 / n as f64 })
            .collect();
        Trajectory {
            times,
            states,
            controls,
            midpoint_controls,
            final_time: t,
            cost: 0.0,
            spec,
            solve: SolveReport {
                iterations: 0,
                objective: 0.0,
                stationarity: 0.0,
                complementarity: 0.0,
                max_defect: 0.0,
                boundary_residual: 0.0,
                waypoint_residual: None,
            },
        }
    }

    fn wp(&self) -> Option<(&IntermediateWaypoint, usize, usize, usize)> {
        match (self.spec.intermediate.as_ref(), self.wp_node, self.wp_row, self.wp_slack) {
            (Some(wp), Some(node), Some(row), Some(slack)) => Some((wp, node, row, slack)),
            _ => None,
        }
    }

    /// Interpolation matrices `d x_c / d (x_k, u_k)` and
    /// `d x_c / d (x_{k+1}, u_{k+1})`.
    fn d_mats(jk: &Mat16x20, jk1: &Mat16x20, h: f64) -> (Mat16x20, Mat16x20) {
        let mut dk = *jk * (h / 8.0);
        let mut dk1 = *jk1 * (-h / 8.0);
        for i in 0..NX {
            dk[(i, i)] += 0.5;
            dk1[(i, i)] += 0.5;
        }
        (dk, dk1)
    }
}

fn put_entry(emit: &mut dyn FnMut(usize, usize, f64), i: usize, j: usize, v: f64) {
    if v != 0.0 {
        debug_assert!(i <= j);
        emit(i, j, v);
    }
}

fn emit_sym20(m: &Mat20, idx: &[Option<usize>; NJ], emit: &mut dyn FnMut(usize, usize, f64)) {
    for a in 0..NJ {
        let Some(ia) = idx[a] else { continue };
        for b in a..NJ {
            let Some(ib) = idx[b] else { continue };
            let v = m[(a, b)];
            if v != 0.0 {
                emit(ia.min(ib), ia.max(ib), v);
            }
        }
    }
}

fn emit_rect<const R: usize, const C: usize>(
    m: &SMatrix<f64, R, C>,
    ridx: &[Option<usize>; R],
    cidx: &[Option<usize>; C],
    emit: &mut dyn FnMut(usize, usize, f64),
) {
    for a in 0..R {
        let Some(ia) = ridx[a] else { continue };
        for b in 0..C {
            let Some(ib) = cidx[b] else { continue };
            let v = m[(a, b)];
            if v != 0.0 {
                emit(ia.min(ib), ia.max(ib), v);
            }
        }
    }
}

impl BandNlp for Transcription {
    fn n(&self) -> usize {
        self.lo.len()
    }

    fn m(&self) -> usize {
        self.row_tol.len()
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.lo.clone(), self.hi.clone())
    }

    fn objective(&self, z: &[f64]) -> Option<f64> {
        let n = self.spec.n_segments as f64;
        let eps = self.spec.epsilon;
        let t = z[self.t_var];
        let (su, sc) = self.energy_sums(z);
        Some((1.0 - eps) * t + eps * t / (6.0 * n) * (su + 4.0 * sc))
    }

    fn gradient(&self, z: &[f64], g: &mut [f64]) -> bool {
        g.fill(0.0);
        let n = self.spec.n_segments;
        let nf = n as f64;
        let eps = self.spec.epsilon;
        let t = z[self.t_var];
        let h = t / nf;
        for k in 0..=n {
            let ck = if k == 0 || k == n { 1.0 } else { 2.0 };
            let base = self.node_u[k];
            for i in 0..CONTROL_DIM {
                g[base + i] = eps * (h / 3.0) * ck * z[base + i];
            }
        }
        for k in 0..n {
            let base = self.mid_u[k];
            for i in 0..CONTROL_DIM {
                g[base + i] = eps * (4.0 * h / 3.0) * z[base + i];
            }
        }
        let (su, sc) = self.energy_sums(z);
        g[self.t_var] = (1.0 - eps) + eps * (su + 4.0 * sc) / (6.0 * nf);
        true
    }

    fn constraints(&self, z: &[f64], c: &mut [f64]) -> bool {
        let p = &self.spec.params;
        let n = self.spec.n_segments;
        let t = z[self.t_var];
        let h = t / n as f64;
        let mut xs = vec![[0.0; NX]; n + 1];
        let mut f = vec![[0.0; NX]; n + 1];
        for k in 0..=n {
            xs[k] = self.node_state(z, k);
            let u = self.node_control(z, k);
            match f_scaled(&xs[k], &u, self.m_ext, p) {
                Some(v) => f[k] = v,
                None => return false,
            }
        }
        for k in 0..n {
            let uc = self.mid_control(z, k);
            let mut xc = [0.0; NX];
            for i in 0..NX {
                xc[i] = 0.5 * (xs[k][i] + xs[k + 1][i]) + h / 8.0 * (f[k][i] - f[k + 1][i]);
            }
            let fc = match f_scaled(&xc, &uc, self.m_ext, p) {
                Some(v) => v,
                None => return false,
            };
            let r0 = self.defect_row[k];
            for i in 0..NX {
                c[r0 + i] =
                    xs[k + 1][i] - xs[k][i] - h / 6.0 * (f[k][i] + 4.0 * fc[i] + f[k + 1][i]);
            }
        }
        if let Some((wp, node, row, slack)) = self.wp() {
            let x = &xs[node];
            c[row] = (x[0] - wp.position[0]).powi(2)
                + (x[1] - wp.position[1]).powi(2)
                + (x[2] - wp.position[2]).powi(2)
                + (x[8] - wp.heading).powi(2)
                - wp.threshold
                + z[slack];
        }
        let fcond = &self.spec.final_conditions;
        let xn = &xs[n];
        let fn_ = &f[n];
        for (j, row) in self.term_rows.iter().enumerate() {
            c[self.term_row0 + j] = match *row {
                TermRow::Pos(i) => xn[i] - fcond.position[i],
                TermRow::Heading => xn[8] - fcond.heading,
                TermRow::VelFixed(i) => xn[3 + i] - self.vf[i],
                TermRow::VelPerp => -xn[3] * self.sin_pf + xn[4] * self.cos_pf,
                TermRow::VelZ => xn[5],
                TermRow::VelForward => {
                    -(xn[3] * self.cos_pf + xn[4] * self.sin_pf)
                        + z[self.sv_slack.expect("slack allocated with the row")]
                }
                TermRow::BodyRate(i) => xn[9 + i],
                TermRow::BodyRateAccel(i) => fn_[9 + i],
                TermRow::Attitude(i) => xn[6 + i],
            };
        }
        true
    }

    fn jacobian(&self, z: &[f64], emit: &mut dyn FnMut(usize, usize, f64)) -> bool {
        let p = &self.spec.params;
        let n = self.spec.n_segments;
        let nf = n as f64;
        let t = z[self.t_var];
        let h = t / nf;
        let inv6n = 1.0 / (6.0 * nf);
        let beta = 1.0 / (8.0 * nf);
        let mut xs = vec![[0.0; NX]; n + 1];
        let mut fj = Vec::with_capacity(n + 1);
        for k in 0..=n {
            xs[k] = self.node_state(z, k);
            let u = self.node_control(z, k);
            match jac_scaled(&xs[k], &u, self.m_ext, p) {
                Some(v) => fj.push(v),
                None => return false,
            }
        }
        let mut put = |row: usize, col: usize, v: f64| {
            if v != 0.0 {
                emit(row, col, v);
            }
        };
        for k in 0..n {
            let (fk, jk) = &fj[k];
            let (fk1, jk1) = &fj[k + 1];
            let uc = self.mid_control(z, k);
            let mut xc = [0.0; NX];
            for i in 0..NX {
                xc[i] = 0.5 * (xs[k][i] + xs[k + 1][i]) + h / 8.0 * (fk[i] - fk1[i]);
            }
            let (fc, jc) = match jac_scaled(&xc, &uc, self.m_ext, p) {
                Some(v) => v,
                None => return false,
            };
            let ac: Mat16 = jc.fixed_view::<16, 16>(0, 0).into_owned();
            let bc: Mat16x4 = jc.fixed_view::<16, 4>(0, 16).into_owned();
            let (dk, dk1) = Self::d_mats(jk, jk1, h);
            let mut gk: Mat16x20 = (*jk + ac * dk * 4.0) * (-h / 6.0);
            let mut gk1: Mat16x20 = (*jk1 + ac * dk1 * 4.0) * (-h / 6.0);
            for i in 0..NX {
                gk[(i, i)] -= 1.0;
                gk1[(i, i)] += 1.0;
            }
            let guc: Mat16x4 = bc * (-2.0 * h / 3.0);
            let q: Vec16 = (Vec16::from(*fk) - Vec16::from(*fk1)) * beta;
            let gt: Vec16 = (Vec16::from(*fk) + Vec16::from(fc) * 4.0 + Vec16::from(*fk1))
                * (-inv6n)
                - ac * q * (2.0 * h / 3.0);
            let r0 = self.defect_row[k];
            for i in 0..NX {
                let row = r0 + i;
                if let Some(x0) = self.node_x[k] {
                    for j in 0..NX {
                        put(row, x0 + j, gk[(i, j)]);
                    }
                }
                for j in 0..CONTROL_DIM {
                    put(row, self.node_u[k] + j, gk[(i, NX + j)]);
                    put(row, self.mid_u[k] + j, guc[(i, j)]);
                }
                let x1 = self.node_x[k + 1].expect("nodes past the first carry states");
                for j in 0..NX {
                    put(row, x1 + j, gk1[(i, j)]);
                }
                for j in 0..CONTROL_DIM {
                    put(row, self.node_u[k + 1] + j, gk1[(i, NX + j)]);
                }
                put(row, self.t_var, gt[i]);
            }
        }
        if let Some((wp, node, row, slack)) = self.wp() {
            let x = &xs[node];
            let base = self.node_x[node].expect("waypoint node is interior");
            for i in 0..3 {
                put(row, base + i, 2.0 * (x[i] - wp.position[i]));
            }
            put(row, base + 8, 2.0 * (x[8] - wp.heading));
            put(row, slack, 1.0);
        }
        let xn_base = self.node_x[n].expect("final node carries states");
        let jn = fj[n].1;
        for (j, row_kind) in self.term_rows.iter().enumerate() {
            let row = self.term_row0 + j;
            match *row_kind {
                TermRow::Pos(i) => put(row, xn_base + i, 1.0),
                TermRow::Heading => put(row, xn_base + 8, 1.0),
                TermRow::VelFixed(i) => put(row, xn_base + 3 + i, 1.0),
                TermRow::VelPerp => {
                    put(row, xn_base + 3, -self.sin_pf);
                    put(row, xn_base + 4, self.cos_pf);
                }
                TermRow::VelZ => put(row, xn_base + 5, 1.0),
                TermRow::VelForward => {
                    put(row, xn_base + 3, -self.cos_pf);
                    put(row, xn_base + 4, -self.sin_pf);
                    put(row, self.sv_slack.expect("slack allocated with the row"), 1.0);
                }
                TermRow::BodyRate(i) => put(row, xn_base + 9 + i, 1.0),
                TermRow::BodyRateAccel(i) => {
                    for c in 0..NX {
                        put(row, xn_base + c, jn[(9 + i, c)]);
                    }
                    for c in 0..CONTROL_DIM {
                        put(row, self.node_u[n] + c, jn[(9 + i, NX + c)]);
                    }
                }
                TermRow::Attitude(i) => put(row, xn_base + 6 + i, 1.0),
            }
        }
        true
    }

    fn lag_hessian(
        &self,
        z: &[f64],
        lam: &[f64],
        emit: &mut dyn FnMut(usize, usize, f64),
    ) -> bool {
        let p = &self.spec.params;
        let n = self.spec.n_segments;
        let nf = n as f64;
        let eps = self.spec.epsilon;
        let t = z[self.t_var];
        let h = t / nf;
        let inv6n = 1.0 / (6.0 * nf);
        let beta = 1.0 / (8.0 * nf);
        let mut xs = vec![[0.0; NX]; n + 1];
        let mut fj = Vec::with_capacity(n + 1);
        for k in 0..=n {
            xs[k] = self.node_state(z, k);
            let u = self.node_control(z, k);
            match jac_scaled(&xs[k], &u, self.m_ext, p) {
                Some(v) => fj.push(v),
                None => return false,
            }
        }
        for k in 0..n {
            let r0 = self.defect_row[k];
            let w = Vec16::from_fn(|i, _| lam[r0 + i]);
            let uk = self.node_control(z, k);
            let uk1 = self.node_control(z, k + 1);
            let uc = self.mid_control(z, k);
            let (fk, jk) = &fj[k];
            let (fk1, jk1) = &fj[k + 1];
            if w.amax() == 0.0 {
                continue;
            }
            let mut xc = [0.0; NX];
            for i in 0..NX {
                xc[i] = 0.5 * (xs[k][i] + xs[k + 1][i]) + h / 8.0 * (fk[i] - fk1[i]);
            }
            let (_, jc) = match jac_scaled(&xc, &uc, self.m_ext, p) {
                Some(v) => v,
                None => return false,
            };
            let ac: Mat16 = jc.fixed_view::<16, 16>(0, 0).into_owned();
            let bc: Mat16x4 = jc.fixed_view::<16, 4>(0, 16).into_owned();
            let a: Vec16 = ac.transpose() * w;
            let mut wk_eff = [0.0; NX];
            let mut wk1_eff = [0.0; NX];
            let mut wc_eff = [0.0; NX];
            for i in 0..NX {
                wk_eff[i] = -(h / 6.0) * w[i] - (h * h / 12.0) * a[i];
                wk1_eff[i] = -(h / 6.0) * w[i] + (h * h / 12.0) * a[i];
                wc_eff[i] = -(2.0 * h / 3.0) * w[i];
            }
            let hk = match whess_scaled(&xs[k], &uk, self.m_ext, p, &wk_eff) {
                Some(v) => v,
                None => return false,
            };
            let hk1 = match whess_scaled(&xs[k + 1], &uk1, self.m_ext, p, &wk1_eff) {
                Some(v) => v,
                None => return false,
            };
            let hc = match whess_scaled(&xc, &uc, self.m_ext, p, &wc_eff) {
                Some(v) => v,
                None => return false,
            };
            let wss: Mat16 = hc.fixed_view::<16, 16>(0, 0).into_owned();
            let wsu: Mat16x4 = hc.fixed_view::<16, 4>(0, 16).into_owned();
            let wuu: SMatrix<f64, 4, 4> = hc.fixed_view::<4, 4>(16, 16).into_owned();
            let (dk, dk1) = Self::d_mats(jk, jk1, h);
            let dkt_wss = dk.transpose() * wss;
            let dk1t_wss = dk1.transpose() * wss;
            let bkk: Mat20 = hk + dkt_wss * dk;
            let bkk1: Mat20 = dkt_wss * dk1;
            let bk1k1: Mat20 = hk1 + dk1t_wss * dk1;
            let bkuc: SMatrix<f64, 20, 4> = dk.transpose() * wsu;
            let buck1: SMatrix<f64, 4, 20> = wsu.transpose() * dk1;
            let q: Vec16 = (Vec16::from(*fk) - Vec16::from(*fk1)) * beta;
            let wss_q: Vec16 = wss * q;
            let bk: Vec20 = jk.transpose() * w;
            let bk1: Vec20 = jk1.transpose() * w;
            let tk: Vec20 = (bk + dk.transpose() * a * 4.0) * (-inv6n)
                + dk.transpose() * wss_q
                - jk.transpose() * a * (2.0 * h / 3.0 * beta);
            let tk1: Vec20 = (bk1 + dk1.transpose() * a * 4.0) * (-inv6n)
                + dk1.transpose() * wss_q
                + jk1.transpose() * a * (2.0 * h / 3.0 * beta);
            let tuc: SVector<f64, 4> =
                bc.transpose() * w * (-2.0 / (3.0 * nf)) + wsu.transpose() * q;
            let ttt = -(4.0 / (3.0 * nf)) * a.dot(&q) + q.dot(&wss_q);
            let idx_k = self.blk_indices(k);
            let idx_k1 = self.blk_indices(k + 1);
            let idx_uc: [Option<usize>; 4] = std::array::from_fn(|i| Some(self.mid_u[k] + i));
            emit_sym20(&bkk, &idx_k, emit);
            emit_rect(&bkuc, &idx_k, &idx_uc, emit);
            emit_rect(&bkk1, &idx_k, &idx_k1, emit);
            for i in 0..CONTROL_DIM {
                for j in i..CONTROL_DIM {
                    let v = wuu[(i, j)];
                    if v != 0.0 {
                        put_entry(emit, self.mid_u[k] + i, self.mid_u[k] + j, v);
                    }
                }
            }
            emit_rect(&buck1, &idx_uc, &idx_k1, emit);
            emit_sym20(&bk1k1, &idx_k1, emit);
            for i in 0..NJ {
                if let Some(ii) = idx_k[i] {
                    put_entry(emit, ii, self.t_var, tk[i]);
                }
                if let Some(ii) = idx_k1[i] {
                    put_entry(emit, ii, self.t_var, tk1[i]);
                }
            }
            for i in 0..CONTROL_DIM {
                put_entry(emit, self.mid_u[k] + i, self.t_var, tuc[i]);
            }
            put_entry(emit, self.t_var, self.t_var, ttt);
        }
        // Objective curvature: control-energy diagonals and time cross terms.
        if eps > 0.0 {
            for k in 0..=n {
                let ck = if k == 0 || k == n { 1.0 } else { 2.0 };
                let base = self.node_u[k];
                for i in 0..CONTROL_DIM {
                    put_entry(emit, base + i, base + i, eps * (h / 3.0) * ck);
                    put_entry(emit, base + i, self.t_var, eps * ck * z[base + i] / (3.0 * nf));
                }
            }
            for k in 0..n {
                let base = self.mid_u[k];
                for i in 0..CONTROL_DIM {
                    put_entry(emit, base + i, base + i, eps * 4.0 * h / 3.0);
                    put_entry(emit, base + i, self.t_var, eps * 4.0 * z[base + i] / (3.0 * nf));
                }
            }
        }
        // Terminal body-rate-acceleration rows carry dynamics curvature.
        let mut wt = [0.0; NX];
        let mut any = false;
        for (j, row_kind) in self.term_rows.iter().enumerate() {
            if let TermRow::BodyRateAccel(i) = *row_kind {
                let l = lam[self.term_row0 + j];
                if l != 0.0 {
                    wt[9 + i] = l;
                    any = true;
                }
            }
        }
        if any {
            let un = self.node_control(z, n);
            let ht = match whess_scaled(&xs[n], &un, self.m_ext, p, &wt) {
                Some(v) => v,
                None => return false,
            };
            emit_sym20(&ht, &self.blk_indices(n), emit);
        }
        // Waypoint row: quadratic in position and heading.
        if let Some((_, node, row, _)) = self.wp() {
            let l = lam[row];
            if l != 0.0 {
                let base = self.node_x[node].expect("waypoint node is interior");
                for i in 0..3 {
                    put_entry(emit, base + i, base + i, 2.0 * l);
                }
                put_entry(emit, base + 8, base + 8, 2.0 * l);
            }
        }
        true
    }

    fn kkt_layout(&self) -> KktLayout {
        KktLayout {
            var_slot: self.var_slot.clone(),
            row_slot: self.row_slot.clone(),
            half_bandwidth: self.half_bandwidth,
            n_arrow: 1,
        }
    }

    fn row_tolerances(&self) -> Vec<f64> {
        self.row_tol.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::super::{default_guess, FinalConditions, OcpSpec};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_spec(forward: bool, with_waypoint: bool) -> OcpSpec {
        let params = ModelParams::default();
        let x0 = QuadState {
            position: Vector3::new(-2.0, 0.8, -1.2),
            velocity: Vector3::new(0.8, -0.3, 0.2),
            attitude: Vector3::new(0.05, -0.08, 0.3),
            body_rates: Vector3::new(0.1, -0.05, 0.02),
            rotor_speeds: nalgebra::Vector4::new(6800.0, 7100.0, 7300.0, 6900.0),
            moment_disturbance: Vector3::new(0.004, -0.006, 0.002),
        };
        let target = Vector3::new(1.5, 0.5, -1.0);
        let final_conditions = if forward {
            FinalConditions::forward_flight(target, 0.6)
        } else {
            FinalConditions::rest_at(target, 0.6)
        };
        OcpSpec {
            epsilon: 0.37,
            x0,
            final_conditions,
            params,
            m_ext: Vector3::new(0.004, -0.006, 0.002),
            intermediate: with_waypoint.then(|| IntermediateWaypoint {
                position: Vector3::new(-0.5, 0.6, -1.1),
                heading: 0.45,
                threshold: 0.04,
                node: Some(5),
            }),
            n_segments: 10,
            t_max: None,
        }
    }

    /// Strictly interior random point near the default initialization.
    fn random_point(tr: &Transcription, spec: &OcpSpec, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = tr.pack(&default_guess(spec));
        for i in 0..z.len() {
            let width = (tr.hi[i] - tr.lo[i]).min(1.0);
            z[i] += 0.02 * width * (rng.random::<f64>() - 0.5);
            z[i] = z[i].clamp(tr.lo[i] + 1e-3 * width, tr.hi[i] - 1e-3 * width);
        }
        z
    }

    fn dense_jacobian(tr: &Transcription, z: &[f64]) -> Vec<Vec<f64>> {
        let mut j = vec![vec![0.0; tr.n()]; tr.m()];
        assert!(tr.jacobian(z, &mut |r, v, val| j[r][v] += val));
        j
    }

    fn dense_hessian(tr: &Transcription, z: &[f64], lam: &[f64]) -> Vec<Vec<f64>> {
        let n = tr.n();
        let mut h = vec![vec![0.0; n]; n];
        assert!(tr.lag_hessian(z, lam, &mut |i, j, val| {
            h[i][j] += val;
            if i != j {
                h[j][i] += val;
            }
        }));
        h
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        for (forward, wp) in [(false, false), (true, true)] {
            let spec = test_spec(forward, wp);
            let tr = Transcription::new(&spec).unwrap();
            let z = random_point(&tr, &spec, 11);
            let mut g = vec![0.0; tr.n()];
            assert!(tr.gradient(&z, &mut g));
            for i in 0..tr.n() {
                let d = 1e-6 * z[i].abs().max(1.0);
                let mut zp = z.clone();
                zp[i] += d;
                let mut zm = z.clone();
                zm[i] -= d;
                let fd =
                    (tr.objective(&zp).unwrap() - tr.objective(&zm).unwrap()) / (2.0 * d);
                assert!(
                    (g[i] - fd).abs() <= 1e-7 * g[i].abs().max(1.0),
                    "grad[{i}] = {} vs fd {}",
                    g[i],
                    fd
                );
            }
        }
    }

    #[test]
    fn constraint_jacobian_matches_finite_differences() {
        for (forward, wp) in [(false, false), (true, true)] {
            let spec = test_spec(forward, wp);
            let tr = Transcription::new(&spec).unwrap();
            let z = random_point(&tr, &spec, 23);
            let jac = dense_jacobian(&tr, &z);
            let mut cp = vec![0.0; tr.m()];
            let mut cm = vec![0.0; tr.m()];
            for v in 0..tr.n() {
                let d = 1e-6 * z[v].abs().max(1.0);
                let mut zp = z.clone();
                zp[v] += d;
                let mut zm = z.clone();
                zm[v] -= d;
                assert!(tr.constraints(&zp, &mut cp));
                assert!(tr.constraints(&zm, &mut cm));
                for r in 0..tr.m() {
                    let fd = (cp[r] - cm[r]) / (2.0 * d);
                    let scale = jac[r][v].abs().max(1.0);
                    assert!(
                        (jac[r][v] - fd).abs() <= 1e-5 * scale,
                        "J[{r}][{v}] = {} vs fd {} (forward={forward} wp={wp})",
                        jac[r][v],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn lagrangian_hessian_matches_directional_differences() {
        for (forward, wp) in [(false, false), (true, true)] {
            let spec = test_spec(forward, wp);
            let tr = Transcription::new(&spec).unwrap();
            let z = random_point(&tr, &spec, 37);
            let mut rng = ChaCha8Rng::seed_from_u64(91);
            let lam: Vec<f64> =
                (0..tr.m()).map(|_| 4.0 * (rng.random::<f64>() - 0.5)).collect();
            let hess = dense_hessian(&tr, &z, &lam);
            // Gradient of the Lagrangian at a shifted point.
            let grad_l = |zz: &[f64]| -> Vec<f64> {
                let mut g = vec![0.0; tr.n()];
                assert!(tr.gradient(zz, &mut g));
                assert!(tr.jacobian(zz, &mut |r, v, val| g[v] += val * lam[r]));
                g
            };
            for dir_seed in 0..3u64 {
                let mut dir_rng = ChaCha8Rng::seed_from_u64(100 + dir_seed);
                let v: Vec<f64> =
                    (0..tr.n()).map(|_| 2.0 * (dir_rng.random::<f64>() - 0.5)).collect();
                let d = 3e-6;
                let zp: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a + d * b).collect();
                let zm: Vec<f64> = z.iter().zip(&v).map(|(a, b)| a - d * b).collect();
                let gp = grad_l(&zp);
                let gm = grad_l(&zm);
                let hv: Vec<f64> = (0..tr.n())
                    .map(|i| (0..tr.n()).map(|j| hess[i][j] * v[j]).sum())
                    .collect();
                let scale = hv.iter().fold(1.0f64, |a, &x| a.max(x.abs()));
                for i in 0..tr.n() {
                    let fd = (gp[i] - gm[i]) / (2.0 * d);
                    assert!(
                        (hv[i] - fd).abs() <= 2e-4 * scale,
                        "Hv[{i}] = {} vs fd {} (forward={forward} wp={wp})",
                        hv[i],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn scaled_dynamics_agree_with_natural_units() {
        let spec = test_spec(false, false);
        let tr = Transcription::new(&spec).unwrap();
        let z = tr.pack(&default_guess(&spec));
        let x = tr.node_state(&z, 3);
        let u = tr.node_control(&z, 3);
        let fs = f_scaled(&x, &u, tr.m_ext, &spec.params).unwrap();
        let mut xn = x;
        for i in 12..NX {
            xn[i] *= OMEGA_SCALE;
        }
        let fnat = eom_reduced(&xn, &u, tr.m_ext, &spec.params).unwrap();
        for i in 0..NX {
            let expect = fnat[i] / rscale(i);
            assert_eq!(fs[i], expect, "row {i}");
        }
    }

    #[test]
    fn layout_is_consistent() {
        let spec = test_spec(true, true);
        let tr = Transcription::new(&spec).unwrap();
        assert_eq!(tr.var_slot.len(), tr.n());
        assert_eq!(tr.row_slot.len(), tr.m());
        // Every slot used exactly once, final-time variable last.
        let mut seen = vec![false; tr.n() + tr.m()];
        for &s in tr.var_slot.iter().chain(tr.row_slot.iter()) {
            assert!(!seen[s]);
            seen[s] = true;
        }
        assert!(seen.iter().all(|&b| b));
        assert_eq!(tr.var_slot[tr.t_var], tr.n() + tr.m() - 1);
        // In-band couplings fit the computed bandwidth.
        let nb = tr.n() + tr.m() - 1;
        assert!(tr.jacobian(&tr.pack(&default_guess(&spec)), &mut |r, v, _| {
            let (rs, vs) = (tr.row_slot[r], tr.var_slot[v]);
            if rs < nb && vs < nb {
                assert!(rs.abs_diff(vs) <= tr.half_bandwidth);
            }
        }));
    }
}
