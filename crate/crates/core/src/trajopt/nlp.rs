//! Primal-dual interior-point solver for equality-constrained NLPs with box
//! bounds and banded-plus-arrow KKT structure.
//!
//! The problem class is
//!
//! ```text
//! minimize  f(z)    subject to  c(z) = 0,    lo <= z <= hi,
//! ```
//!
//! with general inequalities expected to be pre-slacked into equalities by the
//! caller. The algorithm is a monotone Fiacco-McCormick barrier method: for a
//! decreasing sequence of barrier parameters `mu`, Newton steps are taken on
//! the primal-dual perturbed KKT conditions, globalized by a backtracking line
//! search on the l1 penalty merit function with a fraction-to-boundary rule.
//! The Newton systems are solved by [`ArrowBandMatrix`] after symmetric
//! interleaving; wrong inertia is repaired by progressive primal (and if
//! needed dual) regularization, which keeps the system quasi-definite.

use super::band::{ArrowBandMatrix, Inertia};

/// Problem description with a banded KKT ordering.
///
/// Evaluation methods return `false` (or `None`) when the point is outside the
/// domain (for example a singular attitude); the line search treats such trial
/// points as rejected.
pub(crate) trait BandNlp {
    fn n(&self) -> usize;
    fn m(&self) -> usize;
    /// Finite lower/upper bounds for every variable.
    fn bounds(&self) -> (Vec<f64>, Vec<f64>);
    fn objective(&self, z: &[f64]) -> Option<f64>;
    fn gradient(&self, z: &[f64], g: &mut [f64]) -> bool;
    fn constraints(&self, z: &[f64], c: &mut [f64]) -> bool;
    /// Emits Jacobian entries as `(row, var, value)`.
    fn jacobian(&self, z: &[f64], emit: &mut dyn FnMut(usize, usize, f64)) -> bool;
    /// Emits Lagrangian Hessian entries `(i, j, value)` with `i <= j`, for
    /// objective weight 1 and the given equality multipliers.
    fn lag_hessian(&self, z: &[f64], lam: &[f64], emit: &mut dyn FnMut(usize, usize, f64)) -> bool;
    fn kkt_layout(&self) -> KktLayout;
    /// Absolute feasibility tolerance per constraint row.
    fn row_tolerances(&self) -> Vec<f64>;
}

/// Symmetric interleaving of variables and constraint rows into KKT slots.
///
/// Slots `0..nb` form the banded region (`nb = n + m - arrow vars`); arrow
/// variables occupy the trailing slots and may couple with everything.
pub(crate) struct KktLayout {
    pub var_slot: Vec<usize>,
    pub row_slot: Vec<usize>,
    pub half_bandwidth: usize,
    pub n_arrow: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct IpOptions {
    pub max_iterations: usize,
    pub mu_init: f64,
    pub mu_min: f64,
    pub tol_stationarity: f64,
    pub tol_complementarity: f64,
    /// Inner loop leaves a barrier subproblem once its KKT error drops below
    /// `kappa_eps * mu`.
    pub kappa_eps: f64,
    pub verbose: bool,
}

impl Default for IpOptions {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            mu_init: 1e-2,
            mu_min: 1e-12,
            tol_stationarity: 1e-6,
            tol_complementarity: 1e-8,
            kappa_eps: 10.0,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum IpStatus {
    Converged,
    MaxIterations,
    /// Line search repeatedly failed to make progress.
    Stalled,
    /// Evaluation failed at the current (accepted) iterate.
    EvalFailed,
    /// KKT system could not be factored even fully regularized.
    SingularSystem,
}

pub(crate) struct IpSolution {
    pub z: Vec<f64>,
    pub lam: Vec<f64>,
    pub status: IpStatus,
    pub iterations: usize,
    pub stationarity: f64,
    /// max_i |c_i| / tol_i (<= 1 when feasible).
    pub feasibility: f64,
    pub complementarity: f64,
    pub objective: f64,
}

struct Workspace {
    g: Vec<f64>,
    c: Vec<f64>,
    c_trial: Vec<f64>,
    jac: Vec<(u32, u32, f64)>,
    hess: Vec<(u32, u32, f64)>,
    rhs: Vec<f64>,
    step: Vec<f64>,
    sigma: Vec<f64>,
    z_trial: Vec<f64>,
}

pub(crate) fn solve(nlp: &dyn BandNlp, z_init: &[f64], opts: &IpOptions) -> IpSolution {
    let n = nlp.n();
    let m = nlp.m();
    let (lo, hi) = nlp.bounds();
    let layout = nlp.kkt_layout();
    let row_tol = nlp.row_tolerances();
    assert_eq!(z_init.len(), n);
    assert_eq!(layout.var_slot.len(), n);
    assert_eq!(layout.row_slot.len(), m);
    let nb = n + m - layout.n_arrow;

    // Push the start point strictly inside the box.
    let mut z: Vec<f64> = z_init
        .iter()
        .zip(lo.iter().zip(hi.iter()))
        .map(|(&v, (&l, &h))| {
            let pad = 1e-4 * (h - l).min(1e4).max(1e-8);
            v.clamp(l + pad, h - pad)
        })
        .collect();

    let mut mu = opts.mu_init;
    let mut lam = vec![0.0; m];
    let mut zl: Vec<f64> = (0..n).map(|i| (mu / (z[i] - lo[i])).clamp(1e-12, 1e12)).collect();
    let mut zu: Vec<f64> = (0..n).map(|i| (mu / (hi[i] - z[i])).clamp(1e-12, 1e12)).collect();

    let mut ws = Workspace {
        g: vec![0.0; n],
        c: vec![0.0; m],
        c_trial: vec![0.0; m],
        jac: Vec::new(),
        hess: Vec::new(),
        rhs: vec![0.0; nb + layout.n_arrow],
        step: vec![0.0; nb + layout.n_arrow],
        sigma: vec![0.0; n],
        z_trial: vec![0.0; n],
    };
    let mut kkt = ArrowBandMatrix::new(nb, layout.half_bandwidth, layout.n_arrow);

    let fail = |status: IpStatus, z: &[f64], lam: &[f64], it: usize| IpSolution {
        z: z.to_vec(),
        lam: lam.to_vec(),
        status,
        iterations: it,
        stationarity: f64::INFINITY,
        feasibility: f64::INFINITY,
        complementarity: f64::INFINITY,
        objective: f64::NAN,
    };

    let mut obj = match nlp.objective(&z) {
        Some(v) if v.is_finite() => v,
        _ => return fail(IpStatus::EvalFailed, &z, &lam, 0),
    };
    if !nlp.constraints(&z, &mut ws.c) {
        return fail(IpStatus::EvalFailed, &z, &lam, 0);
    }

    let mut nu = 1.0f64; // merit penalty weight
    let mut delta_last = 0.0f64;
    let mut stalls = 0usize;
    let mut iterations = 0usize;

    loop {
        // Derivatives at the current (accepted) point.
        if !nlp.gradient(&z, &mut ws.g) {
            return fail(IpStatus::EvalFailed, &z, &lam, iterations);
        }
        ws.jac.clear();
        {
            let jac = &mut ws.jac;
            if !nlp.jacobian(&z, &mut |r, v, val| jac.push((r as u32, v as u32, val))) {
                return fail(IpStatus::EvalFailed, &z, &lam, iterations);
            }
        }

        // KKT errors. Dual infeasibility: g + J^T lam - zl + zu.
        let mut r_dual: Vec<f64> = ws.g.clone();
        for &(r, v, val) in &ws.jac {
            r_dual[v as usize] += val * lam[r as usize];
        }
        for i in 0..n {
            r_dual[i] += zu[i] - zl[i];
        }
        let sum_mult: f64 = lam.iter().map(|v| v.abs()).sum::<f64>()
            + zl.iter().sum::<f64>()
            + zu.iter().sum::<f64>();
        let s_d = (sum_mult / ((m + 2 * n) as f64)).max(100.0) / 100.0;
        let s_c = ((zl.iter().sum::<f64>() + zu.iter().sum::<f64>()) / ((2 * n) as f64)).max(100.0)
            / 100.0;
        let e_dual = r_dual.iter().fold(0.0f64, |a, &v| a.max(v.abs())) / s_d;
        let e_feas = ws.c.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let e_feas_rel = ws
            .c
            .iter()
            .zip(row_tol.iter())
            .fold(0.0f64, |a, (&v, &t)| a.max(v.abs() / t));
        let comp = |mu_ref: f64| -> f64 {
            let mut e = 0.0f64;
            for i in 0..n {
                e = e.max(((z[i] - lo[i]) * zl[i] - mu_ref).abs());
                e = e.max(((hi[i] - z[i]) * zu[i] - mu_ref).abs());
            }
            e / s_c
        };
        let e_comp0 = comp(0.0);

        if opts.verbose {
            eprintln!(
                "it {iterations:3} mu {mu:9.2e} f {obj:13.6e} dual {e_dual:9.2e} feas {e_feas:9.2e} comp {e_comp0:9.2e}"
            );
        }

        if e_dual <= opts.tol_stationarity
            && e_feas_rel <= 1.0
            && e_comp0 <= opts.tol_complementarity
        {
            return IpSolution {
                z,
                lam,
                status: IpStatus::Converged,
                iterations,
                stationarity: e_dual,
                feasibility: e_feas_rel,
                complementarity: e_comp0,
                objective: obj,
            };
        }
        if iterations >= opts.max_iterations {
            return IpSolution {
                z,
                lam,
                status: IpStatus::MaxIterations,
                iterations,
                stationarity: e_dual,
                feasibility: e_feas_rel,
                complementarity: e_comp0,
                objective: obj,
            };
        }

        // Barrier subproblem solved to within kappa_eps * mu: tighten mu.
        while mu > opts.mu_min && e_dual.max(e_feas).max(comp(mu)) <= opts.kappa_eps * mu {
            mu = (0.2 * mu).min(mu.powf(1.5)).max(opts.mu_min);
        }
        let tau = 0.99f64.max(1.0 - mu);

        // Lagrangian Hessian at the accepted point.
        ws.hess.clear();
        {
            let hess = &mut ws.hess;
            if !nlp.lag_hessian(&z, &lam, &mut |i, j, val| {
                debug_assert!(i <= j);
                hess.push((i as u32, j as u32, val));
            }) {
                return fail(IpStatus::EvalFailed, &z, &lam, iterations);
            }
        }
        for i in 0..n {
            ws.sigma[i] = zl[i] / (z[i] - lo[i]) + zu[i] / (hi[i] - z[i]);
        }

        // Assemble and factor with inertia correction.
        let mut delta_w = 0.0f64;
        let mut delta_c = 0.0f64;
        let mut factored = false;
        for attempt in 0..32 {
            kkt.reset();
            for &(i, j, val) in &ws.hess {
                let (si, sj) = (layout.var_slot[i as usize], layout.var_slot[j as usize]);
                kkt.add(si, sj, val);
                if si == sj && i != j {
                    kkt.add(si, sj, val); // off-diagonal pair collapsing onto a slot diagonal
                }
            }
            for i in 0..n {
                let s = layout.var_slot[i];
                kkt.add(s, s, ws.sigma[i] + delta_w);
            }
            for &(r, v, val) in &ws.jac {
                kkt.add(layout.row_slot[r as usize], layout.var_slot[v as usize], val);
            }
            for r in 0..m {
                let s = layout.row_slot[r];
                kkt.add(s, s, -delta_c.max(1e-13));
            }
            match kkt.factor() {
                Ok(Inertia { positive, negative, .. }) if positive == n && negative == m => {
                    factored = true;
                    break;
                }
                _ => {
                    if delta_w == 0.0 {
                        delta_w = if delta_last == 0.0 { 1e-4 } else { (delta_last / 3.0).max(1e-20) };
                    } else {
                        delta_w *= 8.0;
                    }
                    if attempt >= 12 && delta_c == 0.0 {
                        delta_c = 1e-8 * mu.sqrt().max(1e-2);
                    }
                    if delta_w > 1e12 {
                        break;
                    }
                }
            }
        }
        if !factored {
            return fail(IpStatus::SingularSystem, &z, &lam, iterations);
        }
        if delta_w > 0.0 {
            delta_last = delta_w;
        }

        // Newton right-hand side (barrier form after eliminating zl, zu).
        ws.rhs.fill(0.0);
        for i in 0..n {
            let v = -(ws.g[i]) + mu / (z[i] - lo[i]) - mu / (hi[i] - z[i]);
            ws.rhs[layout.var_slot[i]] = v;
        }
        for &(r, v, val) in &ws.jac {
            ws.rhs[layout.var_slot[v as usize]] -= val * lam[r as usize];
        }
        for r in 0..m {
            ws.rhs[layout.row_slot[r]] = -ws.c[r];
        }
        ws.step.copy_from_slice(&ws.rhs);
        kkt.solve_in_place(&mut ws.step);

        let dz: Vec<f64> = (0..n).map(|i| ws.step[layout.var_slot[i]]).collect();
        let dlam: Vec<f64> = (0..m).map(|r| ws.step[layout.row_slot[r]]).collect();

        // Fraction-to-boundary step limits.
        let mut alpha_pri = 1.0f64;
        for i in 0..n {
            if dz[i] < 0.0 {
                alpha_pri = alpha_pri.min(tau * (z[i] - lo[i]) / (-dz[i]));
            } else if dz[i] > 0.0 {
                alpha_pri = alpha_pri.min(tau * (hi[i] - z[i]) / dz[i]);
            }
        }
        let mut dzl = vec![0.0; n];
        let mut dzu = vec![0.0; n];
        let mut alpha_dual = 1.0f64;
        for i in 0..n {
            let sl = z[i] - lo[i];
            let su = hi[i] - z[i];
            dzl[i] = (mu - sl * zl[i]) / sl - zl[i] * dz[i] / sl;
            dzu[i] = (mu - su * zu[i]) / su + zu[i] * dz[i] / su;
            if dzl[i] < 0.0 {
                alpha_dual = alpha_dual.min(tau * zl[i] / (-dzl[i]));
            }
            if dzu[i] < 0.0 {
                alpha_dual = alpha_dual.min(tau * zu[i] / (-dzu[i]));
            }
        }

        // l1 penalty weight sized from the model decrease: just large enough
        // that the step is a descent direction for the merit with margin, so
        // the transient infeasibility of long Newton steps stays affordable.
        // Oversized weights decay once the requirement drops.
        let mut desc_obj = 0.0;
        for i in 0..n {
            desc_obj += (ws.g[i] - mu / (z[i] - lo[i]) + mu / (hi[i] - z[i])) * dz[i];
        }
        let mut d_h_d = 0.0;
        for &(i, j, val) in &ws.hess {
            let w = if i == j { 1.0 } else { 2.0 };
            d_h_d += w * val * dz[i as usize] * dz[j as usize];
        }
        for i in 0..n {
            d_h_d += (ws.sigma[i] + delta_w) * dz[i] * dz[i];
        }
        let c_norm1 = ws.c.iter().map(|v| v.abs()).sum::<f64>();
        let nu_req = if c_norm1 > 1e-14 {
            (desc_obj + 0.5 * d_h_d.max(0.0)).max(0.0) / (0.5 * c_norm1)
        } else {
            0.0
        };
        let nu_lo = nu_req.max(1e-3);
        if nu < nu_req {
            nu = 1.5 * nu_req;
        } else if nu > 10.0 * nu_lo {
            nu = (0.2 * nu).max(nu_lo);
        }
        let barrier = |zv: &[f64]| -> f64 {
            let mut b = 0.0;
            for i in 0..n {
                b -= mu * ((zv[i] - lo[i]).ln() + (hi[i] - zv[i]).ln());
            }
            b
        };
        let phi0 = obj + barrier(&z) + nu * c_norm1;
        let dphi = desc_obj - nu * c_norm1;

        let eta = 1e-4;
        let mut alpha = alpha_pri;
        let mut accepted = false;
        let mut obj_trial = obj;
        let mut soc_tried = false;
        for _ in 0..45 {
            for i in 0..n {
                ws.z_trial[i] = z[i] + alpha * dz[i];
            }
            let ok = nlp.constraints(&ws.z_trial, &mut ws.c_trial);
            let f_t = if ok { nlp.objective(&ws.z_trial) } else { None };
            if let Some(ft) = f_t {
                if ft.is_finite() {
                    let c1_t: f64 = ws.c_trial.iter().map(|v| v.abs()).sum();
                    let phi_t = ft + barrier(&ws.z_trial) + nu * c1_t;
                    let sufficient = if dphi < 0.0 {
                        phi_t <= phi0 + eta * alpha * dphi
                    } else {
                        phi_t < phi0
                    };
                    if sufficient {
                        obj_trial = ft;
                        accepted = true;
                        break;
                    }
                    // One second-order correction at the full step: re-solve
                    // with the trial constraint values to cut curvature error.
                    if !soc_tried && alpha == alpha_pri && c1_t > c_norm1 {
                        soc_tried = true;
                        ws.rhs.fill(0.0);
                        for r in 0..m {
                            ws.rhs[layout.row_slot[r]] = -ws.c_trial[r];
                        }
                        ws.step.copy_from_slice(&ws.rhs);
                        kkt.solve_in_place(&mut ws.step);
                        let mut alpha_soc = alpha;
                        for i in 0..n {
                            let d = ws.step[layout.var_slot[i]];
                            let znew = ws.z_trial[i] + d;
                            if znew <= lo[i] || znew >= hi[i] {
                                alpha_soc = 0.0;
                            }
                        }
                        if alpha_soc > 0.0 {
                            let zsoc: Vec<f64> = (0..n)
                                .map(|i| ws.z_trial[i] + ws.step[layout.var_slot[i]])
                                .collect();
                            if nlp.constraints(&zsoc, &mut ws.c_trial) {
                                if let Some(fs) = nlp.objective(&zsoc) {
                                    let c1_s: f64 = ws.c_trial.iter().map(|v| v.abs()).sum();
                                    let phi_s = fs + barrier(&zsoc) + nu * c1_s;
                                    if phi_s <= phi0 + eta * alpha * dphi.min(0.0) {
                                        ws.z_trial.copy_from_slice(&zsoc);
                                        obj_trial = fs;
                                        accepted = true;
                                        break;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            alpha *= 0.5;
            if alpha < 1e-14 {
                break;
            }
        }

        iterations += 1;
        if opts.verbose {
            eprintln!(
                "      alpha {alpha:9.2e} ftb {alpha_pri:9.2e} nu {nu:9.2e} c1 {c_norm1:9.2e} dw {delta_w:9.2e} acc {accepted}"
            );
        }
        if !accepted {
            stalls += 1;
            if stalls >= 5 {
                return IpSolution {
                    z,
                    lam,
                    status: IpStatus::Stalled,
                    iterations,
                    stationarity: e_dual,
                    feasibility: e_feas_rel,
                    complementarity: e_comp0,
                    objective: obj,
                };
            }
            // Force fresh regularization and retry from the same point.
            delta_last = (delta_last * 100.0).max(1e-4);
            continue;
        }
        stalls = 0;

        z.copy_from_slice(&ws.z_trial);
        obj = obj_trial;
        if !nlp.constraints(&z, &mut ws.c) {
            return fail(IpStatus::EvalFailed, &z, &lam, iterations);
        }
        for r in 0..m {
            lam[r] += alpha * dlam[r];
        }
        // Dual updates with safeguards keeping z consistent with mu.
        const KAPPA_SIGMA: f64 = 1e10;
        for i in 0..n {
            zl[i] += alpha_dual * dzl[i];
            zu[i] += alpha_dual * dzu[i];
            let sl = z[i] - lo[i];
            let su = hi[i] - z[i];
            zl[i] = zl[i].clamp(mu / (KAPPA_SIGMA * sl), (KAPPA_SIGMA * mu / sl).max(1e-40));
            zu[i] = zu[i].clamp(mu / (KAPPA_SIGMA * su), (KAPPA_SIGMA * mu / su).max(1e-40));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Dense test problem: trivial layout, everything in one band.
    struct DenseNlp {
        n: usize,
        m: usize,
        lo: Vec<f64>,
        hi: Vec<f64>,
        f: Box<dyn Fn(&[f64]) -> f64>,
        g: Box<dyn Fn(&[f64]) -> Vec<f64>>,
        c: Box<dyn Fn(&[f64]) -> Vec<f64>>,
        jac: Box<dyn Fn(&[f64]) -> Vec<(usize, usize, f64)>>,
        hess: Box<dyn Fn(&[f64], &[f64]) -> Vec<(usize, usize, f64)>>,
    }

    impl BandNlp for DenseNlp {
        fn n(&self) -> usize {
            self.n
        }
        fn m(&self) -> usize {
            self.m
        }
        fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (self.lo.clone(), self.hi.clone())
        }
        fn objective(&self, z: &[f64]) -> Option<f64> {
            Some((self.f)(z))
        }
        fn gradient(&self, z: &[f64], g: &mut [f64]) -> bool {
            g.copy_from_slice(&(self.g)(z));
            true
        }
        fn constraints(&self, z: &[f64], c: &mut [f64]) -> bool {
            c.copy_from_slice(&(self.c)(z));
            true
        }
        fn jacobian(&self, z: &[f64], emit: &mut dyn FnMut(usize, usize, f64)) -> bool {
            for (r, v, val) in (self.jac)(z) {
                emit(r, v, val);
            }
            true
        }
        fn lag_hessian(
            &self,
            z: &[f64],
            lam: &[f64],
            emit: &mut dyn FnMut(usize, usize, f64),
        ) -> bool {
            for (i, j, val) in (self.hess)(z, lam) {
                emit(i, j, val);
            }
            true
        }
        fn kkt_layout(&self) -> KktLayout {
            KktLayout {
                var_slot: (0..self.n).collect(),
                row_slot: (self.n..self.n + self.m).collect(),
                half_bandwidth: self.n + self.m - 1,
                n_arrow: 0,
            }
        }
        fn row_tolerances(&self) -> Vec<f64> {
            vec![1e-8; self.m]
        }
    }

    #[test]
    fn bound_constrained_quadratic() {
        // min (x - 2)^2 on [0, 1]: solution pinned at the upper bound.
        let p = DenseNlp {
            n: 1,
            m: 0,
            lo: vec![0.0],
            hi: vec![1.0],
            f: Box::new(|z| (z[0] - 2.0).powi(2)),
            g: Box::new(|z| vec![2.0 * (z[0] - 2.0)]),
            c: Box::new(|_| vec![]),
            jac: Box::new(|_| vec![]),
            hess: Box::new(|_, _| vec![(0, 0, 2.0)]),
        };
        let sol = solve(&p, &[0.5], &IpOptions::default());
        assert_eq!(sol.status, IpStatus::Converged);
        assert!((sol.z[0] - 1.0).abs() < 1e-7, "x = {}", sol.z[0]);
    }

    #[test]
    fn equality_quadratic_matches_analytic() {
        // min 0.5 (x0^2 + 2 x1^2) s.t. x0 + x1 = 3 -> x = (2, 1), lam = -2.
        let p = DenseNlp {
            n: 2,
            m: 1,
            lo: vec![-50.0; 2],
            hi: vec![50.0; 2],
            f: Box::new(|z| 0.5 * (z[0] * z[0] + 2.0 * z[1] * z[1])),
            g: Box::new(|z| vec![z[0], 2.0 * z[1]]),
            c: Box::new(|z| vec![z[0] + z[1] - 3.0]),
            jac: Box::new(|_| vec![(0, 0, 1.0), (0, 1, 1.0)]),
            hess: Box::new(|_, _| vec![(0, 0, 1.0), (1, 1, 2.0)]),
        };
        let sol = solve(&p, &[0.0, 0.0], &IpOptions::default());
        assert_eq!(sol.status, IpStatus::Converged);
        assert!((sol.z[0] - 2.0).abs() < 1e-7);
        assert!((sol.z[1] - 1.0).abs() < 1e-7);
        assert!((sol.lam[0] + 2.0).abs() < 1e-6, "lam = {}", sol.lam[0]);
    }

    #[test]
    fn rosenbrock_in_a_box() {
        let p = DenseNlp {
            n: 2,
            m: 0,
            lo: vec![-5.0; 2],
            hi: vec![5.0; 2],
            f: Box::new(|z| (1.0 - z[0]).powi(2) + 100.0 * (z[1] - z[0] * z[0]).powi(2)),
            g: Box::new(|z| {
                vec![
                    -2.0 * (1.0 - z[0]) - 400.0 * z[0] * (z[1] - z[0] * z[0]),
                    200.0 * (z[1] - z[0] * z[0]),
                ]
            }),
            c: Box::new(|_| vec![]),
            jac: Box::new(|_| vec![]),
            hess: Box::new(|z, _| {
                vec![
                    (0, 0, 2.0 - 400.0 * (z[1] - 3.0 * z[0] * z[0])),
                    (0, 1, -400.0 * z[0]),
                    (1, 1, 200.0),
                ]
            }),
        };
        let sol = solve(&p, &[-1.2, 1.0], &IpOptions::default());
        assert_eq!(sol.status, IpStatus::Converged);
        assert!((sol.z[0] - 1.0).abs() < 1e-6, "x0 = {}", sol.z[0]);
        assert!((sol.z[1] - 1.0).abs() < 1e-6, "x1 = {}", sol.z[1]);
    }

    #[test]
    fn slacked_inequality_activates() {
        // min (x - 3)^2 s.t. x <= 1, written as x - 1 + s = 0 with s >= 0.
        let p = DenseNlp {
            n: 2,
            m: 1,
            lo: vec![-10.0, 0.0],
            hi: vec![10.0, 1e6],
            f: Box::new(|z| (z[0] - 3.0).powi(2)),
            g: Box::new(|z| vec![2.0 * (z[0] - 3.0), 0.0]),
            c: Box::new(|z| vec![z[0] - 1.0 + z[1]]),
            jac: Box::new(|_| vec![(0, 0, 1.0), (0, 1, 1.0)]),
            hess: Box::new(|_, _| vec![(0, 0, 2.0)]),
        };
        let sol = solve(&p, &[0.0, 0.5], &IpOptions::default());
        assert_eq!(sol.status, IpStatus::Converged);
        assert!((sol.z[0] - 1.0).abs() < 1e-7, "x = {}", sol.z[0]);
        assert!(sol.z[1].abs() < 1e-7, "s = {}", sol.z[1]);
    }

    #[test]
    fn hs071_reaches_reference_optimum() {
        // Classic 4-var benchmark:
        // min x0 x3 (x0 + x1 + x2) + x2
        // s.t. x0 x1 x2 x3 - 25 - s = 0 (s >= 0, from >= 25),
        //      x0^2 + x1^2 + x2^2 + x3^2 = 40, 1 <= x <= 5.
        let p = DenseNlp {
            n: 5,
            m: 2,
            lo: vec![1.0, 1.0, 1.0, 1.0, 0.0],
            hi: vec![5.0, 5.0, 5.0, 5.0, 1e6],
            f: Box::new(|z| z[0] * z[3] * (z[0] + z[1] + z[2]) + z[2]),
            g: Box::new(|z| {
                vec![
                    z[3] * (2.0 * z[0] + z[1] + z[2]),
                    z[0] * z[3],
                    z[0] * z[3] + 1.0,
                    z[0] * (z[0] + z[1] + z[2]),
                    0.0,
                ]
            }),
            c: Box::new(|z| {
                vec![
                    z[0] * z[1] * z[2] * z[3] - 25.0 - z[4],
                    z[0] * z[0] + z[1] * z[1] + z[2] * z[2] + z[3] * z[3] - 40.0,
                ]
            }),
            jac: Box::new(|z| {
                vec![
                    (0, 0, z[1] * z[2] * z[3]),
                    (0, 1, z[0] * z[2] * z[3]),
                    (0, 2, z[0] * z[1] * z[3]),
                    (0, 3, z[0] * z[1] * z[2]),
                    (0, 4, -1.0),
                    (1, 0, 2.0 * z[0]),
                    (1, 1, 2.0 * z[1]),
                    (1, 2, 2.0 * z[2]),
                    (1, 3, 2.0 * z[3]),
                ]
            }),
            hess: Box::new(|z, lam| {
                let l0 = lam[0];
                let l1 = lam[1];
                vec![
                    (0, 0, 2.0 * z[3] + 2.0 * l1),
                    (0, 1, z[3] + l0 * z[2] * z[3]),
                    (0, 2, z[3] + l0 * z[1] * z[3]),
                    (0, 3, 2.0 * z[0] + z[1] + z[2] + l0 * z[1] * z[2]),
                    (1, 1, 2.0 * l1),
                    (1, 2, l0 * z[0] * z[3]),
                    (1, 3, z[0] + l0 * z[0] * z[2]),
                    (2, 2, 2.0 * l1),
                    (2, 3, z[0] + l0 * z[0] * z[1]),
                    (3, 3, 2.0 * l1),
                ]
            }),
        };
        let sol = solve(&p, &[1.0, 5.0, 5.0, 1.0, 0.1], &IpOptions::default());
        assert_eq!(sol.status, IpStatus::Converged);
        let expect = [1.0, 4.742999637, 3.821149979, 1.379408293];
        for i in 0..4 {
            assert!(
                (sol.z[i] - expect[i]).abs() < 1e-5,
                "x{i} = {} vs {}",
                sol.z[i],
                expect[i]
            );
        }
        assert!((sol.objective - 17.0140173).abs() < 1e-5);
        assert!(sol.iterations < 60, "took {} iterations", sol.iterations);
    }

    #[test]
    fn indefinite_objective_falls_to_a_corner() {
        // min x0 x1 s.t. x0 + x1 = 2 on [-10, 10]^2: concave along the
        // constraint, so the minimizer is a bound-active corner.
        let p = DenseNlp {
            n: 2,
            m: 1,
            lo: vec![-10.0; 2],
            hi: vec![10.0; 2],
            f: Box::new(|z| z[0] * z[1]),
            g: Box::new(|z| vec![z[1], z[0]]),
            c: Box::new(|z| vec![z[0] + z[1] - 2.0]),
            jac: Box::new(|_| vec![(0, 0, 1.0), (0, 1, 1.0)]),
            hess: Box::new(|_, _| vec![(0, 1, 1.0)]),
        };
        let sol = solve(&p, &[0.3, 1.7], &IpOptions::default());
        assert_eq!(sol.status, IpStatus::Converged);
        let hi = sol.z[0].max(sol.z[1]);
        let lo = sol.z[0].min(sol.z[1]);
        assert!((hi - 10.0).abs() < 1e-6 && (lo + 8.0).abs() < 1e-6, "z = {:?}", sol.z);
    }
}
