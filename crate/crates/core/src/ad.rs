//! Forward-mode automatic differentiation scalars.
//!
//! The vehicle dynamics are written once, generically over [`Real`], and then
//! instantiated with:
//!
//! - `f64` for plain evaluation,
//! - [`Dual`] for exact Jacobians (one pass seeds all input directions),
//! - [`Taylor2`] for exact weighted Hessians of the dynamics, as needed by the
//!   collocation solver's Lagrangian.
//!
//! [`Taylor2`] carries value, gradient, and the packed upper triangle of the
//! Hessian; the packed length `H` must equal `N * (N + 1) / 2` for `N`
//! directions (checked at construction).

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar usable in the generic dynamics: arithmetic, trig, and a readable
/// primal value for guards and branching.
pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn constant(v: f64) -> Self;
    /// Primal (zeroth-order) value.
    fn value(self) -> f64;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
}

impl Real for f64 {
    #[inline]
    fn constant(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
}

/// First-order dual number over `N` simultaneous directions.
#[derive(Clone, Copy, Debug)]
pub struct Dual<const N: usize> {
    pub re: f64,
    pub d: [f64; N],
}

impl<const N: usize> Dual<N> {
    #[inline]
    pub fn constant(v: f64) -> Self {
        Self { re: v, d: [0.0; N] }
    }

    /// Variable seeded along direction `index`.
    #[inline]
    pub fn var(v: f64, index: usize) -> Self {
        let mut d = [0.0; N];
        d[index] = 1.0;
        Self { re: v, d }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        let mut d = self.d;
        for i in 0..N {
            d[i] += rhs.d[i];
        }
        Self { re: self.re + rhs.re, d }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        let mut d = self.d;
        for i in 0..N {
            d[i] -= rhs.d[i];
        }
        Self { re: self.re - rhs.re, d }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = self.d[i] * rhs.re + self.re * rhs.d[i];
        }
        Self { re: self.re * rhs.re, d }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        // Primal uses a true division so values stay bit-identical to the
        // plain f64 path; derivative terms may use the reciprocal.
        let re = self.re / rhs.re;
        let inv = 1.0 / rhs.re;
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = (self.d[i] - re * rhs.d[i]) * inv;
        }
        Self { re, d }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        let mut d = self.d;
        for x in &mut d {
            *x = -*x;
        }
        Self { re: -self.re, d }
    }
}

impl<const N: usize> Add<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: f64) -> Self {
        Self { re: self.re + rhs, d: self.d }
    }
}

impl<const N: usize> Sub<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: f64) -> Self {
        Self { re: self.re - rhs, d: self.d }
    }
}

impl<const N: usize> Mul<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: f64) -> Self {
        let mut d = self.d;
        for x in &mut d {
            *x *= rhs;
        }
        Self { re: self.re * rhs, d }
    }
}

impl<const N: usize> Div<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        let inv = 1.0 / rhs;
        let mut d = self.d;
        for x in &mut d {
            *x *= inv;
        }
        Self { re: self.re / rhs, d }
    }
}

impl<const N: usize> Real for Dual<N> {
    #[inline]
    fn constant(v: f64) -> Self {
        Dual::constant(v)
    }
    #[inline]
    fn value(self) -> f64 {
        self.re
    }
    #[inline]
    fn sin(self) -> Self {
        // sin/cos evaluated separately so primal values are bit-identical to
        // the plain f64 path (sin_cos can round differently).
        let (s, c) = (self.re.sin(), self.re.cos());
        let mut d = self.d;
        for x in &mut d {
            *x *= c;
        }
        Self { re: s, d }
    }
    #[inline]
    fn cos(self) -> Self {
        let (s, c) = (self.re.sin(), self.re.cos());
        let mut d = self.d;
        for x in &mut d {
            *x *= -s;
        }
        Self { re: c, d }
    }
}

/// Packed upper-triangle index of entry `(i, j)` with `i <= j` for dimension `n`.
#[inline]
pub fn tri_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i <= j && j < n);
    i * n - i * (i + 1) / 2 + j
}

/// Second-order Taylor scalar: value, gradient over `N` directions, and packed
/// upper-triangular Hessian of length `H = N * (N + 1) / 2`.
#[derive(Clone, Copy, Debug)]
pub struct Taylor2<const N: usize, const H: usize> {
    pub re: f64,
    pub g: [f64; N],
    pub h: [f64; H],
}

impl<const N: usize, const H: usize> Taylor2<N, H> {
    #[inline]
    pub fn constant(v: f64) -> Self {
        assert_eq!(H, N * (N + 1) / 2, "packed Hessian length mismatch");
        Self { re: v, g: [0.0; N], h: [0.0; H] }
    }

    /// Variable seeded along direction `index`.
    #[inline]
    pub fn var(v: f64, index: usize) -> Self {
        let mut t = Self::constant(v);
        t.g[index] = 1.0;
        t
    }

    /// Hessian entry `(i, j)` in any order.
    #[inline]
    pub fn hess(&self, i: usize, j: usize) -> f64 {
        let (a, b) = if i <= j { (i, j) } else { (j, i) };
        self.h[tri_index(N, a, b)]
    }

    /// Univariate chain rule: given `f(v)`, `f'(v)`, `f''(v)` at `v = self.re`.
    #[inline]
    fn chain(self, f: f64, df: f64, ddf: f64) -> Self {
        let mut g = [0.0; N];
        for i in 0..N {
            g[i] = df * self.g[i];
        }
        let mut h = [0.0; H];
        let mut idx = 0;
        for i in 0..N {
            let gi = self.g[i];
            for j in i..N {
                h[idx] = df * self.h[idx] + ddf * gi * self.g[j];
                idx += 1;
            }
        }
        Self { re: f, g, h }
    }
}

impl<const N: usize, const H: usize> Add for Taylor2<N, H> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        let mut g = self.g;
        for i in 0..N {
            g[i] += rhs.g[i];
        }
        let mut h = self.h;
        for i in 0..H {
            h[i] += rhs.h[i];
        }
        Self { re: self.re + rhs.re, g, h }
    }
}

impl<const N: usize, const H: usize> Sub for Taylor2<N, H> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        let mut g = self.g;
        for i in 0..N {
            g[i] -= rhs.g[i];
        }
        let mut h = self.h;
        for i in 0..H {
            h[i] -= rhs.h[i];
        }
        Self { re: self.re - rhs.re, g, h }
    }
}

impl<const N: usize, const H: usize> Mul for Taylor2<N, H> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut g = [0.0; N];
        for i in 0..N {
            g[i] = self.g[i] * rhs.re + self.re * rhs.g[i];
        }
        let mut h = [0.0; H];
        let mut idx = 0;
        for i in 0..N {
            let sgi = self.g[i];
            let rgi = rhs.g[i];
            for j in i..N {
                h[idx] = self.re * rhs.h[idx]
                    + rhs.re * self.h[idx]
                    + sgi * rhs.g[j]
                    + rgi * self.g[j];
                idx += 1;
            }
        }
        Self { re: self.re * rhs.re, g, h }
    }
}

impl<const N: usize, const H: usize> Div for Taylor2<N, H> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let v = rhs.re;
        let inv = 1.0 / v;
        let mut out = self * rhs.chain(inv, -inv * inv, 2.0 * inv * inv * inv);
        // Primal uses a true division to match the plain f64 path bit for bit.
        out.re = self.re / v;
        out
    }
}

impl<const N: usize, const H: usize> Neg for Taylor2<N, H> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        let mut g = self.g;
        for x in &mut g {
            *x = -*x;
        }
        let mut h = self.h;
        for x in &mut h {
            *x = -*x;
        }
        Self { re: -self.re, g, h }
    }
}

impl<const N: usize, const H: usize> Add<f64> for Taylor2<N, H> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: f64) -> Self {
        Self { re: self.re + rhs, g: self.g, h: self.h }
    }
}

impl<const N: usize, const H: usize> Sub<f64> for Taylor2<N, H> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: f64) -> Self {
        Self { re: self.re - rhs, g: self.g, h: self.h }
    }
}

impl<const N: usize, const H: usize> Mul<f64> for Taylor2<N, H> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: f64) -> Self {
        let mut g = self.g;
        for x in &mut g {
            *x *= rhs;
        }
        let mut h = self.h;
        for x in &mut h {
            *x *= rhs;
        }
        Self { re: self.re * rhs, g, h }
    }
}

impl<const N: usize, const H: usize> Div<f64> for Taylor2<N, H> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        let mut out = self * (1.0 / rhs);
        out.re = self.re / rhs;
        out
    }
}

impl<const N: usize, const H: usize> Real for Taylor2<N, H> {
    #[inline]
    fn constant(v: f64) -> Self {
        Taylor2::constant(v)
    }
    #[inline]
    fn value(self) -> f64 {
        self.re
    }
    #[inline]
    fn sin(self) -> Self {
        let (s, c) = (self.re.sin(), self.re.cos());
        self.chain(s, c, -s)
    }
    #[inline]
    fn cos(self) -> Self {
        let (s, c) = (self.re.sin(), self.re.cos());
        self.chain(c, -s, -c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type D3 = Dual<3>;
    type T3 = Taylor2<3, 6>;

    // Test function with dense coupling: f(x) = sin(x0 * x1) / x2 + cos(x2) * x0.
    fn f<S: Real>(x: [S; 3]) -> S {
        (x[0] * x[1]).sin() / x[2] + x[2].cos() * x[0]
    }

    fn f_grad(x: [f64; 3]) -> [f64; 3] {
        let (x0, x1, x2) = (x[0], x[1], x[2]);
        [
            x1 * (x0 * x1).cos() / x2 + x2.cos(),
            x0 * (x0 * x1).cos() / x2,
            -(x0 * x1).sin() / (x2 * x2) - x2.sin() * x0,
        ]
    }

    const X: [f64; 3] = [0.7, -1.3, 1.9];

    #[test]
    fn dual_matches_analytic_gradient() {
        let xd = [D3::var(X[0], 0), D3::var(X[1], 1), D3::var(X[2], 2)];
        let y = f(xd);
        assert_eq!(y.re, f(X));
        let g = f_grad(X);
        for i in 0..3 {
            assert!((y.d[i] - g[i]).abs() < 1e-14, "d{i}: {} vs {}", y.d[i], g[i]);
        }
    }

    #[test]
    fn taylor2_matches_fd_hessian() {
        let xt = [T3::var(X[0], 0), T3::var(X[1], 1), T3::var(X[2], 2)];
        let y = f(xt);
        assert_eq!(y.re, f(X));
        let g = f_grad(X);
        for i in 0..3 {
            assert!((y.g[i] - g[i]).abs() < 1e-14);
        }
        // Central differences of the analytic gradient give the Hessian columns.
        let eps = 1e-6;
        for j in 0..3 {
            let mut xp = X;
            let mut xm = X;
            xp[j] += eps;
            xm[j] -= eps;
            let gp = f_grad(xp);
            let gm = f_grad(xm);
            for i in 0..3 {
                let fd = (gp[i] - gm[i]) / (2.0 * eps);
                assert!(
                    (y.hess(i, j) - fd).abs() < 1e-7,
                    "H[{i}][{j}] = {} vs fd {}",
                    y.hess(i, j),
                    fd
                );
            }
        }
    }

    #[test]
    fn division_exact_on_rationals() {
        // g(x) = x0 / x1 has known derivatives; checks Div end to end.
        let x0 = 3.0;
        let x1 = -2.0;
        let g = T3::var(x0, 0) / T3::var(x1, 1);
        assert_eq!(g.re, -1.5);
        assert!((g.g[0] - 1.0 / x1).abs() < 1e-15);
        assert!((g.g[1] + x0 / (x1 * x1)).abs() < 1e-15);
        assert!((g.hess(0, 1) + 1.0 / (x1 * x1)).abs() < 1e-15);
        assert!((g.hess(1, 1) - 2.0 * x0 / (x1 * x1 * x1)).abs() < 1e-15);
        assert_eq!(g.hess(0, 0), 0.0);
    }

    #[test]
    fn mixed_f64_ops_keep_derivatives() {
        let x = T3::var(0.4, 1);
        let y = ((x * 2.0 + 1.0) - 0.5) / 4.0;
        assert!((y.re - (0.4 * 2.0 + 0.5) / 4.0).abs() < 1e-15);
        assert!((y.g[1] - 0.5).abs() < 1e-15);
        assert_eq!(y.hess(1, 1), 0.0);
    }

    #[test]
    #[should_panic(expected = "packed Hessian length mismatch")]
    fn wrong_packed_length_is_rejected() {
        let _ = Taylor2::<3, 5>::constant(1.0);
    }
}
