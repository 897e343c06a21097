//! Symmetric indefinite LDL^T factorization for banded matrices with a few
//! trailing dense rows ("arrow" structure).
//!
//! The collocation KKT systems interleave primal variables and constraint
//! multipliers node by node, which keeps every entry inside a narrow band
//! except the column of the free final time. That column (and in general a
//! handful of global variables) is handled as dense trailing rows eliminated
//! after the band via a Schur complement.
//!
//! No pivoting is performed: the solver regularizes the KKT matrix into a
//! quasi-definite form, which is strongly factorizable under any symmetric
//! permutation, and reads the inertia off the diagonal of `D`.

/// Inertia of the factored matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Inertia {
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

#[derive(Debug, thiserror::Error)]
pub(crate) enum FactorError {
    #[error("zero pivot at column {col}")]
    ZeroPivot { col: usize },
}

/// Banded symmetric matrix with `n_arrow` dense trailing rows/columns.
///
/// Entry `(i, j)` with both indices `< dim` must satisfy `|i - j| <= hb`.
pub(crate) struct ArrowBandMatrix {
    dim: usize,
    hb: usize,
    n_arrow: usize,
    /// Lower band, `band[r * dim + j] = A[j + r][j]` for `r in 0..=hb`.
    band: Vec<f64>,
    /// Dense arrow rows, `arrow[a * dim + j] = A[dim + a][j]`.
    arrow: Vec<f64>,
    /// Symmetric arrow corner, row-major `n_arrow x n_arrow`.
    corner: Vec<f64>,
    /// Pivots of the banded part after factorization.
    diag: Vec<f64>,
    /// Pivots of the Schur complement corner.
    corner_diag: Vec<f64>,
    factored: bool,
}

impl ArrowBandMatrix {
    pub fn new(dim: usize, hb: usize, n_arrow: usize) -> Self {
        Self {
            dim,
            hb,
            n_arrow,
            band: vec![0.0; (hb + 1) * dim],
            arrow: vec![0.0; n_arrow * dim],
            corner: vec![0.0; n_arrow * n_arrow],
            diag: vec![0.0; dim],
            corner_diag: vec![0.0; n_arrow],
            factored: false,
        }
    }

    pub fn total_dim(&self) -> usize {
        self.dim + self.n_arrow
    }

    pub fn reset(&mut self) {
        self.band.fill(0.0);
        self.arrow.fill(0.0);
        self.corner.fill(0.0);
        self.factored = false;
    }

    /// Adds `v` to entry `(i, j)`; symmetry is implicit, pass either order.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(!self.factored, "matrix already factored");
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        if hi < self.dim {
            let r = hi - lo;
            debug_assert!(
                r <= self.hb,
                "entry ({i}, {j}) outside half-bandwidth {}",
                self.hb
            );
            self.band[r * self.dim + lo] += v;
        } else if lo < self.dim {
            self.arrow[(hi - self.dim) * self.dim + lo] += v;
        } else {
            let (a, b) = (hi - self.dim, lo - self.dim);
            self.corner[a * self.n_arrow + b] += v;
            if a != b {
                self.corner[b * self.n_arrow + a] += v;
            }
        }
    }

    /// In-place LDL^T. Returns the inertia on success.
    pub fn factor(&mut self) -> Result<Inertia, FactorError> {
        let n = self.dim;
        let hb = self.hb;
        let na = self.n_arrow;
        const PIVOT_EPS: f64 = 1e-100;

        for j in 0..n {
            let k0 = j.saturating_sub(hb);
            // d_j = A_jj - sum L_jk^2 d_k over the band window.
            let mut d = self.band[j];
            for k in k0..j {
                let l = self.band[(j - k) * n + k];
                d -= l * l * self.diag[k];
            }
            if d.abs() < PIVOT_EPS {
                return Err(FactorError::ZeroPivot { col: j });
            }
            self.diag[j] = d;
            let inv_d = 1.0 / d;
            let imax = (j + hb).min(n - 1);
            for i in (j + 1)..=imax {
                let mut l = self.band[(i - j) * n + j];
                let kk0 = i.saturating_sub(hb).max(k0);
                for k in kk0..j {
                    l -= self.band[(i - k) * n + k] * self.diag[k] * self.band[(j - k) * n + k];
                }
                self.band[(i - j) * n + j] = l * inv_d;
            }
            // Dense arrow rows participate in every column's elimination.
            for a in 0..na {
                let row = &mut self.arrow[a * n..(a + 1) * n];
                let mut l = row[j];
                for k in k0..j {
                    l -= row[k] * self.diag[k] * self.band[(j - k) * n + k];
                }
                row[j] = l * inv_d;
            }
        }

        // Schur complement corner: C - W D W^T with W the eliminated arrow rows.
        for a in 0..na {
            for b in 0..=a {
                let mut s = self.corner[a * na + b];
                let ra = &self.arrow[a * n..(a + 1) * n];
                let rb = &self.arrow[b * n..(b + 1) * n];
                for k in 0..n {
                    s -= ra[k] * self.diag[k] * rb[k];
                }
                self.corner[a * na + b] = s;
                self.corner[b * na + a] = s;
            }
        }
        // Dense LDL^T of the (tiny) corner.
        for j in 0..na {
            let mut d = self.corner[j * na + j];
            for k in 0..j {
                let l = self.corner[j * na + k];
                d -= l * l * self.corner_diag[k];
            }
            if d.abs() < PIVOT_EPS {
                return Err(FactorError::ZeroPivot { col: n + j });
            }
            self.corner_diag[j] = d;
            for i in (j + 1)..na {
                let mut l = self.corner[i * na + j];
                for k in 0..j {
                    l -= self.corner[i * na + k] * self.corner_diag[k] * self.corner[j * na + k];
                }
                self.corner[i * na + j] = l / d;
            }
        }

        self.factored = true;
        let mut inertia = Inertia { positive: 0, negative: 0, zero: 0 };
        for &d in self.diag.iter().chain(self.corner_diag.iter().take(na)) {
            if d > 0.0 {
                inertia.positive += 1;
            } else {
                inertia.negative += 1;
            }
        }
        Ok(inertia)
    }

    /// Solves `A x = b` in place using the factorization.
    pub fn solve_in_place(&self, x: &mut [f64]) {
        assert!(self.factored, "factor() must succeed before solve");
        let n = self.dim;
        let hb = self.hb;
        let na = self.n_arrow;
        assert_eq!(x.len(), n + na);

        // Forward: L y = b.
        for j in 0..n {
            let yj = x[j];
            if yj != 0.0 {
                let imax = (j + hb).min(n - 1);
                for i in (j + 1)..=imax {
                    x[i] -= self.band[(i - j) * n + j] * yj;
                }
                for a in 0..na {
                    x[n + a] -= self.arrow[a * n + j] * yj;
                }
            }
        }
        for a in 0..na {
            let ya = x[n + a];
            for i in (a + 1)..na {
                x[n + i] -= self.corner[i * na + a] * ya;
            }
        }
        // Diagonal.
        for j in 0..n {
            x[j] /= self.diag[j];
        }
        for a in 0..na {
            x[n + a] /= self.corner_diag[a];
        }
        // Backward: L^T z = y.
        for a in (0..na).rev() {
            let mut s = x[n + a];
            for i in (a + 1)..na {
                s -= self.corner[i * na + a] * x[n + i];
            }
            x[n + a] = s;
        }
        for j in (0..n).rev() {
            let mut s = x[j];
            let imax = (j + hb).min(n - 1);
            for i in (j + 1)..=imax {
                s -= self.band[(i - j) * n + j] * x[i];
            }
            for a in 0..na {
                s -= self.arrow[a * n + j] * x[n + a];
            }
            x[j] = s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Dense reference solve via Gaussian elimination with partial pivoting.
    fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut m: Vec<Vec<f64>> = a.iter().cloned().collect();
        let mut x = b.to_vec();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
            m.swap(col, piv);
            x.swap(col, piv);
            for row in (col + 1)..n {
                let f = m[row][col] / m[col][col];
                for k in col..n {
                    m[row][k] -= f * m[col][k];
                }
                x[row] -= f * x[col];
            }
        }
        for col in (0..n).rev() {
            let mut s = x[col];
            for k in (col + 1)..n {
                s -= m[col][k] * x[k];
            }
            x[col] = s / m[col][col];
        }
        x
    }

    fn deterministic_entry(i: usize, j: usize) -> f64 {
        // Fixed pseudo-random fill, symmetric and reproducible.
        let v = ((i * 31 + j * 17) % 23) as f64 - 11.0;
        v / 7.0
    }

    #[test]
    fn factor_solve_matches_dense_reference() {
        let dim = 40;
        let hb = 5;
        let na = 2;
        let total = dim + na;
        let mut m = ArrowBandMatrix::new(dim, hb, na);
        let mut dense = vec![vec![0.0; total]; total];
        for i in 0..total {
            for j in 0..=i {
                let inside_band = i < dim && i - j <= hb;
                let arrow = i >= dim;
                if inside_band || arrow {
                    let mut v = deterministic_entry(i, j);
                    if i == j {
                        // Quasi-definite-ish diagonal: alternate strong signs.
                        v = if i % 3 == 0 { -8.0 } else { 9.0 } + v;
                    }
                    if v != 0.0 {
                        m.add(i, j, v);
                        dense[i][j] = v;
                        dense[j][i] = v;
                    }
                }
            }
        }
        let inertia = m.factor().unwrap();
        assert_eq!(inertia.positive + inertia.negative, total);
        let b: Vec<f64> = (0..total).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut x = b.clone();
        m.solve_in_place(&mut x);
        let x_ref = dense_solve(&dense, &b);
        for i in 0..total {
            assert!(
                (x[i] - x_ref[i]).abs() < 1e-9 * x_ref[i].abs().max(1.0),
                "x[{i}] = {} vs {}",
                x[i],
                x_ref[i]
            );
        }
    }

    #[test]
    fn inertia_counts_signs() {
        // diag(2, -3, 5) has inertia (2, 1).
        let mut m = ArrowBandMatrix::new(3, 0, 0);
        m.add(0, 0, 2.0);
        m.add(1, 1, -3.0);
        m.add(2, 2, 5.0);
        let inertia = m.factor().unwrap();
        assert_eq!(inertia, Inertia { positive: 2, negative: 1, zero: 0 });
    }

    #[test]
    fn saddle_system_inertia_and_solution() {
        // [I A^T; A 0]-style system regularized to quasi-definite:
        // minimize 0.5||x||^2 s.t. x0 + x1 = 2 -> x = (1, 1), lambda = -1.
        let mut m = ArrowBandMatrix::new(3, 2, 0);
        m.add(0, 0, 1.0);
        m.add(1, 1, 1.0);
        m.add(2, 2, -1e-12);
        m.add(2, 0, 1.0);
        m.add(2, 1, 1.0);
        let inertia = m.factor().unwrap();
        assert_eq!(inertia.positive, 2);
        assert_eq!(inertia.negative, 1);
        let mut x = vec![0.0, 0.0, 2.0];
        m.solve_in_place(&mut x);
        assert!((x[0] - 1.0).abs() < 1e-9);
        assert!((x[1] - 1.0).abs() < 1e-9);
        assert!((x[2] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn reset_allows_refactorization() {
        let mut m = ArrowBandMatrix::new(2, 1, 1);
        m.add(0, 0, 4.0);
        m.add(1, 1, 4.0);
        m.add(2, 2, 4.0);
        m.add(2, 0, 1.0);
        m.factor().unwrap();
        m.reset();
        m.add(0, 0, 2.0);
        m.add(1, 1, 2.0);
        m.add(2, 2, 2.0);
        m.factor().unwrap();
        let mut x = vec![2.0, 4.0, 6.0];
        m.solve_in_place(&mut x);
        assert_eq!(x, vec![1.0, 2.0, 3.0]);
    }
}
