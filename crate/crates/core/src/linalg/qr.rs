use super::matrix::{axpy, dot, norm2, Matrix};
use crate::error::{shape_err, Error, Result};
use crate::parallel;

/// Default relative pivot tolerance for the column-rank check.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Householder QR factorization `A·P = Q·R` of an `m×n` matrix with `m ≥ n`.
///
/// Reflectors are kept in compact form and applied on demand, so one
/// factorization serves any number of right-hand sides.
#[derive(Clone, Debug)]
pub struct QrFactor {
    m: usize,
    n: usize,
    // Reflector j acts on rows j..m and is stored at offsets[j]..offsets[j]+m-j.
    reflectors: Vec<f64>,
    offsets: Vec<usize>,
    betas: Vec<f64>,
    // Upper triangle of R, row-major n×n.
    r: Vec<f64>,
    // Column j of R belongs to column perm[j] of A.
    perm: Vec<usize>,
}

impl QrFactor {
    /// Factorizes `a` with greedy column pivoting (largest remaining norm first).
    pub fn pivoted(a: &Matrix) -> Self {
        Self::factor(a, true)
    }

    /// Factorizes `a` keeping the original column order.
    pub fn unpivoted(a: &Matrix) -> Self {
        Self::factor(a, false)
    }

    fn factor(a: &Matrix, pivot: bool) -> Self {
        let (m, n) = a.shape();
        let steps = n.min(m);
        let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut reflectors = Vec::with_capacity(steps * m);
        let mut offsets = Vec::with_capacity(steps);
        let mut betas = Vec::with_capacity(steps);

        for j in 0..steps {
            if pivot {
                let mut best = j;
                let mut best_norm = -1.0;
                for (k, c) in cols.iter().enumerate().skip(j) {
                    let s = dot(&c[j..], &c[j..]);
                    if s > best_norm {
                        best_norm = s;
                        best = k;
                    }
                }
                cols.swap(j, best);
                perm.swap(j, best);
            }

            let (head, tail) = cols.split_at_mut(j + 1);
            let x = &mut head[j][j..];
            let norm = norm2(x);
            let beta = if norm == 0.0 {
                0.0
            } else {
                let alpha = if x[0] >= 0.0 { -norm } else { norm };
                let beta = 1.0 / (norm * norm + norm * x[0].abs());
                x[0] -= alpha;
                beta
            };
            let v: &[f64] = x;
            if beta != 0.0 {
                apply_to_columns(v, beta, j, tail);
            }
            offsets.push(reflectors.len());
            reflectors.extend_from_slice(v);
            betas.push(beta);
            // The reflector overwrote column j below the diagonal; R_jj is
            // recovered from the norm.
            let diag = if beta == 0.0 {
                0.0
            } else if v[0] > 0.0 {
                // v0 = x0 - alpha > 0 means alpha was negative.
                -norm
            } else {
                norm
            };
            head[j][j] = diag;
        }

        let mut r = vec![0.0; n * n];
        for i in 0..steps {
            for k in i..n {
                r[i * n + k] = cols[k][i];
            }
        }
        Self {
            m,
            n,
            reflectors,
            offsets,
            betas,
            r,
            perm,
        }
    }

    pub fn rows(&self) -> usize {
        self.m
    }

    pub fn cols(&self) -> usize {
        self.n
    }

    fn reflector(&self, j: usize) -> &[f64] {
        &self.reflectors[self.offsets[j]..self.offsets[j] + self.m - j]
    }

    /// Diagonal of `R` (the pivots).
    pub fn pivots(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.r[i * self.n + i]).collect()
    }

    /// `min |R_ii| / max |R_ii|`; zero when `m < n`.
    pub fn pivot_ratio(&self) -> f64 {
        if self.n == 0 {
            return 1.0;
        }
        if self.m < self.n {
            return 0.0;
        }
        let (lo, hi) = self
            .pivots()
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), p| {
                (lo.min(p.abs()), hi.max(p.abs()))
            });
        if hi == 0.0 {
            0.0
        } else {
            lo / hi
        }
    }

    pub fn rank_ok(&self, tol: f64) -> bool {
        self.n == 0 || self.pivot_ratio() > tol
    }

    /// Overwrites `b` (length m) with `Qᵀ·b`.
    pub fn apply_qt(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.m, "right-hand side length");
        for j in 0..self.betas.len() {
            let beta = self.betas[j];
            if beta == 0.0 {
                continue;
            }
            let v = self.reflector(j);
            let seg = &mut b[j..];
            let s = beta * dot(v, seg);
            axpy(-s, v, seg);
        }
    }

    /// Least-squares solution of `A·x = b` and the residual norm `‖A·x − b‖`.
    ///
    /// Assumes the factorization passed the rank check; a zero pivot yields
    /// non-finite output.
    pub fn solve_vec(&self, b: &[f64]) -> (Vec<f64>, f64) {
        let mut qtb = b.to_vec();
        self.apply_qt(&mut qtb);
        let residual = norm2(&qtb[self.n..]);
        let n = self.n;
        let mut z = vec![0.0; n];
        for i in (0..n).rev() {
            let row = &self.r[i * n..(i + 1) * n];
            let s = qtb[i] - dot(&row[i + 1..], &z[i + 1..]);
            z[i] = s / row[i];
        }
        let mut x = vec![0.0; n];
        for (j, &p) in self.perm.iter().enumerate() {
            x[p] = z[j];
        }
        (x, residual)
    }

    /// Explicit thin `Q` (m×n) with orthonormal columns spanning range(A).
    pub fn thin_q(&self) -> Matrix {
        let cols: Vec<Vec<f64>> = parallel::map_range(self.n, |c| {
            let mut e = vec![0.0; self.m];
            e[c] = 1.0;
            for j in (0..self.betas.len()).rev() {
                let beta = self.betas[j];
                if beta == 0.0 {
                    continue;
                }
                let v = self.reflector(j);
                let seg = &mut e[j..];
                let s = beta * dot(v, seg);
                axpy(-s, v, seg);
            }
            e
        });
        Matrix::from_fn(self.m, self.n, |i, j| cols[j][i])
    }

    /// Upper-triangular `R` (n×n), columns in pivoted order.
    pub fn r(&self) -> Matrix {
        Matrix::from_raw(self.n, self.n, self.r.clone())
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }
}

fn apply_to_columns(v: &[f64], beta: f64, j: usize, cols: &mut [Vec<f64>]) {
    let update = |c: &mut Vec<f64>| {
        let seg = &mut c[j..];
        let s = beta * dot(v, seg);
        axpy(-s, v, seg);
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        // Column updates are independent; small panels stay serial.
        if cols.len() * v.len() > 1 << 15 {
            cols.par_iter_mut().for_each(update);
            return;
        }
    }
    cols.iter_mut().for_each(update);
}

/// Output of [`least_squares`].
#[derive(Clone, Debug)]
pub struct SolveReport {
    /// n×k, one solution column per right-hand side.
    pub solution: Matrix,
    /// `‖A·x_j − b_j‖₂` for each right-hand side.
    pub residual_norms: Vec<f64>,
}

/// A rank-checked factorization shared by many right-hand sides.
#[derive(Clone, Debug)]
pub struct LeastSquares {
    qr: QrFactor,
}

impl LeastSquares {
    pub fn factor(a: &Matrix, tol: f64) -> Result<Self> {
        if a.rows() < a.cols() {
            return Err(Error::RankDeficient { ratio: 0.0, tol });
        }
        let qr = QrFactor::pivoted(a);
        let ratio = qr.pivot_ratio();
        if (ratio.is_nan() || ratio <= tol) && a.cols() > 0 {
            return Err(Error::RankDeficient { ratio, tol });
        }
        Ok(Self { qr })
    }

    pub fn unknowns(&self) -> usize {
        self.qr.cols()
    }

    pub fn equations(&self) -> usize {
        self.qr.rows()
    }

    pub fn solve_vec(&self, b: &[f64]) -> (Vec<f64>, f64) {
        self.qr.solve_vec(b)
    }

    /// Solves one system per row of `rhs` (each row has `equations()` entries).
    /// Returns the solutions as rows plus one residual norm per row.
    pub fn solve_rows(&self, rhs: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        if rhs.cols() != self.equations() {
            return shape_err(format!(
                "right-hand sides have {} entries, system has {} equations",
                rhs.cols(),
                self.equations()
            ));
        }
        let solved = parallel::map_range(rhs.rows(), |i| self.qr.solve_vec(rhs.row(i)));
        let n = self.unknowns();
        let mut data = Vec::with_capacity(rhs.rows() * n);
        let mut residuals = Vec::with_capacity(rhs.rows());
        for (x, r) in solved {
            data.extend_from_slice(&x);
            residuals.push(r);
        }
        Ok((Matrix::from_raw(rhs.rows(), n, data), residuals))
    }

    pub fn qr(&self) -> &QrFactor {
        &self.qr
    }
}

/// Solves `A·X ≈ B` column by column against a single factorization of `A`.
pub fn least_squares(a: &Matrix, b: &Matrix) -> Result<SolveReport> {
    least_squares_with_tol(a, b, DEFAULT_RANK_TOL)
}

pub fn least_squares_with_tol(a: &Matrix, b: &Matrix, tol: f64) -> Result<SolveReport> {
    if a.rows() != b.rows() {
        return shape_err(format!(
            "A has {} rows but B has {} rows",
            a.rows(),
            b.rows()
        ));
    }
    let ls = LeastSquares::factor(a, tol)?;
    let (xt, residual_norms) = ls.solve_rows(&b.transpose())?;
    Ok(SolveReport {
        solution: xt.transpose(),
        residual_norms,
    })
}

/// Moore–Penrose pseudoinverse of a full-column-rank matrix.
pub fn pseudoinverse(a: &Matrix) -> Result<Matrix> {
    pseudoinverse_with_tol(a, DEFAULT_RANK_TOL)
}

pub fn pseudoinverse_with_tol(a: &Matrix, tol: f64) -> Result<Matrix> {
    let ls = LeastSquares::factor(a, tol)?;
    // Column i of A⁺ is the least-squares solution for e_i.
    let (rows, _) = ls.solve_rows(&Matrix::identity(a.rows()))?;
    Ok(rows.transpose())
}

/// True iff the smallest pivot of a column-pivoted QR exceeds `tol` times the
/// largest one.
pub fn column_rank_ok(a: &Matrix, tol: f64) -> bool {
    if a.rows() < a.cols() {
        return false;
    }
    QrFactor::pivoted(a).rank_ok(tol)
}

/// Streaming least squares for tall systems supplied in row blocks.
///
/// Each block is folded into a running triangular factor, so memory stays at
/// `O(n² + block)` regardless of the total equation count.
#[derive(Clone, Debug)]
pub struct IncrementalLeastSquares {
    n: usize,
    k: usize,
    // Running R (n×n, row-major) and Qᵀb (k columns, stored as k rows of n).
    r: Matrix,
    qtb: Matrix,
    residual_sq: Vec<f64>,
    equations: usize,
}

impl IncrementalLeastSquares {
    pub fn new(unknowns: usize, rhs: usize) -> Self {
        Self {
            n: unknowns,
            k: rhs,
            r: Matrix::zeros(0, unknowns),
            qtb: Matrix::zeros(rhs, 0),
            residual_sq: vec![0.0; rhs],
            equations: 0,
        }
    }

    pub fn equations(&self) -> usize {
        self.equations
    }

    /// Adds the equations `a·x = b` (a: p×n, b: p×k).
    pub fn absorb(&mut self, a: &Matrix, b: &Matrix) -> Result<()> {
        if a.cols() != self.n || b.cols() != self.k || a.rows() != b.rows() {
            return shape_err(format!(
                "block {:?}/{:?} does not fit a system with {} unknowns and {} right-hand sides",
                a.shape(),
                b.shape(),
                self.n,
                self.k
            ));
        }
        if a.rows() == 0 {
            return Ok(());
        }
        let top = self.r.rows();
        let stacked_rows = top + a.rows();
        let mut stacked = Vec::with_capacity(stacked_rows * self.n);
        stacked.extend_from_slice(self.r.as_slice());
        stacked.extend_from_slice(a.as_slice());
        let stacked = Matrix::from_raw(stacked_rows, self.n, stacked);
        let qr = QrFactor::unpivoted(&stacked);

        let keep = self.n.min(stacked_rows);
        let per_rhs = parallel::map_range(self.k, |j| {
            let mut v = Vec::with_capacity(stacked_rows);
            v.extend_from_slice(self.qtb.row(j));
            v.extend((0..b.rows()).map(|i| b[(i, j)]));
            qr.apply_qt(&mut v);
            let tail: f64 = v[keep..].iter().map(|x| x * x).sum();
            v.truncate(keep);
            (v, tail)
        });

        let mut qtb = Vec::with_capacity(self.k * keep);
        for (j, (v, tail)) in per_rhs.into_iter().enumerate() {
            qtb.extend_from_slice(&v);
            self.residual_sq[j] += tail;
        }
        self.qtb = Matrix::from_raw(self.k, keep, qtb);
        let full_r = qr.r();
        self.r = full_r.select_rows(&(0..keep).collect::<Vec<_>>());
        self.equations += a.rows();
        Ok(())
    }

    /// Solves the accumulated system. Solutions are returned as rows (k×n).
    pub fn finish(&self, tol: f64) -> Result<(Matrix, Vec<f64>)> {
        if self.equations < self.n {
            return Err(Error::InsufficientData {
                needed: self.n,
                got: self.equations,
            });
        }
        let ls = LeastSquares::factor(&self.r, tol)?;
        let (x, small_res) = ls.solve_rows(&self.qtb)?;
        let residuals = self
            .residual_sq
            .iter()
            .zip(&small_res)
            .map(|(t, s)| (t + s * s).sqrt())
            .collect();
        Ok((x, residuals))
    }
}
