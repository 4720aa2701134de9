//! Fully connected layer `h_out = a(W·h_in + b)`.
//!
//! The bias is stored as the last column of the weight matrix and treated as
//! an input coordinate fixed at 1. Latent solves subtract its known
//! contribution, so the unknowns are exactly the `in_dim` latent entries.

use rand::Rng;

use crate::activation::Activation;
use crate::diagnostics::ResidualReport;
use crate::error::{shape_err, Error, Result};
use crate::linalg::{axpy, column_rank_ok, dot, norm2, LeastSquares, Matrix, QrFactor};
use crate::parallel;
use crate::rng::gaussian_vec;

#[derive(Clone, Debug, PartialEq)]
pub struct FeedforwardLayer {
    in_dim: usize,
    out_dim: usize,
    /// `out_dim × (in_dim + 1)`, bias in the last column.
    weights: Matrix,
}

impl FeedforwardLayer {
    /// Wraps a weight matrix whose last column is the bias. Only the shape is
    /// checked here; see [`check_invariants`](Self::check_invariants).
    pub fn from_weights(weights: Matrix) -> Result<Self> {
        if weights.cols() == 0 {
            return shape_err("weight matrix needs at least the bias column");
        }
        Ok(Self {
            in_dim: weights.cols() - 1,
            out_dim: weights.rows(),
            weights,
        })
    }

    /// Draws Gaussian weights with standard deviation `1/√in_dim`, redrawing
    /// until the linear part has full column rank. With `orthogonal` the
    /// linear part is replaced by the orthonormal factor of its QR.
    pub fn random<R: Rng>(
        in_dim: usize,
        out_dim: usize,
        orthogonal: bool,
        rank_tol: f64,
        mut next_rng: impl FnMut(usize) -> R,
    ) -> Result<Self> {
        if in_dim > out_dim {
            return Err(Error::RankDeficient {
                ratio: 0.0,
                tol: rank_tol,
            });
        }
        let scale = 1.0 / (in_dim.max(1) as f64).sqrt();
        for attempt in 0..16 {
            let mut rng = next_rng(attempt);
            let mut linear = Matrix::from_raw(
                out_dim,
                in_dim,
                gaussian_vec(&mut rng, out_dim * in_dim, scale),
            );
            let bias = gaussian_vec(&mut rng, out_dim, scale);
            if orthogonal && in_dim > 0 {
                linear = QrFactor::pivoted(&linear).thin_q();
            }
            if !column_rank_ok(&linear, rank_tol) {
                continue;
            }
            let weights = Matrix::from_fn(out_dim, in_dim + 1, |i, j| {
                if j < in_dim {
                    linear[(i, j)]
                } else {
                    bias[i]
                }
            });
            return Ok(Self {
                in_dim,
                out_dim,
                weights,
            });
        }
        Err(Error::RankDeficient {
            ratio: 0.0,
            tol: rank_tol,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    /// `W` without the bias column.
    pub fn linear_part(&self) -> Matrix {
        self.weights.column_block(0, self.in_dim)
    }

    pub fn bias(&self) -> Vec<f64> {
        self.weights.column(self.in_dim)
    }

    /// Inverse-funnel shape and full column rank of the linear part.
    pub fn check_invariants(&self, rank_tol: f64) -> Result<()> {
        if self.in_dim > self.out_dim {
            return shape_err(format!(
                "layer {}→{} narrows toward the output",
                self.in_dim, self.out_dim
            ));
        }
        LeastSquares::factor(&self.linear_part(), rank_tol).map(|_| ())
    }

    fn check_input(&self, h: &Matrix) -> Result<()> {
        if h.cols() != self.in_dim {
            return shape_err(format!(
                "layer expects {} input columns, got {}",
                self.in_dim,
                h.cols()
            ));
        }
        Ok(())
    }

    fn check_targets(&self, t: &Matrix) -> Result<()> {
        if t.cols() != self.out_dim {
            return shape_err(format!(
                "layer produces {} outputs, targets have {} columns",
                self.out_dim,
                t.cols()
            ));
        }
        Ok(())
    }

    #[inline]
    fn affine_into(&self, h: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            let w = self.weights.row(j);
            *o = dot(&w[..self.in_dim], h) + w[self.in_dim];
        }
    }

    /// `W·h + b` for every row of `h_prev`.
    pub fn pre_activation(&self, h_prev: &Matrix) -> Result<Matrix> {
        self.check_input(h_prev)?;
        let mut out = Matrix::zeros(h_prev.rows(), self.out_dim);
        parallel::for_each_row_mut(out.as_mut_slice(), self.out_dim, |n, row| {
            self.affine_into(h_prev.row(n), row);
        });
        Ok(out)
    }

    /// `a(W·h + b)` for every row of `h_prev`.
    pub fn forward(&self, act: &Activation, h_prev: &Matrix) -> Result<Matrix> {
        self.check_input(h_prev)?;
        let mut out = Matrix::zeros(h_prev.rows(), self.out_dim);
        parallel::for_each_row_mut(out.as_mut_slice(), self.out_dim, |n, row| {
            self.affine_into(h_prev.row(n), row);
            act.apply_in_place(row);
        });
        Ok(out)
    }

    /// Right-hand sides of the latent systems: `a⁻¹(t) − b` per row.
    fn latent_rhs(&self, act: &Activation, targets: &Matrix) -> Result<Matrix> {
        act.check_invertible()?;
        self.check_targets(targets)?;
        let bias = self.bias();
        let mut rhs = targets.clone();
        parallel::for_each_row_mut(rhs.as_mut_slice(), self.out_dim, |_, row| {
            act.invert_in_place(row);
            axpy(-1.0, &bias, row);
        });
        Ok(rhs)
    }

    /// Least-squares latents `h*` with `W·h* ≈ a⁻¹(t) − b`, one system per
    /// datapoint, all sharing one factorization of `W`.
    pub fn solve_latents(
        &self,
        act: &Activation,
        targets: &Matrix,
        rank_tol: f64,
    ) -> Result<(Matrix, ResidualReport)> {
        let rhs = self.latent_rhs(act, targets)?;
        let ls = LeastSquares::factor(&self.linear_part(), rank_tol)?;
        let (latents, norms) = ls.solve_rows(&rhs)?;
        let report = ResidualReport::new(0, norms, self.out_dim);
        Ok((latents, report))
    }

    /// Solves every weight row against `[H | 1]`: row `j` minimizes
    /// `‖[H|1]·w_jᵀ − a⁻¹(T)_j‖`. Returns the layer and per-row residuals.
    pub fn solve_weights(
        h_prev: &Matrix,
        act: &Activation,
        targets: &Matrix,
        rank_tol: f64,
    ) -> Result<(Self, Vec<f64>)> {
        act.check_invertible()?;
        let (n, in_dim) = h_prev.shape();
        if targets.rows() != n {
            return shape_err(format!("{n} input rows but {} target rows", targets.rows()));
        }
        if n < in_dim + 1 {
            return Err(Error::InsufficientData {
                needed: in_dim + 1,
                got: n,
            });
        }
        let augmented =
            Matrix::from_fn(
                n,
                in_dim + 1,
                |i, j| {
                    if j < in_dim {
                        h_prev[(i, j)]
                    } else {
                        1.0
                    }
                },
            );
        let ls = LeastSquares::factor(&augmented, rank_tol)?;
        let rhs = act.invert(targets)?.transpose();
        let (weights, residuals) = ls.solve_rows(&rhs)?;
        Ok((
            Self {
                in_dim,
                out_dim: targets.cols(),
                weights,
            },
            residuals,
        ))
    }

    /// `‖W·h_n + b − a⁻¹(t_n)‖` for each datapoint, evaluated directly.
    pub fn linear_residuals(
        &self,
        act: &Activation,
        latents: &Matrix,
        targets: &Matrix,
    ) -> Result<Vec<f64>> {
        self.check_input(latents)?;
        self.check_targets(targets)?;
        act.check_invertible()?;
        if latents.rows() != targets.rows() {
            return shape_err(format!(
                "{} latent rows but {} target rows",
                latents.rows(),
                targets.rows()
            ));
        }
        Ok(parallel::map_range(latents.rows(), |n| {
            let mut e = vec![0.0; self.out_dim];
            self.affine_into(latents.row(n), &mut e);
            for (ej, &t) in e.iter_mut().zip(targets.row(n)) {
                *ej -= act.invert_scalar(t);
            }
            norm2(&e)
        }))
    }
}
