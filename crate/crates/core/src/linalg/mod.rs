//! Dense least-squares machinery: a row-major [`Matrix`], Householder QR
//! with column pivoting, pseudoinverse and rank checks.
//!
//! Every solve in the crate goes through [`LeastSquares`]: one pivoted QR of
//! the coefficient matrix is shared across all right-hand sides, and the
//! rank check runs on the same factorization.

mod matrix;
mod qr;

pub use matrix::Matrix;
pub(crate) use matrix::{axpy, dot, norm2};
pub use qr::{
    column_rank_ok, least_squares, least_squares_with_tol, pseudoinverse, pseudoinverse_with_tol,
    IncrementalLeastSquares, LeastSquares, QrFactor, SolveReport, DEFAULT_RANK_TOL,
};
