//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the library's solvers: least squares goes through
//! the normal equations with Gaussian elimination, convolutions are plain
//! loops, norms are hand-rolled.

#![allow(dead_code)]

use std::path::PathBuf;

use gradfree::data_io::{self, ImageBatch};
use gradfree::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        scale * rng.sample::<f64, _>(StandardNormal)
    })
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..hi))
}

pub fn leaky(slope: f64, x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn leaky_inv(slope: f64, y: f64) -> f64 {
    if y >= 0.0 {
        y
    } else {
        y / slope
    }
}

/// `a(W·[h | 1])` row by row with explicit loops; `w` is `out × (in+1)`.
pub fn ff_forward(w: &Matrix, slope: f64, h: &Matrix) -> Matrix {
    let (out, cols) = w.shape();
    let inp = cols - 1;
    Matrix::from_fn(h.rows(), out, |n, j| {
        let mut s = w[(j, inp)];
        for i in 0..inp {
            s += w[(j, i)] * h[(n, i)];
        }
        leaky(slope, s)
    })
}

/// Solves the square system `m·x = b` by Gaussian elimination with partial
/// pivoting.
pub fn gauss_solve(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let p = (col..n)
            .max_by(|&a, &c| m[a][col].abs().total_cmp(&m[c][col].abs()))
            .unwrap();
        m.swap(col, p);
        b.swap(col, p);
        for r in col + 1..n {
            let f = m[r][col] / m[col][col];
            let pivot = m[col].clone();
            for (dst, src) in m[r][col..].iter_mut().zip(&pivot[col..]) {
                *dst -= f * src;
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| m[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / m[r][r];
    }
    x
}

/// Least squares through the normal equations `AᵀA x = Aᵀb`.
pub fn normal_equations(a: &Matrix, b: &[f64]) -> Vec<f64> {
    let (m, n) = a.shape();
    let ata: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (0..m).map(|k| a[(k, i)] * a[(k, j)]).sum())
                .collect()
        })
        .collect();
    let atb: Vec<f64> = (0..n)
        .map(|i| (0..m).map(|k| a[(k, i)] * b[k]).sum())
        .collect();
    gauss_solve(ata, atb)
}

/// Orthonormal columns by modified Gram-Schmidt (run twice for stability).
pub fn orthonormal_columns(a: &Matrix) -> Matrix {
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    for _ in 0..2 {
        for j in 0..n {
            for i in 0..j {
                let d: f64 = (0..m).map(|k| cols[i][k] * cols[j][k]).sum();
                let ci = cols[i].clone();
                for (dst, src) in cols[j].iter_mut().zip(&ci) {
                    *dst -= d * src;
                }
            }
            let norm = cols[j].iter().map(|v| v * v).sum::<f64>().sqrt();
            cols[j].iter_mut().for_each(|v| *v /= norm);
        }
    }
    Matrix::from_fn(m, n, |i, j| cols[j][i])
}

/// `m × n` matrix with singular values exactly `sigmas` (length n).
pub fn with_singular_values(rng: &mut impl Rng, m: usize, sigmas: &[f64]) -> Matrix {
    let n = sigmas.len();
    let u = orthonormal_columns(&gaussian(rng, m, n, 1.0));
    let v = orthonormal_columns(&gaussian(rng, n, n, 1.0));
    Matrix::from_fn(m, n, |i, j| {
        (0..n).map(|k| u[(i, k)] * sigmas[k] * v[(j, k)]).sum()
    })
}

/// Full stride-1 convolution (zero padding `k−1`) computed with nested loops,
/// output `m × (H+k−1) × (W+k−1)`. Kernel row `j` holds taps ordered
/// `(c, dy, dx)`.
pub fn brute_conv(
    kernels: &Matrix,
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    x: &[f64],
) -> Vec<f64> {
    let m = kernels.rows();
    let (oh, ow) = (h + k - 1, w + k - 1);
    let mut out = vec![0.0; m * oh * ow];
    for j in 0..m {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for c in 0..c_in {
                    for dy in 0..k {
                        for dx in 0..k {
                            let iy = oy as isize + dy as isize - (k as isize - 1);
                            let ix = ox as isize + dx as isize - (k as isize - 1);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            s += kernels[(j, c * k * k + dy * k + dx)]
                                * x[c * h * w + iy as usize * w + ix as usize];
                        }
                    }
                }
                out[(j * oh + oy) * ow + ox] = s;
            }
        }
    }
    out
}

/// Pixel shuffle: channel `c·u² + dy·u + dx` at `(p, q)` moves to channel
/// `c` at `(p·u + dy, q·u + dx)`.
pub fn brute_shuffle(x: &[f64], m: usize, h: usize, w: usize, u: usize) -> Vec<f64> {
    let c_out = m / (u * u);
    let (oh, ow) = (h * u, w * u);
    let mut out = vec![0.0; x.len()];
    for c in 0..c_out {
        for dy in 0..u {
            for dx in 0..u {
                let src = c * u * u + dy * u + dx;
                for p in 0..h {
                    for q in 0..w {
                        out[(c * oh + p * u + dy) * ow + q * u + dx] = x[(src * h + p) * w + q];
                    }
                }
            }
        }
    }
    out
}

/// Mean of `‖e‖₁ + ‖e‖₂` over rows, with explicit loops.
pub fn elastic(a: &Matrix, b: &Matrix) -> f64 {
    let mut total = 0.0;
    for i in 0..a.rows() {
        let mut l1 = 0.0;
        let mut l2 = 0.0;
        for j in 0..a.cols() {
            let e = a[(i, j)] - b[(i, j)];
            l1 += e.abs();
            l2 += e * e;
        }
        total += l1 + l2.sqrt();
    }
    total / a.rows() as f64
}

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("data")
}

pub fn mnist_images_path() -> PathBuf {
    data_dir().join("mnist-subset-2000-images.idx3-ubyte")
}

pub fn mnist_labels_path() -> PathBuf {
    data_dir().join("mnist-subset-2000-labels.idx1-ubyte")
}

pub fn mnist_batch() -> ImageBatch {
    data_io::load_idx(mnist_images_path()).expect("MNIST fixture")
}

/// First `n` fixture images as an `n × 784` matrix.
pub fn mnist(n: usize) -> Matrix {
    data_io::flatten(&mnist_batch().truncate(n))
}

pub fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        num += (x - y) * (x - y);
        den += y * y;
    }
    (num / den).sqrt()
}
