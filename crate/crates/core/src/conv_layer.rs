//! Conv-unpool layer: stride-1 full convolution followed by pixel-shuffle
//! unpooling.
//!
//! A layer maps `c_in × H × W` latents to `m` pre-shuffle channels of size
//! `(H+k−1) × (W+k−1)` (zero padding of `k−1` on every side), then
//! rearranges each group of `u²` channels into `u×u` spatial blocks, giving
//! `m/u²` output channels of size `u(H+k−1) × u(W+k−1)`. Conv layers carry no
//! bias.
//!
//! Layouts are channel-major then row-major throughout. Kernel row `j` holds
//! the taps of pre-shuffle channel `j` ordered `(c, dy, dx)`, matching the
//! column order of [`extract_patches`]. The convolution is computed in
//! cross-correlation form:
//!
//! ```text
//! conv[j][oy][ox] = Σ_{c,dy,dx} K[j][c,dy,dx] · x[c][oy+dy−(k−1)][ox+dx−(k−1)]
//! ```

use rand::seq::index;
use rand::Rng;

use crate::activation::Activation;
use crate::diagnostics::ResidualReport;
use crate::error::{shape_err, Error, Result};
use crate::linalg::{axpy, dot, norm2, IncrementalLeastSquares, LeastSquares, Matrix};
use crate::parallel;
use crate::rng::gaussian_vec;

/// Geometry of a conv-unpool layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvShape {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub kernel: usize,
    pub pre_shuffle_channels: usize,
    pub unpool: usize,
}

impl ConvShape {
    pub fn new(
        in_channels: usize,
        in_height: usize,
        in_width: usize,
        kernel: usize,
        pre_shuffle_channels: usize,
        unpool: usize,
    ) -> Result<Self> {
        let shape = Self {
            in_channels,
            in_height,
            in_width,
            kernel,
            pre_shuffle_channels,
            unpool,
        };
        shape.check()?;
        Ok(shape)
    }

    pub fn check(&self) -> Result<()> {
        if [
            self.in_channels,
            self.in_height,
            self.in_width,
            self.kernel,
            self.pre_shuffle_channels,
            self.unpool,
        ]
        .contains(&0)
        {
            return shape_err(format!("conv layer dimensions must be positive: {self:?}"));
        }
        let groups = self.unpool * self.unpool;
        if self.pre_shuffle_channels % groups != 0 {
            return shape_err(format!(
                "{} pre-shuffle channels are not divisible by unpool² = {groups}",
                self.pre_shuffle_channels
            ));
        }
        Ok(())
    }

    pub fn conv_height(&self) -> usize {
        self.in_height + self.kernel - 1
    }

    pub fn conv_width(&self) -> usize {
        self.in_width + self.kernel - 1
    }

    pub fn out_channels(&self) -> usize {
        self.pre_shuffle_channels / (self.unpool * self.unpool)
    }

    pub fn out_height(&self) -> usize {
        self.unpool * self.conv_height()
    }

    pub fn out_width(&self) -> usize {
        self.unpool * self.conv_width()
    }

    /// Unknowns per datapoint in the latent system.
    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_height * self.in_width
    }

    /// Equations per datapoint in the latent system.
    pub fn out_len(&self) -> usize {
        self.pre_shuffle_channels * self.conv_height() * self.conv_width()
    }

    /// Unknowns per kernel in the weight system.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Weight-system equations contributed by one datapoint per kernel.
    pub fn patches_per_image(&self) -> usize {
        self.conv_height() * self.conv_width()
    }

    /// At least as many equations as unknowns in the latent system.
    pub fn is_determined(&self) -> bool {
        self.out_len() >= self.in_len()
    }

    /// Channel plan `c_in ≤ m = c_out·u²`; with full convolution this alone
    /// guarantees [`is_determined`](Self::is_determined).
    pub fn channel_plan_ok(&self) -> bool {
        self.in_channels <= self.pre_shuffle_channels
    }
}

/// A `channels × height × width` response map.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ResponseMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return shape_err(format!(
                "{} values for a {channels}x{height}x{width} map",
                data.len()
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

fn unpool_into(src: &[f64], channels: usize, h: usize, w: usize, u: usize, dst: &mut [f64]) {
    let groups = u * u;
    let (oh, ow) = (h * u, w * u);
    for c in 0..channels / groups {
        for dy in 0..u {
            for dx in 0..u {
                let sc = c * groups + dy * u + dx;
                for p in 0..h {
                    let srow = &src[(sc * h + p) * w..(sc * h + p + 1) * w];
                    let drow = &mut dst[(c * oh + p * u + dy) * ow..(c * oh + p * u + dy + 1) * ow];
                    for (q, &v) in srow.iter().enumerate() {
                        drow[q * u + dx] = v;
                    }
                }
            }
        }
    }
}

fn pool_into(src: &[f64], channels: usize, h: usize, w: usize, u: usize, dst: &mut [f64]) {
    let groups = u * u;
    let (ph, pw) = (h / u, w / u);
    for c in 0..channels {
        for dy in 0..u {
            for dx in 0..u {
                let dc = c * groups + dy * u + dx;
                for p in 0..ph {
                    let srow = &src[(c * h + p * u + dy) * w..(c * h + p * u + dy + 1) * w];
                    let drow = &mut dst[(dc * ph + p) * pw..(dc * ph + p + 1) * pw];
                    for (q, d) in drow.iter_mut().enumerate() {
                        *d = srow[q * u + dx];
                    }
                }
            }
        }
    }
}

/// Pixel shuffle: channel `c·u² + dy·u + dx` at `(p, q)` moves to channel `c`
/// at `(p·u + dy, q·u + dx)`.
pub fn unpool(x: &ResponseMap, u: usize) -> Result<ResponseMap> {
    if u == 0 || x.channels % (u * u) != 0 {
        return shape_err(format!(
            "{} channels cannot be unpooled by {u}x{u}",
            x.channels
        ));
    }
    let mut out = ResponseMap::zeros(x.channels / (u * u), x.height * u, x.width * u);
    unpool_into(&x.data, x.channels, x.height, x.width, u, &mut out.data);
    Ok(out)
}

/// Inverse of [`unpool`].
pub fn pool(x: &ResponseMap, u: usize) -> Result<ResponseMap> {
    if u == 0 || x.height % u != 0 || x.width % u != 0 {
        return shape_err(format!(
            "{}x{} map cannot be pooled by {u}x{u}",
            x.height, x.width
        ));
    }
    let mut out = ResponseMap::zeros(x.channels * u * u, x.height / u, x.width / u);
    pool_into(&x.data, x.channels, x.height, x.width, u, &mut out.data);
    Ok(out)
}

/// Full-mode patches: one row per output position in raster order, columns
/// ordered `(c, dy, dx)`; taps outside the map read as zero.
pub fn extract_patches(x: &ResponseMap, k: usize) -> Matrix {
    let mut out = Matrix::zeros((x.height + k - 1) * (x.width + k - 1), x.channels * k * k);
    patches_into(
        &x.data,
        x.channels,
        x.height,
        x.width,
        k,
        out.as_mut_slice(),
    );
    out
}

fn patches_into(src: &[f64], c: usize, h: usize, w: usize, k: usize, dst: &mut [f64]) {
    let (ch, cw) = (h + k - 1, w + k - 1);
    let plen = c * k * k;
    for oy in 0..ch {
        for ox in 0..cw {
            let row = &mut dst[(oy * cw + ox) * plen..(oy * cw + ox + 1) * plen];
            for ci in 0..c {
                for dy in 0..k {
                    let iy = oy + dy;
                    if iy < k - 1 || iy - (k - 1) >= h {
                        continue;
                    }
                    let iy = iy - (k - 1);
                    for dx in 0..k {
                        let ix = ox + dx;
                        if ix < k - 1 || ix - (k - 1) >= w {
                            continue;
                        }
                        row[(ci * k + dy) * k + dx] = src[(ci * h + iy) * w + ix - (k - 1)];
                    }
                }
            }
        }
    }
}

/// Patch sampling for the kernel solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeightSampling {
    /// Datapoints drawn (without replacement) per solve; `None` uses all.
    pub sample_size: Option<usize>,
    /// Number of partitions solved separately and averaged.
    pub chunks: usize,
}

impl Default for WeightSampling {
    fn default() -> Self {
        Self {
            sample_size: None,
            chunks: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnpoolLayer {
    shape: ConvShape,
    /// `m × (c_in·k²)`
    kernels: Matrix,
}

impl ConvUnpoolLayer {
    pub fn from_kernels(shape: ConvShape, kernels: Matrix) -> Result<Self> {
        shape.check()?;
        if kernels.shape() != (shape.pre_shuffle_channels, shape.patch_len()) {
            return shape_err(format!(
                "kernels are {:?}, layer needs {}x{}",
                kernels.shape(),
                shape.pre_shuffle_channels,
                shape.patch_len()
            ));
        }
        Ok(Self { shape, kernels })
    }

    /// Gaussian kernels with standard deviation `1/√(c_in·k²)`, redrawn until
    /// the latent operator has full column rank.
    pub fn random<R: Rng>(
        shape: ConvShape,
        rank_tol: f64,
        mut next_rng: impl FnMut(usize) -> R,
    ) -> Result<Self> {
        shape.check()?;
        if !shape.is_determined() {
            return Err(Error::DeterminednessViolation {
                equations: shape.out_len(),
                unknowns: shape.in_len(),
            });
        }
        let scale = 1.0 / (shape.patch_len() as f64).sqrt();
        let mut last = Error::RankDeficient {
            ratio: 0.0,
            tol: rank_tol,
        };
        for attempt in 0..16 {
            let mut rng = next_rng(attempt);
            let kernels = Matrix::from_raw(
                shape.pre_shuffle_channels,
                shape.patch_len(),
                gaussian_vec(
                    &mut rng,
                    shape.pre_shuffle_channels * shape.patch_len(),
                    scale,
                ),
            );
            let layer = Self { shape, kernels };
            match LeastSquares::factor(&layer.build_operator(), rank_tol) {
                Ok(_) => return Ok(layer),
                Err(e) => last = e,
            }
        }
        Err(last)
    }

    pub fn shape(&self) -> &ConvShape {
        &self.shape
    }

    pub fn kernels(&self) -> &Matrix {
        &self.kernels
    }

    /// Pre-shuffle full convolution of one flattened input map.
    pub fn conv_full_into(&self, x: &[f64], out: &mut [f64]) {
        let s = &self.shape;
        let (h, w, k) = (s.in_height, s.in_width, s.kernel);
        let (ch, cw) = (s.conv_height(), s.conv_width());
        out.fill(0.0);
        for j in 0..s.pre_shuffle_channels {
            let kj = self.kernels.row(j);
            let oj = &mut out[j * ch * cw..(j + 1) * ch * cw];
            for c in 0..s.in_channels {
                for dy in 0..k {
                    for dx in 0..k {
                        let kv = kj[(c * k + dy) * k + dx];
                        if kv == 0.0 {
                            continue;
                        }
                        // oy = iy + (k-1) - dy, ox = ix + (k-1) - dx
                        for iy in 0..h {
                            let oy = iy + k - 1 - dy;
                            let src = &x[(c * h + iy) * w..(c * h + iy + 1) * w];
                            let ox0 = k - 1 - dx;
                            let dst = &mut oj[oy * cw + ox0..oy * cw + ox0 + w];
                            axpy(kv, src, dst);
                        }
                    }
                }
            }
        }
    }

    /// Explicit operator `A` (pre-shuffle outputs × inputs) with
    /// `flatten(conv_full(x)) = A·flatten(x)`.
    pub fn build_operator(&self) -> Matrix {
        let s = &self.shape;
        let (h, w, k) = (s.in_height, s.in_width, s.kernel);
        let (ch, cw) = (s.conv_height(), s.conv_width());
        let mut a = Matrix::zeros(s.out_len(), s.in_len());
        for c in 0..s.in_channels {
            for iy in 0..h {
                for ix in 0..w {
                    let col = (c * h + iy) * w + ix;
                    for j in 0..s.pre_shuffle_channels {
                        let kj = self.kernels.row(j);
                        for dy in 0..k {
                            let oy = iy + k - 1 - dy;
                            for dx in 0..k {
                                let ox = ix + k - 1 - dx;
                                a[((j * ch + oy) * cw + ox, col)] += kj[(c * k + dy) * k + dx];
                            }
                        }
                    }
                }
            }
        }
        debug_assert!(!s.channel_plan_ok() || a.rows() >= a.cols());
        a
    }

    fn check_rows(&self, m: &Matrix, len: usize, what: &str) -> Result<()> {
        if m.cols() != len {
            return shape_err(format!(
                "{what} have {} columns, layer needs {len}",
                m.cols()
            ));
        }
        Ok(())
    }

    /// `a(unpool(conv_full(x)))` for every row of `inputs`.
    pub fn forward(&self, act: &Activation, inputs: &Matrix) -> Result<Matrix> {
        let s = self.shape;
        self.check_rows(inputs, s.in_len(), "inputs")?;
        let mut out = Matrix::zeros(inputs.rows(), s.out_len());
        parallel::for_each_row_mut(out.as_mut_slice(), s.out_len(), |n, row| {
            let mut conv = vec![0.0; s.out_len()];
            self.conv_full_into(inputs.row(n), &mut conv);
            unpool_into(
                &conv,
                s.pre_shuffle_channels,
                s.conv_height(),
                s.conv_width(),
                s.unpool,
                row,
            );
            act.apply_in_place(row);
        });
        Ok(out)
    }

    pub fn forward_map(&self, act: &Activation, x: &ResponseMap) -> Result<ResponseMap> {
        let s = self.shape;
        if (x.channels, x.height, x.width) != (s.in_channels, s.in_height, s.in_width) {
            return shape_err(format!(
                "input map {}x{}x{} does not match layer input {}x{}x{}",
                x.channels, x.height, x.width, s.in_channels, s.in_height, s.in_width
            ));
        }
        let inputs = Matrix::from_raw(1, s.in_len(), x.data.clone());
        let out = self.forward(act, &inputs)?;
        ResponseMap::new(
            s.out_channels(),
            s.out_height(),
            s.out_width(),
            out.into_vec(),
        )
    }

    /// `pool(a⁻¹(y))` per row: the pre-shuffle linear targets.
    fn pooled_targets(&self, act: &Activation, targets: &Matrix) -> Result<Matrix> {
        act.check_invertible()?;
        let s = self.shape;
        self.check_rows(targets, s.out_len(), "targets")?;
        Ok(pooled_inverse(&s, act, targets))
    }

    /// Least-squares latents per datapoint against one factorization of the
    /// operator matrix.
    pub fn solve_latents(
        &self,
        act: &Activation,
        targets: &Matrix,
        rank_tol: f64,
    ) -> Result<(Matrix, ResidualReport)> {
        let s = self.shape;
        if !s.is_determined() {
            return Err(Error::DeterminednessViolation {
                equations: s.out_len(),
                unknowns: s.in_len(),
            });
        }
        let rhs = self.pooled_targets(act, targets)?;
        let ls = LeastSquares::factor(&self.build_operator(), rank_tol)?;
        let (latents, norms) = ls.solve_rows(&rhs)?;
        Ok((latents, ResidualReport::new(0, norms, s.out_len())))
    }

    /// `‖conv_full(x_n) − pool(a⁻¹(y_n))‖` per datapoint.
    pub fn linear_residuals(
        &self,
        act: &Activation,
        latents: &Matrix,
        targets: &Matrix,
    ) -> Result<Vec<f64>> {
        let s = self.shape;
        self.check_rows(latents, s.in_len(), "latents")?;
        if latents.rows() != targets.rows() {
            return shape_err(format!(
                "{} latent rows but {} target rows",
                latents.rows(),
                targets.rows()
            ));
        }
        let rhs = self.pooled_targets(act, targets)?;
        Ok(parallel::map_range(latents.rows(), |n| {
            let mut conv = vec![0.0; s.out_len()];
            self.conv_full_into(latents.row(n), &mut conv);
            axpy(-1.0, rhs.row(n), &mut conv);
            norm2(&conv)
        }))
    }

    /// Kernel solve; see [`solve_kernels`].
    pub fn solve_weights<R: Rng>(
        shape: ConvShape,
        inputs: &Matrix,
        act: &Activation,
        targets: &Matrix,
        sampling: WeightSampling,
        rng: &mut R,
        rank_tol: f64,
    ) -> Result<(Self, Vec<f64>)> {
        let (kernels, res) = solve_kernels(&shape, inputs, act, targets, sampling, rng, rank_tol)?;
        Ok((Self { shape, kernels }, res))
    }
}

fn pooled_inverse(s: &ConvShape, act: &Activation, targets: &Matrix) -> Matrix {
    let mut rhs = Matrix::zeros(targets.rows(), s.out_len());
    parallel::for_each_row_mut(rhs.as_mut_slice(), s.out_len(), |n, row| {
        let mut y = targets.row(n).to_vec();
        act.invert_in_place(&mut y);
        pool_into(
            &y,
            s.out_channels(),
            s.out_height(),
            s.out_width(),
            s.unpool,
            row,
        );
    });
    rhs
}

/// Datapoints folded into the running factorization per step.
const IMAGES_PER_BLOCK: usize = 32;

/// Solves all `m` kernels from sampled datapoints.
///
/// Every patch of a sampled datapoint contributes one equation per kernel
/// (`patches · w_j = pooled targets_j`). Samples are drawn uniformly without
/// replacement; with `chunks > 1` the sample is split into contiguous
/// partitions whose solutions are averaged. Returns the kernels and one
/// residual norm per kernel (combined over chunks).
pub fn solve_kernels<R: Rng>(
    shape: &ConvShape,
    inputs: &Matrix,
    act: &Activation,
    targets: &Matrix,
    sampling: WeightSampling,
    rng: &mut R,
    rank_tol: f64,
) -> Result<(Matrix, Vec<f64>)> {
    shape.check()?;
    act.check_invertible()?;
    let s = *shape;
    if inputs.cols() != s.in_len()
        || targets.cols() != s.out_len()
        || inputs.rows() != targets.rows()
    {
        return shape_err(format!(
            "inputs {:?} / targets {:?} do not match layer {}→{}",
            inputs.shape(),
            targets.shape(),
            s.in_len(),
            s.out_len()
        ));
    }
    if sampling.chunks == 0 {
        return Err(Error::Config("chunk count must be at least 1".into()));
    }
    let n = inputs.rows();
    let chosen: Vec<usize> = match sampling.sample_size {
        Some(k) if k < n => {
            let mut v = index::sample(rng, n, k).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    };
    if chosen.len() < sampling.chunks {
        return Err(Error::InsufficientData {
            needed: sampling.chunks,
            got: chosen.len(),
        });
    }

    let unknowns = s.patch_len();
    let per_image = s.patches_per_image();
    let m = s.pre_shuffle_channels;
    let bounds: Vec<(usize, usize)> = (0..sampling.chunks)
        .map(|c| {
            (
                c * chosen.len() / sampling.chunks,
                (c + 1) * chosen.len() / sampling.chunks,
            )
        })
        .collect();
    for &(a, b) in &bounds {
        if (b - a) * per_image < unknowns {
            return Err(Error::InsufficientData {
                needed: unknowns,
                got: (b - a) * per_image,
            });
        }
    }

    let solve_chunk = |&(start, end): &(usize, usize)| -> Result<(Matrix, Vec<f64>)> {
        let mut acc = IncrementalLeastSquares::new(unknowns, m);
        for block in chosen[start..end].chunks(IMAGES_PER_BLOCK) {
            let rows = block.len() * per_image;
            let mut a = Matrix::zeros(rows, unknowns);
            let mut b = Matrix::zeros(rows, m);
            for (bi, &img) in block.iter().enumerate() {
                let r0 = bi * per_image;
                patches_into(
                    inputs.row(img),
                    s.in_channels,
                    s.in_height,
                    s.in_width,
                    s.kernel,
                    &mut a.as_mut_slice()[r0 * unknowns..(r0 + per_image) * unknowns],
                );
                let mut y = targets.row(img).to_vec();
                act.invert_in_place(&mut y);
                let mut pooled = vec![0.0; s.out_len()];
                pool_into(
                    &y,
                    s.out_channels(),
                    s.out_height(),
                    s.out_width(),
                    s.unpool,
                    &mut pooled,
                );
                for j in 0..m {
                    for p in 0..per_image {
                        b[(r0 + p, j)] = pooled[j * per_image + p];
                    }
                }
            }
            acc.absorb(&a, &b)?;
        }
        acc.finish(rank_tol)
    };

    let solved: Vec<Result<(Matrix, Vec<f64>)>> =
        parallel::map_range(bounds.len(), |c| solve_chunk(&bounds[c]));
    let mut kernels = Matrix::zeros(m, unknowns);
    let mut res_sq = vec![0.0; m];
    let count = solved.len() as f64;
    for r in solved {
        let (k, res) = r?;
        for (dst, src) in kernels.as_mut_slice().iter_mut().zip(k.as_slice()) {
            *dst += src / count;
        }
        for (a, b) in res_sq.iter_mut().zip(&res) {
            *a += b * b;
        }
    }
    Ok((kernels, res_sq.into_iter().map(f64::sqrt).collect()))
}

/// Dot of each kernel with each patch row; the patch-path convolution.
pub fn conv_via_patches(layer: &ConvUnpoolLayer, x: &ResponseMap) -> Vec<f64> {
    let patches = extract_patches(x, layer.shape.kernel);
    let p = patches.rows();
    let mut out = vec![0.0; layer.shape.pre_shuffle_channels * p];
    for j in 0..layer.shape.pre_shuffle_channels {
        for r in 0..p {
            out[j * p + r] = dot(layer.kernels.row(j), patches.row(r));
        }
    }
    out
}
