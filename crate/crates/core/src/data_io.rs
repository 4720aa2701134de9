//! Dataset loaders, image grids, matrix CSVs and the model file format.
//!
//! Pixels are scaled to `[0, 1]` on load. Images are flattened channel-major,
//! then row-major, so a `c × h × w` image becomes the vector
//! `[ch0 row0, ch0 row1, …, ch1 row0, …]`.
//!
//! Model files are little-endian:
//!
//! ```text
//! "STAR"  u32 version  f64 slope  u32 layer_count
//! per layer:
//!   u8 tag (0 feedforward, 1 conv-unpool)
//!   feedforward: u32 in_dim  u32 out_dim
//!   conv-unpool: u32 c_in  u32 height  u32 width  u32 kernel  u32 m  u32 unpool
//!   u32 rows  u32 cols  rows·cols × f64 weights, row-major
//! ```

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::activation::Activation;
use crate::conv_layer::{ConvShape, ConvUnpoolLayer};
use crate::error::{shape_err, Error, Result};
use crate::ff_layer::FeedforwardLayer;
use crate::layer::Layer;
use crate::linalg::Matrix;
use crate::trainer::Model;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR10_RECORD: usize = 1 + 3 * 32 * 32;
pub const MODEL_MAGIC: [u8; 4] = *b"STAR";
pub const MODEL_VERSION: u32 = 1;

/// Images with pixels in `[0, 1]`, stored flattened channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    count: usize,
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl ImageBatch {
    pub fn new(
        count: usize,
        channels: usize,
        height: usize,
        width: usize,
        pixels: Vec<f64>,
    ) -> Result<Self> {
        if count == 0 || channels * height * width == 0 {
            return shape_err("an image batch needs at least one non-empty image");
        }
        if pixels.len() != count * channels * height * width {
            return shape_err(format!(
                "{} pixels for {count} images of {channels}x{height}x{width}",
                pixels.len()
            ));
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return shape_err(format!("pixel value {p} outside [0, 1]"));
        }
        Ok(Self {
            count,
            channels,
            height,
            width,
            pixels,
        })
    }

    fn from_bytes(
        count: usize,
        channels: usize,
        height: usize,
        width: usize,
        bytes: &[u8],
    ) -> Self {
        Self {
            count,
            channels,
            height,
            width,
            pixels: bytes.iter().map(|&b| f64::from(b) / 255.0).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.count
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

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn image(&self, n: usize) -> &[f64] {
        let len = self.image_len();
        &self.pixels[n * len..(n + 1) * len]
    }

    /// The first `n` images (all of them if `n` is larger).
    pub fn truncate(mut self, n: usize) -> Self {
        if n > 0 && n < self.count {
            self.count = n;
            self.pixels.truncate(n * self.image_len());
        }
        self
    }
}

/// `N × (c·h·w)` matrix, one image per row.
pub fn flatten(batch: &ImageBatch) -> Matrix {
    Matrix::from_raw(batch.count, batch.image_len(), batch.pixels.clone())
}

/// Inverse of [`flatten`]. Values must already lie in `[0, 1]`; use
/// [`write_image_grid`] for arbitrary reconstructions.
pub fn unflatten(m: &Matrix, channels: usize, height: usize, width: usize) -> Result<ImageBatch> {
    if m.cols() != channels * height * width {
        return shape_err(format!(
            "{} columns cannot hold {channels}x{height}x{width} images",
            m.cols()
        ));
    }
    ImageBatch::new(m.rows(), channels, height, width, m.as_slice().to_vec())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(fs::read(path)?)
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::TruncatedFile(format!("{what}: header ends at byte {}", bytes.len())))
}

/// `(count, height, width)` from the header of an IDX image file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IdxHeader {
    pub count: usize,
    pub height: usize,
    pub width: usize,
}

fn parse_idx_header(head: &[u8], what: &str) -> Result<IdxHeader> {
    let magic = be_u32(head, 0, what)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    Ok(IdxHeader {
        count: be_u32(head, 4, what)? as usize,
        height: be_u32(head, 8, what)? as usize,
        width: be_u32(head, 12, what)? as usize,
    })
}

/// Reads only the 16-byte header of an IDX image file.
pub fn read_idx_header(path: impl AsRef<Path>) -> Result<IdxHeader> {
    let path = path.as_ref();
    let mut head = Vec::with_capacity(16);
    File::open(path)?.take(16).read_to_end(&mut head)?;
    parse_idx_header(&head, &path.display().to_string())
}

/// Loads an IDX image tensor (`N × H × W` unsigned bytes) as `N × 1 × H × W`.
pub fn load_idx(path: impl AsRef<Path>) -> Result<ImageBatch> {
    let path = path.as_ref();
    let what = path.display().to_string();
    let bytes = read_file(path)?;
    let h = parse_idx_header(&bytes, &what)?;
    let len = h.count * h.height * h.width;
    let body = bytes.get(16..16 + len).ok_or_else(|| {
        Error::TruncatedFile(format!(
            "{what}: {} of {len} pixel bytes",
            bytes.len().saturating_sub(16)
        ))
    })?;
    if h.count == 0 || h.height * h.width == 0 {
        return shape_err(format!("{what}: empty image tensor"));
    }
    Ok(ImageBatch::from_bytes(h.count, 1, h.height, h.width, body))
}

/// Loads an IDX label vector.
pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let what = path.display().to_string();
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, &what)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n = be_u32(&bytes, 4, &what)? as usize;
    bytes.get(8..8 + n).map(<[u8]>::to_vec).ok_or_else(|| {
        Error::TruncatedFile(format!(
            "{what}: {} of {n} labels",
            bytes.len().saturating_sub(8)
        ))
    })
}

/// Writes single-channel images as an IDX tensor; pixels are rounded to
/// bytes.
pub fn write_idx(batch: &ImageBatch, path: impl AsRef<Path>) -> Result<()> {
    if batch.channels != 1 {
        return shape_err(format!(
            "IDX images are single channel, batch has {}",
            batch.channels
        ));
    }
    let mut out = BufWriter::new(File::create(path)?);
    for v in [
        IDX_IMAGES_MAGIC,
        batch.count as u32,
        batch.height as u32,
        batch.width as u32,
    ] {
        out.write_all(&v.to_be_bytes())?;
    }
    let bytes: Vec<u8> = batch
        .pixels
        .iter()
        .map(|&p| (p * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

pub fn write_idx_labels(labels: &[u8], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    out.write_all(&(labels.len() as u32).to_be_bytes())?;
    out.write_all(labels)?;
    out.flush()?;
    Ok(())
}

fn cifar_count(len: u64, what: &str) -> Result<usize> {
    if len == 0 || len % CIFAR10_RECORD as u64 != 0 {
        return Err(Error::TruncatedFile(format!(
            "{what}: {len} bytes is not a whole number of {CIFAR10_RECORD}-byte records"
        )));
    }
    Ok((len / CIFAR10_RECORD as u64) as usize)
}

/// Number of records in a CIFAR-10 binary batch, from its length alone.
pub fn read_cifar10_count(path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    cifar_count(fs::metadata(path)?.len(), &path.display().to_string())
}

/// Loads a CIFAR-10 binary batch as `N × 3 × 32 × 32` plus labels.
pub fn load_cifar10(path: impl AsRef<Path>) -> Result<(ImageBatch, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let n = cifar_count(bytes.len() as u64, &path.display().to_string())?;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR10_RECORD - 1));
    for rec in bytes.chunks_exact(CIFAR10_RECORD) {
        labels.push(rec[0]);
        pixels.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok((
        ImageBatch {
            count: n,
            channels: 3,
            height: 32,
            width: 32,
            pixels,
        },
        labels,
    ))
}

/// Tiles images into a PGM (1 channel) or PPM (3 channels) grid, image `n`
/// at grid cell `(n / cols, n % cols)`. Rows are flattened images of
/// `channels × height × width`; values are clamped to `[0, 1]`. Returns the
/// number of clamped values.
pub fn write_image_grid(
    images: &Matrix,
    channels: usize,
    height: usize,
    width: usize,
    cols: usize,
    path: impl AsRef<Path>,
) -> Result<usize> {
    if channels != 1 && channels != 3 {
        return shape_err(format!("image grids need 1 or 3 channels, got {channels}"));
    }
    if images.cols() != channels * height * width {
        return shape_err(format!(
            "{} values per image do not match {channels}x{height}x{width}",
            images.cols()
        ));
    }
    if cols == 0 || images.rows() == 0 {
        return shape_err("image grid needs at least one image and one column");
    }
    let n = images.rows();
    let cols = cols.min(n);
    let grid_rows = n.div_ceil(cols);
    let (gw, gh) = (cols * width, grid_rows * height);
    let mut raster = vec![0u8; gw * gh * channels];
    let mut clamped = 0;
    let plane = height * width;
    for i in 0..n {
        let (oy, ox) = ((i / cols) * height, (i % cols) * width);
        let img = images.row(i);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let v = img[c * plane + y * width + x];
                    if !(0.0..=1.0).contains(&v) {
                        clamped += 1;
                    }
                    let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                    raster[((oy + y) * gw + ox + x) * channels + c] = byte;
                }
            }
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    let tag = if channels == 1 { "P5" } else { "P6" };
    write!(out, "{tag}\n{gw} {gh}\n255\n")?;
    out.write_all(&raster)?;
    out.flush()?;
    Ok(clamped)
}

/// CSV with header `index,v0,v1,…` and one row per datapoint.
pub fn write_matrix_csv<W: Write>(m: &Matrix, mut out: W) -> Result<()> {
    write!(out, "index")?;
    for j in 0..m.cols() {
        write!(out, ",v{j}")?;
    }
    writeln!(out)?;
    for i in 0..m.rows() {
        write!(out, "{i}")?;
        for v in m.row(i) {
            write!(out, ",{v:e}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Reads a CSV written by [`write_matrix_csv`].
pub fn read_matrix_csv<R: Read>(input: R) -> Result<Matrix> {
    let mut lines = BufReader::new(input).lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::TruncatedFile("matrix CSV has no header".into()))?;
    let cols = header.split(',').count().saturating_sub(1);
    let mut data = Vec::new();
    let mut rows = 0;
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',').skip(1);
        for j in 0..cols {
            let v = fields.next().ok_or_else(|| {
                Error::TruncatedFile(format!(
                    "matrix CSV row {} has fewer than {cols} values",
                    lineno + 1
                ))
            })?;
            let v: f64 = v.trim().parse().map_err(|_| {
                Error::Config(format!(
                    "matrix CSV row {} column {j}: bad number {v:?}",
                    lineno + 1
                ))
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Matrix::new(rows, cols, data)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::Config(format!("dimension {v} does not fit the model format")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serializes a model; see the module docs for the layout.
pub fn model_to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&model.activation().negative_slope().to_le_bytes());
    put_u32(&mut out, model.layers().len())?;
    for layer in model.layers() {
        match layer {
            Layer::Feedforward(l) => {
                out.push(0);
                put_u32(&mut out, l.in_dim())?;
                put_u32(&mut out, l.out_dim())?;
            }
            Layer::ConvUnpool(l) => {
                let s = l.shape();
                out.push(1);
                for v in [
                    s.in_channels,
                    s.in_height,
                    s.in_width,
                    s.kernel,
                    s.pre_shuffle_channels,
                    s.unpool,
                ] {
                    put_u32(&mut out, v)?;
                }
            }
        }
        let w = layer.weights();
        put_u32(&mut out, w.rows())?;
        put_u32(&mut out, w.cols())?;
        for v in w.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let s = self.bytes.get(self.at..self.at + n).ok_or_else(|| {
            Error::TruncatedFile(format!("model file ends at byte {}", self.bytes.len()))
        })?;
        self.at += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut cur = Cursor { bytes, at: 0 };
    let magic = cur.take(4)?;
    if magic != MODEL_MAGIC {
        return Err(Error::BadMagic {
            found: u32::from_be_bytes(magic.try_into().unwrap()),
            expected: u32::from_be_bytes(MODEL_MAGIC),
        });
    }
    let version = cur.u32()? as u32;
    if version != MODEL_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: MODEL_VERSION,
        });
    }
    let act = Activation::new(cur.f64()?)?;
    let count = cur.u32()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let tag = cur.u8()?;
        let shape = match tag {
            0 => None,
            1 => Some(ConvShape {
                in_channels: cur.u32()?,
                in_height: cur.u32()?,
                in_width: cur.u32()?,
                kernel: cur.u32()?,
                pre_shuffle_channels: cur.u32()?,
                unpool: cur.u32()?,
            }),
            t => {
                return Err(Error::Config(format!(
                    "unknown layer tag {t} in model file"
                )))
            }
        };
        let dims = if shape.is_none() {
            Some((cur.u32()?, cur.u32()?))
        } else {
            None
        };
        let (rows, cols) = (cur.u32()?, cur.u32()?);
        let raw = cur.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let w = Matrix::new(rows, cols, data)?;
        layers.push(match (shape, dims) {
            (Some(s), _) => {
                s.check()?;
                Layer::ConvUnpool(ConvUnpoolLayer::from_kernels(s, w)?)
            }
            (None, Some((in_dim, out_dim))) => {
                if (rows, cols) != (out_dim, in_dim + 1) {
                    return shape_err(format!(
                        "feedforward header {in_dim}->{out_dim} with a {rows}x{cols} weight block"
                    ));
                }
                Layer::Feedforward(FeedforwardLayer::from_weights(w)?)
            }
            (None, None) => unreachable!(),
        });
    }
    if cur.at != bytes.len() {
        return Err(Error::Config(format!(
            "{} trailing bytes in model file",
            bytes.len() - cur.at
        )));
    }
    Model::new(act, layers)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, model_to_bytes(model)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    model_from_bytes(&read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_roundtrip() {
        let b =
            ImageBatch::new(2, 1, 2, 2, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.5, 0.0, 0.1]).unwrap();
        let m = flatten(&b);
        assert_eq!(m.shape(), (2, 4));
        assert_eq!(unflatten(&m, 1, 2, 2).unwrap(), b);
        let one = ImageBatch::new(1, 1, 1, 1, vec![0.3]).unwrap();
        assert_eq!(flatten(&one).shape(), (1, 1));
    }

    #[test]
    fn batch_rejects_out_of_range() {
        assert!(ImageBatch::new(1, 1, 1, 1, vec![1.5]).is_err());
        assert!(ImageBatch::new(0, 1, 1, 1, vec![]).is_err());
    }

    #[test]
    fn cifar_length_check() {
        assert!(matches!(
            cifar_count(3073 * 2 + 1, "x"),
            Err(Error::TruncatedFile(_))
        ));
        assert_eq!(cifar_count(3073 * 2, "x").unwrap(), 2);
    }

    #[test]
    fn matrix_csv_roundtrip() {
        let m = Matrix::from_fn(3, 2, |i, j| i as f64 * 0.1 - j as f64 / 3.0);
        let mut buf = Vec::new();
        write_matrix_csv(&m, &mut buf).unwrap();
        assert_eq!(read_matrix_csv(&buf[..]).unwrap(), m);
    }

    #[test]
    fn model_bytes_reject_bad_magic_and_version() {
        let l =
            FeedforwardLayer::from_weights(Matrix::from_fn(3, 3, |i, j| (i + j) as f64)).unwrap();
        let model = Model::new(Activation::default(), vec![Layer::Feedforward(l)]).unwrap();
        let bytes = model_to_bytes(&model).unwrap();
        assert_eq!(model_from_bytes(&bytes).unwrap(), model);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            model_from_bytes(&bad),
            Err(Error::BadMagic { .. })
        ));
        let mut bumped = bytes.clone();
        bumped[4] = 2;
        assert!(matches!(
            model_from_bytes(&bumped),
            Err(Error::VersionMismatch {
                found: 2,
                expected: 1
            })
        ));
        assert!(matches!(
            model_from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::TruncatedFile(_))
        ));
    }
}
