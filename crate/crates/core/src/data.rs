//! MNIST ingestion and affine perturbation of image batches.
//!
//! IDX decoding works on byte slices so it stays usable without `std`; the
//! `avae` crate reads the files. Images are zero-padded from 28x28 to 40x40
//! and scaled to `[0, 1]`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::affine::{warp_each, AffineParams};
use crate::error::{Error, IdxError, Result};
use crate::tensor::{expect_rank, Scalar, Tensor};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Side length of a raw MNIST digit.
pub const RAW_HW: usize = 28;
/// Side length after padding.
pub const PADDED_HW: usize = 40;

/// Raw `u8` images as stored in an IDX file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated { needed: at + 4, available: bytes.len() })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), IdxError> {
    let found = read_u32(bytes, 0)?;
    if found != expected {
        return Err(IdxError::BadMagic { expected, found });
    }
    Ok(())
}

/// Decodes an IDX3 image file (magic `0x00000803`, dims `count x rows x cols`).
pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages, IdxError> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let rows = read_u32(bytes, 8)? as usize;
    let cols = read_u32(bytes, 12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(IdxError::DimMismatch(format!("empty image dims {rows}x{cols}")));
    }
    let needed = 16 + count * rows * cols;
    if bytes.len() < needed {
        return Err(IdxError::Truncated { needed, available: bytes.len() });
    }
    if bytes.len() > needed {
        return Err(IdxError::DimMismatch(format!(
            "{} trailing bytes after {count} images of {rows}x{cols}",
            bytes.len() - needed
        )));
    }
    Ok(IdxImages { count, rows, cols, pixels: bytes[16..].to_vec() })
}

/// Decodes an IDX1 label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = read_u32(bytes, 4)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(IdxError::Truncated { needed, available: bytes.len() });
    }
    if bytes.len() > needed {
        return Err(IdxError::DimMismatch(format!("{} trailing bytes after {count} labels", bytes.len() - needed)));
    }
    let labels = bytes[8..].to_vec();
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(IdxError::DimMismatch(format!("label {bad} outside 0..=9")));
    }
    Ok(labels)
}

/// Scales bytes to `[0, 1]` and centers each 28x28 image in a 40x40 zero
/// canvas (6-pixel border). Returns `(n, 1, 40, 40)`.
pub fn preprocess<T: Scalar>(raw: &IdxImages) -> Result<Tensor<T>> {
    if raw.rows != RAW_HW || raw.cols != RAW_HW {
        let dim = if raw.rows != RAW_HW { "height" } else { "width" };
        let got = if raw.rows != RAW_HW { raw.rows } else { raw.cols };
        return Err(Error::ShapeMismatch { op: "preprocess", dim, expected: RAW_HW, got });
    }
    let border = (PADDED_HW - RAW_HW) / 2;
    let scale = T::lit(1.0 / 255.0);
    let mut out = vec![T::zero(); raw.count * PADDED_HW * PADDED_HW];
    for (src, dst) in raw.pixels.chunks(RAW_HW * RAW_HW).zip(out.chunks_mut(PADDED_HW * PADDED_HW)) {
        for (r, line) in src.chunks(RAW_HW).enumerate() {
            let row = &mut dst[(r + border) * PADDED_HW + border..][..RAW_HW];
            for (d, &p) in row.iter_mut().zip(line) {
                *d = T::lit(p as f64) * scale;
            }
        }
    }
    Tensor::new(&[raw.count, 1, PADDED_HW, PADDED_HW], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Preprocessed images with labels and their indices in the source file.
#[derive(Debug, Clone, PartialEq)]
pub struct MnistSet<T> {
    pub images: Tensor<T>,
    pub labels: Vec<u8>,
    pub indices: Vec<usize>,
    pub split: Split,
}

impl<T: Scalar> MnistSet<T> {
    pub fn new(images: Tensor<T>, labels: Vec<u8>, split: Split) -> Result<Self> {
        expect_rank(&images, "MnistSet", 4)?;
        let n = images.shape()[0];
        if labels.len() != n {
            return Err(Error::ShapeMismatch { op: "MnistSet", dim: "labels", expected: n, got: labels.len() });
        }
        Ok(Self { images, labels, indices: (0..n).collect(), split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `rows` of this set; stable indices are carried over.
    pub fn subset(&self, rows: &[usize], split: Split) -> Self {
        Self {
            images: self.images.select_outer(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            indices: rows.iter().map(|&r| self.indices[r]).collect(),
            split,
        }
    }

    /// Pixel mean and standard deviation, for optional input normalization.
    pub fn mean_std(&self) -> (f64, f64) {
        let d = self.images.data();
        let n = d.len().max(1) as f64;
        let mean = d.iter().map(|v| v.as_f64()).sum::<f64>() / n;
        let var = d.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }
}

/// Disjoint, seed-reproducible train/val row selections out of `total`.
pub fn make_splits(total: usize, train_n: usize, val_n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let requested = train_n + val_n;
    if requested > total {
        return Err(Error::OverRequest { requested, available: total });
    }
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = idx[..train_n].to_vec();
    let mut val = idx[train_n..requested].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Ranges of random affine perturbations. Angles are in degrees; `scale` is
/// the largest fractional deviation of the scale factor from 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    pub rotation: (f64, f64),
    pub shear: f64,
    pub scale: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn none(seed: u64) -> Self {
        Self { rotation: (0.0, 0.0), shear: 0.0, scale: 0.0, seed }
    }

    pub fn rotation(lo: f64, hi: f64, seed: u64) -> Self {
        Self { rotation: (lo, hi), ..Self::none(seed) }
    }

    /// Full-circle rotations, shears up to 55 degrees, scaling up to 50%.
    pub fn affine_suite(seed: u64) -> Self {
        Self { rotation: (0.0, 360.0), shear: 55.0, scale: 0.5, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.rotation;
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::Config(format!("rotation range [{lo}, {hi}] is not ordered")));
        }
        if !(0.0..90.0).contains(&self.shear) {
            return Err(Error::Config(format!("shear {} must lie in [0, 90)", self.shear)));
        }
        if !(0.0..1.0).contains(&self.scale) {
            return Err(Error::Config(format!("scale deviation {} must lie in [0, 1)", self.scale)));
        }
        Ok(())
    }

    /// Rotation-only specs produce [`AffineParams::RotationOnly`], anything
    /// else the rotation/scale/shear form with zero translation.
    pub fn is_rotation_only(&self) -> bool {
        self.shear == 0.0 && self.scale == 0.0
    }

    /// Draws one transform. Degenerate ranges return their single value
    /// without consuming randomness for that component.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AffineParams {
        let uniform = |rng: &mut R, lo: f64, hi: f64| if lo < hi { rng.random_range(lo..hi) } else { lo };
        let theta = uniform(rng, self.rotation.0, self.rotation.1) * PI / 180.0;
        if self.is_rotation_only() {
            return AffineParams::RotationOnly { theta };
        }
        let shear = uniform(rng, -self.shear, self.shear) * PI / 180.0;
        let factor = uniform(rng, 1.0 - self.scale, 1.0 + self.scale);
        AffineParams::RotScaleShearTranslate { theta, log_scale: factor.ln(), shear, tx: 0.0, ty: 0.0 }
    }
}

/// Independent random stream for sample `index` under `seed`, so a sample's
/// perturbation does not depend on batch composition or order.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Warps each image by a transform drawn from `spec`; returns the warped
/// batch and the applied transforms.
pub fn perturb<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor<T>,
    spec: &PerturbationSpec,
    rng: &mut R,
) -> Result<(Tensor<T>, Vec<AffineParams>)> {
    spec.validate()?;
    expect_rank(x, "perturb", 4)?;
    let alphas: Vec<AffineParams> = (0..x.shape()[0]).map(|_| spec.sample(rng)).collect();
    Ok((warp_each(x, &alphas)?, alphas))
}

/// [`perturb`] with one stream per stable sample index, derived from
/// `spec.seed`.
pub fn perturb_indexed<T: Scalar>(
    x: &Tensor<T>,
    indices: &[usize],
    spec: &PerturbationSpec,
) -> Result<(Tensor<T>, Vec<AffineParams>)> {
    spec.validate()?;
    expect_rank(x, "perturb", 4)?;
    if indices.len() != x.shape()[0] {
        return Err(Error::ShapeMismatch { op: "perturb", dim: "indices", expected: x.shape()[0], got: indices.len() });
    }
    let alphas: Vec<AffineParams> = indices.iter().map(|&i| spec.sample(&mut sample_rng(spec.seed, i))).collect();
    Ok((warp_each(x, &alphas)?, alphas))
}
