//! Affine transforms of images: parameterization, sampling grids and
//! differentiable bilinear resampling.
//!
//! Coordinates are normalized so that the image spans `[-1, 1]` on both axes
//! and pixel `i` of an axis with `n` pixels has its center at
//! `(2i + 1) / n - 1`. A transform maps *output* coordinates to the *input*
//! coordinates that are sampled; positions outside the input read as zero.
//!
//! The constrained [`AffineMode::RotScaleShearTranslate`] mode builds its
//! linear block as `rotate(theta) * shear(psi) * exp(log_scale)`, with shear
//! `[[1, tan psi], [0, 1]]`, and uses `(tx, ty)` as the translation column.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::tensor::{expect_rank, Scalar, Tensor};

/// Smallest |det| of the linear block accepted as invertible.
pub const SINGULAR_DET: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AffineMode {
    /// Six raw entries of the 2x3 matrix, row-major.
    Full6,
    /// Rotation angle in radians.
    RotationOnly,
    /// `(theta, log_scale, shear, tx, ty)`.
    RotScaleShearTranslate,
}

impl AffineMode {
    pub fn n_params(self) -> usize {
        match self {
            AffineMode::Full6 => 6,
            AffineMode::RotationOnly => 1,
            AffineMode::RotScaleShearTranslate => 5,
        }
    }

    pub fn identity_params(self) -> Vec<f64> {
        match self {
            AffineMode::Full6 => vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            m => vec![0.0; m.n_params()],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AffineMode::Full6 => "full6",
            AffineMode::RotationOnly => "rotation",
            AffineMode::RotScaleShearTranslate => "rsst",
        }
    }
}

/// A single affine transform in one of the supported parameterizations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AffineParams {
    Full6([f64; 6]),
    RotationOnly { theta: f64 },
    RotScaleShearTranslate { theta: f64, log_scale: f64, shear: f64, tx: f64, ty: f64 },
}

impl AffineParams {
    pub fn identity(mode: AffineMode) -> Self {
        Self::from_slice(mode, &mode.identity_params())
    }

    pub fn rotation(theta: f64) -> Self {
        AffineParams::RotationOnly { theta }
    }

    pub fn from_slice(mode: AffineMode, p: &[f64]) -> Self {
        assert_eq!(p.len(), mode.n_params(), "parameter count for {mode:?}");
        match mode {
            AffineMode::Full6 => AffineParams::Full6([p[0], p[1], p[2], p[3], p[4], p[5]]),
            AffineMode::RotationOnly => AffineParams::RotationOnly { theta: p[0] },
            AffineMode::RotScaleShearTranslate => AffineParams::RotScaleShearTranslate {
                theta: p[0],
                log_scale: p[1],
                shear: p[2],
                tx: p[3],
                ty: p[4],
            },
        }
    }

    pub fn mode(&self) -> AffineMode {
        match self {
            AffineParams::Full6(_) => AffineMode::Full6,
            AffineParams::RotationOnly { .. } => AffineMode::RotationOnly,
            AffineParams::RotScaleShearTranslate { .. } => AffineMode::RotScaleShearTranslate,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        match *self {
            AffineParams::Full6(m) => m.to_vec(),
            AffineParams::RotationOnly { theta } => vec![theta],
            AffineParams::RotScaleShearTranslate { theta, log_scale, shear, tx, ty } => {
                vec![theta, log_scale, shear, tx, ty]
            }
        }
    }

    /// The 2x3 matrix mapping output coordinates to input coordinates.
    pub fn to_matrix(&self) -> [[f64; 3]; 2] {
        matrix_from_slice(self.mode(), &self.to_vec())
    }

    /// `to_matrix` as a `(2, 3)` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let m = self.to_matrix();
        Tensor::new(&[2, 3], m.iter().flatten().map(|&v| T::lit(v)).collect()).unwrap()
    }

    /// Homogeneous 3x3 form.
    pub fn to_homogeneous(&self) -> [[f64; 3]; 3] {
        let m = self.to_matrix();
        [m[0], m[1], [0.0, 0.0, 1.0]]
    }

    pub fn det(&self) -> f64 {
        let m = self.to_matrix();
        m[0][0] * m[1][1] - m[0][1] * m[1][0]
    }

    /// The inverse transform in raw matrix form.
    pub fn inverse(&self) -> Result<AffineParams> {
        let inv = invert_rows(&self.to_matrix())?;
        Ok(AffineParams::Full6([inv[0][0], inv[0][1], inv[0][2], inv[1][0], inv[1][1], inv[1][2]]))
    }

    /// Rotation component in radians. For general matrices this is the angle
    /// of the image of the x axis.
    pub fn rotation_angle(&self) -> f64 {
        match *self {
            AffineParams::RotationOnly { theta } => theta,
            AffineParams::RotScaleShearTranslate { theta, .. } => theta,
            AffineParams::Full6(m) => m[3].atan2(m[0]),
        }
    }
}

impl AffineParams {
    /// `R(delta) * self` in the same parameterization, where `R(delta)` is a
    /// pure rotation. Used to re-express a transform after the input it acts
    /// on has been rotated differently.
    pub fn rotated_by(&self, delta: f64) -> AffineParams {
        let (s, c) = delta.sin_cos();
        match *self {
            AffineParams::RotationOnly { theta } => AffineParams::RotationOnly { theta: theta + delta },
            AffineParams::RotScaleShearTranslate { theta, log_scale, shear, tx, ty } => AffineParams::RotScaleShearTranslate {
                theta: theta + delta,
                log_scale,
                shear,
                tx: c * tx - s * ty,
                ty: s * tx + c * ty,
            },
            AffineParams::Full6(m) => AffineParams::Full6([
                c * m[0] - s * m[3],
                c * m[1] - s * m[4],
                c * m[2] - s * m[5],
                s * m[0] + c * m[3],
                s * m[1] + c * m[4],
                s * m[2] + c * m[5],
            ]),
        }
    }
}

/// Wraps an angle into `[0, 2pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    let r = theta - TAU * (theta / TAU).floor();
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Smallest absolute difference of two angles, in `[0, pi]`.
pub fn angle_distance(a: f64, b: f64) -> f64 {
    let d = wrap_angle(a - b);
    if d > PI {
        TAU - d
    } else {
        d
    }
}

pub(crate) fn matrix_from_slice(mode: AffineMode, p: &[f64]) -> [[f64; 3]; 2] {
    match mode {
        AffineMode::Full6 => [[p[0], p[1], p[2]], [p[3], p[4], p[5]]],
        AffineMode::RotationOnly => {
            let (s, c) = p[0].sin_cos();
            [[c, -s, 0.0], [s, c, 0.0]]
        }
        AffineMode::RotScaleShearTranslate => {
            let (s, c) = p[0].sin_cos();
            let k = p[2].tan();
            let e = p[1].exp();
            [[e * c, e * (c * k - s), p[3]], [e * s, e * (s * k + c), p[4]]]
        }
    }
}

/// Partial derivatives of the flattened matrix `[a00, a01, t0, a10, a11, t1]`
/// with respect to each parameter.
pub(crate) fn matrix_jacobian(mode: AffineMode, p: &[f64]) -> Vec<[f64; 6]> {
    match mode {
        AffineMode::Full6 => (0..6)
            .map(|j| {
                let mut col = [0.0; 6];
                col[j] = 1.0;
                col
            })
            .collect(),
        AffineMode::RotationOnly => {
            let (s, c) = p[0].sin_cos();
            vec![[-s, -c, 0.0, c, -s, 0.0]]
        }
        AffineMode::RotScaleShearTranslate => {
            let (s, c) = p[0].sin_cos();
            let k = p[2].tan();
            let e = p[1].exp();
            let sec2 = 1.0 + k * k;
            vec![
                [-e * s, e * (-s * k - c), 0.0, e * c, e * (c * k - s), 0.0],
                [e * c, e * (c * k - s), 0.0, e * s, e * (s * k + c), 0.0],
                [0.0, e * sec2 * c, 0.0, 0.0, e * sec2 * s, 0.0],
                [0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
                [0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
            ]
        }
    }
}

pub(crate) fn invert_rows(m: &[[f64; 3]; 2]) -> Result<[[f64; 3]; 2]> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det.is_nan() || det.abs() <= SINGULAR_DET {
        return Err(Error::SingularTransform(det.abs()));
    }
    let (b00, b01, b10, b11) = (m[1][1] / det, -m[0][1] / det, -m[1][0] / det, m[0][0] / det);
    let (t0, t1) = (m[0][2], m[1][2]);
    Ok([[b00, b01, -(b00 * t0 + b01 * t1)], [b10, b11, -(b10 * t0 + b11 * t1)]])
}

/// Vector-Jacobian product of the matrix inverse. `b` is the inverse linear
/// block `[b00, b01, b10, b11]`, `t` the original translation and `g` the
/// upstream gradient on the flattened inverse matrix.
pub(crate) fn inverse_vjp(b: [f64; 4], t: [f64; 2], g: [f64; 6]) -> [f64; 6] {
    let (gc0, gc1) = (g[2], g[5]);
    // gradient w.r.t. the inverse linear block, including the path through
    // the translation column c = -B t
    let gb = [g[0] - gc0 * t[0], g[1] - gc0 * t[1], g[3] - gc1 * t[0], g[4] - gc1 * t[1]];
    let gt0 = -(b[0] * gc0 + b[2] * gc1);
    let gt1 = -(b[1] * gc0 + b[3] * gc1);
    // dA = -B^T gB B^T
    let m00 = b[0] * gb[0] + b[2] * gb[2];
    let m01 = b[0] * gb[1] + b[2] * gb[3];
    let m10 = b[1] * gb[0] + b[3] * gb[2];
    let m11 = b[1] * gb[1] + b[3] * gb[3];
    let a00 = -(m00 * b[0] + m01 * b[1]);
    let a01 = -(m00 * b[2] + m01 * b[3]);
    let a10 = -(m10 * b[0] + m11 * b[1]);
    let a11 = -(m10 * b[2] + m11 * b[3]);
    [a00, a01, gt0, a10, a11, gt1]
}

/// Per-output-pixel input coordinates `(h, w, 2)`, last axis `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid<T> {
    pub height: usize,
    pub width: usize,
    pub coords: Tensor<T>,
}

impl<T: Scalar> SamplingGrid<T> {
    pub fn coord(&self, i: usize, j: usize) -> (T, T) {
        (self.coords.at(&[i, j, 0]), self.coords.at(&[i, j, 1]))
    }
}

pub fn grid_generate<T: Scalar>(alpha: &AffineParams, height: usize, width: usize) -> SamplingGrid<T> {
    let theta = alpha.to_tensor::<T>();
    let data = kernels::affine_grid(theta.data(), 1, height, width);
    SamplingGrid { height, width, coords: Tensor::new(&[height, width, 2], data).unwrap() }
}

/// Resamples every image of an `(n, c, h, w)` batch through the same grid.
pub fn bilinear_sample<T: Scalar>(image: &Tensor<T>, grid: &SamplingGrid<T>) -> Result<Tensor<T>> {
    expect_rank(image, "bilinear_sample", 4)?;
    let s = image.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let per_image = grid.coords.data();
    let mut full = Vec::with_capacity(n * per_image.len());
    for _ in 0..n {
        full.extend_from_slice(per_image);
    }
    let out = kernels::grid_sample(image.data(), &full, n, c, h, w, grid.height, grid.width);
    Tensor::new(&[n, c, grid.height, grid.width], out)
}

/// `bilinear_sample(image, grid_generate(alpha, h, w))`.
pub fn warp<T: Scalar>(image: &Tensor<T>, alpha: &AffineParams) -> Result<Tensor<T>> {
    expect_rank(image, "warp", 4)?;
    let (h, w) = (image.shape()[2], image.shape()[3]);
    bilinear_sample(image, &grid_generate(alpha, h, w))
}

/// Warps image `i` of the batch with `alphas[i]`.
pub fn warp_each<T: Scalar>(image: &Tensor<T>, alphas: &[AffineParams]) -> Result<Tensor<T>> {
    expect_rank(image, "warp_each", 4)?;
    let s = image.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if alphas.len() != n {
        return Err(Error::ShapeMismatch { op: "warp_each", dim: "batch", expected: n, got: alphas.len() });
    }
    let theta: Vec<T> = alphas.iter().flat_map(|a| a.to_matrix().into_iter().flatten()).map(T::lit).collect();
    let grid = kernels::affine_grid(&theta, n, h, w);
    Tensor::new(s, kernels::grid_sample(image.data(), &grid, n, c, h, w, h, w))
}

/// Stacks per-sample parameters of one mode into an `(n, p)` tensor.
pub fn params_tensor<T: Scalar>(alphas: &[AffineParams]) -> Result<Tensor<T>> {
    let mode = alphas.first().map_or(AffineMode::Full6, |a| a.mode());
    let mut data = Vec::with_capacity(alphas.len() * mode.n_params());
    for a in alphas {
        if a.mode() != mode {
            return Err(Error::Config(alloc::format!("mixed affine modes {:?} and {:?}", mode, a.mode())));
        }
        data.extend(a.to_vec().into_iter().map(T::lit));
    }
    Tensor::new(&[alphas.len(), mode.n_params()], data)
}

/// Differentiable warp of an `(n, c, h, w)` image variable by per-sample
/// matrices `theta (n, 2, 3)`.
pub fn warp_var<T: Scalar>(g: &mut Graph<T>, image: Var, theta: Var) -> Result<Var> {
    let s = g.shape(image).to_vec();
    if s.len() != 4 {
        return Err(Error::Rank { op: "warp", expected: 4, got: s });
    }
    let grid = g.affine_grid(theta, s[2], s[3])?;
    g.grid_sample(image, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::FRAC_PI_2;

    fn close(a: [[f64; 3]; 2], b: [[f64; 3]; 2], tol: f64) -> bool {
        a.iter().flatten().zip(b.iter().flatten()).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn rotated_by_left_multiplies() {
        let r = AffineParams::rotation(0.7).to_matrix();
        for a in [
            AffineParams::rotation(-1.1),
            AffineParams::RotScaleShearTranslate { theta: 0.3, log_scale: -0.2, shear: 0.4, tx: 0.1, ty: -0.3 },
            AffineParams::Full6([1.1, 0.2, 0.05, -0.3, 0.9, 0.1]),
        ] {
            let m = a.to_matrix();
            let mut want = [[0.0; 3]; 2];
            for i in 0..2 {
                for j in 0..3 {
                    want[i][j] = r[i][0] * m[0][j] + r[i][1] * m[1][j];
                }
            }
            let got = a.rotated_by(0.7);
            assert_eq!(got.mode(), a.mode());
            assert!(close(got.to_matrix(), want, 1e-12));
        }
    }

    #[test]
    fn rotation_matrices() {
        assert_eq!(AffineParams::rotation(0.0).to_matrix(), [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        assert!(close(
            AffineParams::rotation(FRAC_PI_2).to_matrix(),
            [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0]],
            1e-15
        ));
    }

    #[test]
    fn log_scale_doubles() {
        let a = AffineParams::RotScaleShearTranslate { theta: 0.0, log_scale: 2f64.ln(), shear: 0.0, tx: 0.0, ty: 0.0 };
        assert!(close(a.to_matrix(), [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0]], 1e-15));
    }

    #[test]
    fn composition_order_is_rotate_shear_scale() {
        let (th, s, psi) = (0.3, -0.2, 0.4);
        let a = AffineParams::RotScaleShearTranslate { theta: th, log_scale: s, shear: psi, tx: 0.1, ty: -0.2 };
        let r = [[th.cos(), -th.sin()], [th.sin(), th.cos()]];
        let sh = [[1.0, psi.tan()], [0.0, 1.0]];
        let e = s.exp();
        let mut l = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                l[i][j] = e * (r[i][0] * sh[0][j] + r[i][1] * sh[1][j]);
            }
        }
        assert!(close(a.to_matrix(), [[l[0][0], l[0][1], 0.1], [l[1][0], l[1][1], -0.2]], 1e-14));
    }

    #[test]
    fn inverse_of_rotation_is_negative_rotation() {
        let inv = AffineParams::rotation(0.7).inverse().unwrap();
        assert!(close(inv.to_matrix(), AffineParams::rotation(-0.7).to_matrix(), 1e-14));
        assert_eq!(
            AffineParams::identity(AffineMode::Full6).inverse().unwrap(),
            AffineParams::identity(AffineMode::Full6)
        );
    }

    #[test]
    fn singular_is_rejected() {
        let a = AffineParams::Full6([1.0, 2.0, 0.0, 2.0, 4.0, 0.0]);
        assert!(matches!(a.inverse(), Err(Error::SingularTransform(_))));
    }

    #[test]
    fn grid_examples() {
        let id = grid_generate::<f64>(&AffineParams::identity(AffineMode::RotationOnly), 4, 5);
        for i in 0..4 {
            for j in 0..5 {
                assert_eq!(id.coord(i, j), (kernels::pixel_center(j, 5), kernels::pixel_center(i, 4)));
            }
        }
        let shift = grid_generate::<f64>(&AffineParams::Full6([1.0, 0.0, 0.5, 0.0, 1.0, 0.0]), 4, 4);
        for i in 0..4 {
            for j in 0..4 {
                let (x, y) = shift.coord(i, j);
                let (x0, y0): (f64, f64) = (kernels::pixel_center(j, 4), kernels::pixel_center(i, 4));
                assert_eq!((x, y), (x0 + 0.5, y0));
            }
        }
        // a quarter turn sends the point (1, 0) to (0, 1)
        let m = AffineParams::rotation(FRAC_PI_2).to_matrix();
        let (x, y) = (m[0][0] * 1.0 + m[0][2], m[1][0] * 1.0 + m[1][2]);
        assert!(x.abs() < 1e-15 && (y - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bilinear_center_and_padding() {
        let img = Tensor::<f64>::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let center = SamplingGrid { height: 1, width: 1, coords: Tensor::new(&[1, 1, 2], vec![0.0, 0.0]).unwrap() };
        assert_eq!(bilinear_sample(&img, &center).unwrap().data(), &[1.5]);
        let outside = SamplingGrid { height: 1, width: 1, coords: Tensor::new(&[1, 1, 2], vec![-2.0, -2.0]).unwrap() };
        assert_eq!(bilinear_sample(&img, &outside).unwrap().data(), &[0.0]);
    }

    #[test]
    fn angle_helpers() {
        assert!((angle_distance(0.1, TAU - 0.1) - 0.2).abs() < 1e-12);
        assert!((wrap_angle(-FRAC_PI_2) - 1.5 * PI).abs() < 1e-12);
    }
}
