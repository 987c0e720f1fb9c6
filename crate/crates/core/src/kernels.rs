//! Slice-level forward/backward kernels shared by the autodiff graph and the
//! value-level convenience functions.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{gemm, MatRef, Scalar};

/// Geometry of a 2-D cross-correlation from a `(n, c, h, w)` image to a
/// `(n, k, oh, ow)` response. Transposed convolutions reuse it with the roles
/// of the two images swapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.n * self.oh * self.ow
    }

    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Output extent of a convolution, `None` when the kernel does not fit.
    pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = input + 2 * pad;
        if kernel > padded || stride == 0 {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }
}

/// Output positions `o` in `[lo, hi)` whose input `o*stride + k - pad` lies
/// inside `0..size`.
fn valid_range(out: usize, size: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if size + pad > k { (size + pad - k).div_ceil(stride).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Per-image patch matrix `(c*kh*kw, oh*ow)`:
/// `cols[(c, ky, kx), (oy, ox)] = img[c, oy*s - p + ky, ox*s - p + kx]`.
pub fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane_len = g.h * g.w;
    let ohw = g.oh * g.ow;
    let mut r = 0;
    for c in 0..g.c {
        let plane = &img[c * plane_len..(c + 1) * plane_len];
        for ky in 0..g.kh {
            let (ylo, yhi) = valid_range(g.oh, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (xlo, xhi) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                let dst = &mut cols[r * ohw..(r + 1) * ohw];
                dst[..ylo * g.ow].fill(T::zero());
                dst[yhi * g.ow..].fill(T::zero());
                for oy in ylo..yhi {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    line[..xlo].fill(T::zero());
                    line[xhi..].fill(T::zero());
                    if xlo == xhi {
                        continue;
                    }
                    let (iy, len) = (oy * g.stride + ky - g.pad, xhi - xlo);
                    let start = iy * g.w + xlo * g.stride + kx - g.pad;
                    let src = &plane[start..start + (len - 1) * g.stride + 1];
                    let line = &mut line[xlo..xhi];
                    if g.stride == 1 {
                        line.copy_from_slice(src);
                    } else {
                        for (j, d) in line.iter_mut().enumerate() {
                            *d = src[j * g.stride];
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds a patch matrix back into one image.
pub fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let plane_len = g.h * g.w;
    let ohw = g.oh * g.ow;
    let mut r = 0;
    for c in 0..g.c {
        let plane = &mut img[c * plane_len..(c + 1) * plane_len];
        for ky in 0..g.kh {
            let (ylo, yhi) = valid_range(g.oh, g.h, ky, g.stride, g.pad);
            for kx in 0..g.kw {
                let (xlo, xhi) = valid_range(g.ow, g.w, kx, g.stride, g.pad);
                let src = &cols[r * ohw..(r + 1) * ohw];
                r += 1;
                if xlo == xhi {
                    continue;
                }
                for oy in ylo..yhi {
                    let (iy, len) = (oy * g.stride + ky - g.pad, xhi - xlo);
                    let start = iy * g.w + xlo * g.stride + kx - g.pad;
                    let dst = &mut plane[start..start + (len - 1) * g.stride + 1];
                    for (j, &v) in src[oy * g.ow + xlo..oy * g.ow + xhi].iter().enumerate() {
                        dst[j * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// Per-channel sums of an NCHW buffer.
pub fn channel_sums<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut s = vec![T::zero(); c];
    for b in 0..n {
        for (ch, acc) in s.iter_mut().enumerate() {
            for &v in &x[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                *acc += v;
            }
        }
    }
    s
}

/// Cross-correlation forward, one GEMM per image so the patch matrix stays
/// cache-resident.
pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let (in_len, ohw, patch) = (g.c * g.h * g.w, g.oh * g.ow, g.patch());
    let mut out = vec![T::zero(); g.n * g.k * ohw];
    let mut cols = vec![T::zero(); patch * ohw];
    for (img, dst) in x.chunks(in_len).zip(out.chunks_mut(g.k * ohw)) {
        im2col(img, g, &mut cols);
        for (ch, &bv) in bias.iter().enumerate() {
            dst[ch * ohw..(ch + 1) * ohw].fill(bv);
        }
        gemm(MatRef::row_major(weight, g.k, patch), MatRef::row_major(&cols, patch, ohw), T::one(), dst);
    }
    out
}

/// Gradients of [`conv2d_forward`]. Each output is only computed when asked
/// for; patches are rebuilt from `x` rather than stored.
pub fn conv2d_backward<T: Scalar>(
    dout: &[T],
    x: &[T],
    weight: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (in_len, ohw, patch) = (g.c * g.h * g.w, g.oh * g.ow, g.patch());
    if let Some(db) = db {
        for (acc, s) in db.iter_mut().zip(channel_sums(dout, g.n, g.k, ohw)) {
            *acc += s;
        }
    }
    let mut cols = vec![T::zero(); patch * ohw];
    for b in 0..g.n {
        let go = &dout[b * g.k * ohw..(b + 1) * g.k * ohw];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
            gemm(MatRef::row_major(go, g.k, ohw), MatRef::row_major_t(&cols, patch, ohw), T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(MatRef::row_major_t(weight, g.k, patch), MatRef::row_major(go, g.k, ohw), T::zero(), &mut cols);
            col2im_add(&cols, g, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
}

/// Transposed convolution. `g` describes the equivalent forward convolution
/// from the (large) output image to the (small) input image; `weight` has
/// layout `(g.k, g.c, kh, kw)`, i.e. `(in_channels, out_channels, kh, kw)`.
pub fn conv_transpose2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], g: &ConvGeom) -> Vec<T> {
    let (small, big_hw, patch) = (g.oh * g.ow, g.h * g.w, g.patch());
    let mut out = vec![T::zero(); g.n * g.c * big_hw];
    let mut cols = vec![T::zero(); patch * small];
    for (xi, dst) in x.chunks(g.k * small).zip(out.chunks_mut(g.c * big_hw)) {
        for (ch, &bv) in bias.iter().enumerate() {
            dst[ch * big_hw..(ch + 1) * big_hw].fill(bv);
        }
        gemm(MatRef::row_major_t(weight, g.k, patch), MatRef::row_major(xi, g.k, small), T::zero(), &mut cols);
        col2im_add(&cols, g, dst);
    }
    out
}

pub fn conv_transpose2d_backward<T: Scalar>(
    dout: &[T],
    x: &[T],
    weight: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (small, big_hw, patch) = (g.oh * g.ow, g.h * g.w, g.patch());
    if let Some(db) = db {
        for (acc, s) in db.iter_mut().zip(channel_sums(dout, g.n, g.c, big_hw)) {
            *acc += s;
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    let mut cols = vec![T::zero(); patch * small];
    for b in 0..g.n {
        im2col(&dout[b * g.c * big_hw..(b + 1) * g.c * big_hw], g, &mut cols);
        let xs = b * g.k * small..(b + 1) * g.k * small;
        if let Some(dw) = dw.as_deref_mut() {
            gemm(MatRef::row_major(&x[xs.clone()], g.k, small), MatRef::row_major_t(&cols, patch, small), T::one(), dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            gemm(MatRef::row_major(weight, g.k, patch), MatRef::row_major(&cols, patch, small), T::one(), &mut dx[xs]);
        }
    }
}

/// Normalized coordinate of pixel center `i` on an axis of `len` pixels,
/// `(2i + 1) / len - 1`.
#[inline]
pub fn pixel_center<T: Scalar>(i: usize, len: usize) -> T {
    T::lit((2 * i + 1) as f64 / len as f64 - 1.0)
}

/// Sampling grid `(n, h, w, 2)` for a batch of `(n, 2, 3)` matrices. The last
/// axis holds `(x, y)` with `x` running along the width.
pub fn affine_grid<T: Scalar>(theta: &[T], n: usize, h: usize, w: usize) -> Vec<T> {
    let mut grid = vec![T::zero(); n * h * w * 2];
    for b in 0..n {
        let t = &theta[b * 6..b * 6 + 6];
        for i in 0..h {
            let y: T = pixel_center(i, h);
            for j in 0..w {
                let x: T = pixel_center(j, w);
                let o = ((b * h + i) * w + j) * 2;
                grid[o] = t[0] * x + t[1] * y + t[2];
                grid[o + 1] = t[3] * x + t[4] * y + t[5];
            }
        }
    }
    grid
}

pub fn affine_grid_backward<T: Scalar>(dgrid: &[T], n: usize, h: usize, w: usize, dtheta: &mut [T]) {
    for b in 0..n {
        let mut acc = [T::zero(); 6];
        for i in 0..h {
            let y: T = pixel_center(i, h);
            for j in 0..w {
                let x: T = pixel_center(j, w);
                let o = ((b * h + i) * w + j) * 2;
                let (gx, gy) = (dgrid[o], dgrid[o + 1]);
                acc[0] += gx * x;
                acc[1] += gx * y;
                acc[2] += gx;
                acc[3] += gy * x;
                acc[4] += gy * y;
                acc[5] += gy;
            }
        }
        for (d, a) in dtheta[b * 6..b * 6 + 6].iter_mut().zip(acc) {
            *d += a;
        }
    }
}

/// Maps a normalized coordinate to continuous pixel index space. Values
/// within rounding distance of an integer snap to it, so grids that land on
/// pixel centers up to rounding (identity, quarter turns) resample exactly.
/// Rounding in `g` is scaled up by `len / 2`, hence the tolerance.
#[inline]
fn unnormalize<T: Scalar>(g: T, len: usize) -> T {
    let half = T::lit(0.5);
    let n = T::lit(len as f64);
    let v = ((g + T::one()) * n - T::one()) * half;
    let r = v.round();
    let tol = T::epsilon() * T::lit(16.0) * (n + v.abs());
    if (v - r).abs() <= tol {
        r
    } else {
        v
    }
}

struct Taps<T> {
    x0: isize,
    y0: isize,
    wx1: T,
    wy1: T,
}

#[inline]
fn taps<T: Scalar>(gx: T, gy: T, h: usize, w: usize) -> Taps<T> {
    let ix = unnormalize(gx, w);
    let iy = unnormalize(gy, h);
    let fx = ix.floor();
    let fy = iy.floor();
    Taps {
        x0: fx.to_isize().unwrap_or(isize::MIN / 2),
        y0: fy.to_isize().unwrap_or(isize::MIN / 2),
        wx1: ix - fx,
        wy1: iy - fy,
    }
}

#[inline]
fn fetch<T: Scalar>(plane: &[T], x: isize, y: isize, h: usize, w: usize) -> T {
    if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
        plane[y as usize * w + x as usize]
    } else {
        T::zero()
    }
}

/// Bilinear sampling with zeros padding. `image` is `(n, c, h, w)`, `grid` is
/// `(n, oh, ow, 2)`; the result is `(n, c, oh, ow)`.
#[allow(clippy::too_many_arguments)]
pub fn grid_sample<T: Scalar>(image: &[T], grid: &[T], n: usize, c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * oh * ow];
    for b in 0..n {
        for p in 0..oh * ow {
            let o = (b * oh * ow + p) * 2;
            let t = taps(grid[o], grid[o + 1], h, w);
            let (wx0, wy0) = (T::one() - t.wx1, T::one() - t.wy1);
            for ch in 0..c {
                let plane = &image[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                let v00 = fetch(plane, t.x0, t.y0, h, w);
                let v01 = fetch(plane, t.x0 + 1, t.y0, h, w);
                let v10 = fetch(plane, t.x0, t.y0 + 1, h, w);
                let v11 = fetch(plane, t.x0 + 1, t.y0 + 1, h, w);
                out[(b * c + ch) * oh * ow + p] =
                    wy0 * (wx0 * v00 + t.wx1 * v01) + t.wy1 * (wx0 * v10 + t.wx1 * v11);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn grid_sample_backward<T: Scalar>(
    dout: &[T],
    image: &[T],
    grid: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    mut dimage: Option<&mut [T]>,
    mut dgrid: Option<&mut [T]>,
) {
    let sx = T::lit(w as f64 * 0.5);
    let sy = T::lit(h as f64 * 0.5);
    for b in 0..n {
        for p in 0..oh * ow {
            let o = (b * oh * ow + p) * 2;
            let t = taps(grid[o], grid[o + 1], h, w);
            let (wx0, wy0) = (T::one() - t.wx1, T::one() - t.wy1);
            let mut gix = T::zero();
            let mut giy = T::zero();
            for ch in 0..c {
                let go = dout[(b * c + ch) * oh * ow + p];
                let base = (b * c + ch) * h * w;
                if let Some(di) = dimage.as_deref_mut() {
                    let plane = &mut di[base..base + h * w];
                    let mut put = |x: isize, y: isize, v: T| {
                        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                            plane[y as usize * w + x as usize] += v;
                        }
                    };
                    put(t.x0, t.y0, go * wx0 * wy0);
                    put(t.x0 + 1, t.y0, go * t.wx1 * wy0);
                    put(t.x0, t.y0 + 1, go * wx0 * t.wy1);
                    put(t.x0 + 1, t.y0 + 1, go * t.wx1 * t.wy1);
                }
                if dgrid.is_some() {
                    let plane = &image[base..base + h * w];
                    let v00 = fetch(plane, t.x0, t.y0, h, w);
                    let v01 = fetch(plane, t.x0 + 1, t.y0, h, w);
                    let v10 = fetch(plane, t.x0, t.y0 + 1, h, w);
                    let v11 = fetch(plane, t.x0 + 1, t.y0 + 1, h, w);
                    gix += go * (wy0 * (v01 - v00) + t.wy1 * (v11 - v10));
                    giy += go * (wx0 * (v10 - v00) + t.wx1 * (v11 - v01));
                }
            }
            if let Some(dg) = dgrid.as_deref_mut() {
                dg[o] += gix * sx;
                dg[o + 1] += giy * sy;
            }
        }
    }
}
