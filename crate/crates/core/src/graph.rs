//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation executed on it together with the
//! values it produced. [`Graph::backward`] walks the record once in reverse
//! and returns the gradient of a scalar loss with respect to every node that
//! (transitively) depends on a leaf created with `requires_grad`. Graphs are
//! cheap and meant to be thrown away after each forward/backward pair.

use alloc::vec;
use alloc::vec::Vec;

use crate::affine::{self, AffineMode};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{expect_dim, expect_rank, gemm, MatRef, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    LnClamped(Var, T),
    Sigmoid(Var),
    Elu(Var),
    Sum(Var),
    Mean(Var),
    SumPerSample(Var),
    Reshape(Var),
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    BatchNormTrain { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    AffineMatrix { params: Var, mode: AffineMode },
    AffineInverse(Var),
    AffineGrid { theta: Var },
    GridSample { image: Var, grid: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (zeros if it received none) into `target`.
    pub fn accumulate_into(&self, v: Var, target: &mut Tensor<T>) {
        match self.get(v) {
            Some(g) => target.accumulate_grad(g),
            None => target.accumulate_grad(&vec![T::zero(); target.numel()]),
        }
    }
}

/// Batch statistics produced by a training-mode batch norm, used to update
/// the running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf whose gradient is tracked iff `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t.with_requires_grad(false), Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Leaf copied from an existing tensor.
    pub fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        let mut value = Tensor::new(t.shape(), t.data().to_vec()).expect("consistent tensor");
        value.set_requires_grad(false);
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Rank { op, expected: sa.len(), got: sb.to_vec() });
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(&shape, data).unwrap(), op, rg)
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let shape = va.shape().to_vec();
        let rg = self.rg(a);
        self.push(Tensor::new(&shape, data).unwrap(), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.map(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, |x| x.ln(), Op::Ln(a))
    }

    /// `max(ln x, floor)`; the gradient is zero where the floor is active.
    pub fn ln_clamped(&mut self, a: Var, floor: T) -> Var {
        self.map(a, |x| x.ln().max(floor), Op::LnClamped(a, floor))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        self.map(a, elu, Op::Elu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / T::lit(v.numel() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sums all axes but the leading one: `(n, ...) -> (n)`.
    pub fn sum_per_sample(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rank() == 0 {
            return Err(Error::Rank { op: "sum_per_sample", expected: 1, got: Vec::new() });
        }
        let n = v.shape()[0];
        let inner = v.numel() / n.max(1);
        let data = (0..n)
            .map(|i| v.data()[i * inner..(i + 1) * inner].iter().fold(T::zero(), |a, &b| a + b))
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[n], data)?, Op::SumPerSample(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// `x (n, in) -> x w^T + b` with `w (out, in)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        expect_rank(vx, "linear", 2)?;
        expect_rank(vw, "linear", 2)?;
        let (n, fin) = (vx.shape()[0], vx.shape()[1]);
        let fout = vw.shape()[0];
        expect_dim("linear", "in_features", vw.shape()[1], fin)?;
        expect_dim("linear", "bias", fout, vb.numel())?;
        let mut out = vec![T::zero(); n * fout];
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(vb.data());
        }
        gemm(MatRef::row_major(vx.data(), n, fin), MatRef::row_major_t(vw.data(), fout, fin), T::one(), &mut out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(&[n, fout], out)?, Op::Linear { x, w, b }, rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        expect_rank(vx, "conv2d", 4)?;
        expect_rank(vw, "conv2d", 4)?;
        let (n, c, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (k, wc, kh, kw) = (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]);
        expect_dim("conv2d", "channels", wc, c)?;
        expect_dim("conv2d", "bias", k, vb.numel())?;
        let oh = ConvGeom::out_extent(h, kh, stride, pad)
            .ok_or(Error::ShapeMismatch { op: "conv2d", dim: "kernel height", expected: h + 2 * pad, got: kh })?;
        let ow = ConvGeom::out_extent(wd, kw, stride, pad)
            .ok_or(Error::ShapeMismatch { op: "conv2d", dim: "kernel width", expected: wd + 2 * pad, got: kw })?;
        let geom = ConvGeom { n, c, h, w: wd, k, kh, kw, stride, pad, oh, ow };
        let out = kernels::conv2d_forward(vx.data(), vw.data(), vb.data(), &geom);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(&[n, k, oh, ow], out)?, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Transposed convolution with weight `(in_channels, out_channels, kh, kw)`.
    /// Output extent is `(in - 1) * stride - 2 * pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        expect_rank(vx, "conv_transpose2d", 4)?;
        expect_rank(vw, "conv_transpose2d", 4)?;
        let (n, cin, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (wcin, cout, kh, kw) = (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]);
        expect_dim("conv_transpose2d", "channels", wcin, cin)?;
        expect_dim("conv_transpose2d", "bias", cout, vb.numel())?;
        let big_h = ((h - 1) * stride + kh)
            .checked_sub(2 * pad)
            .ok_or(Error::ShapeMismatch { op: "conv_transpose2d", dim: "padding", expected: kh, got: pad })?;
        let big_w = ((wd - 1) * stride + kw)
            .checked_sub(2 * pad)
            .ok_or(Error::ShapeMismatch { op: "conv_transpose2d", dim: "padding", expected: kw, got: pad })?;
        let geom = ConvGeom { n, c: cout, h: big_h, w: big_w, k: cin, kh, kw, stride, pad, oh: h, ow: wd };
        let out = kernels::conv_transpose2d_forward(vx.data(), vw.data(), vb.data(), &geom);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::new(&[n, cout, big_h, big_w], out)?, Op::ConvTranspose2d { x, w, b, geom }, rg))
    }

    /// Training-mode batch norm over `(n, c, h, w)`: normalizes with the batch
    /// mean and biased variance, and reports the statistics for running
    /// estimate updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let vx = self.value(x);
        expect_rank(vx, "batch_norm", 4)?;
        let (n, c, hw) = (vx.shape()[0], vx.shape()[1], vx.shape()[2] * vx.shape()[3]);
        expect_dim("batch_norm", "gamma", c, self.value(gamma).numel())?;
        expect_dim("batch_norm", "beta", c, self.value(beta).numel())?;
        let m = n * hw;
        if m < 2 {
            return Err(Error::BatchStatistics(m));
        }
        let mf = T::lit(m as f64);
        let mean: Vec<T> = kernels::channel_sums(vx.data(), n, c, hw).into_iter().map(|s| s / mf).collect();
        let mut var = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                for &v in &vx.data()[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    let d = v - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
        let biased: Vec<T> = var.iter().map(|&s| s / mf).collect();
        let unbiased: Vec<T> = var.iter().map(|&s| s / T::lit((m - 1) as f64)).collect();
        let inv_std: Vec<T> = biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xhat, out) = self.normalize(x, gamma, beta, &mean, &inv_std);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(Tensor::new(&shape, out)?, Op::BatchNormTrain { x, gamma, beta, xhat, inv_std }, rg);
        Ok((v, BatchStats { mean, var_unbiased: unbiased }))
    }

    /// Inference-mode batch norm using fixed running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, running_mean: &[T], running_var: &[T], eps: T) -> Result<Var> {
        let vx = self.value(x);
        expect_rank(vx, "batch_norm", 4)?;
        let c = vx.shape()[1];
        expect_dim("batch_norm", "gamma", c, self.value(gamma).numel())?;
        expect_dim("batch_norm", "running_mean", c, running_mean.len())?;
        expect_dim("batch_norm", "running_var", c, running_var.len())?;
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xhat, out) = self.normalize(x, gamma, beta, running_mean, &inv_std);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(Tensor::new(&shape, out)?, Op::BatchNormEval { x, gamma, beta, xhat, inv_std }, rg))
    }

    fn normalize(&self, x: Var, gamma: Var, beta: Var, mean: &[T], inv_std: &[T]) -> (Vec<T>, Vec<T>) {
        let vx = self.value(x);
        let (n, c, hw) = (vx.shape()[0], vx.shape()[1], vx.shape()[2] * vx.shape()[3]);
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut out = vec![T::zero(); vx.numel()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for ((xh, o), &v) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&vx.data()[r]) {
                    *xh = (v - mean[ch]) * inv_std[ch];
                    *o = *xh * g[ch] + bt[ch];
                }
            }
        }
        (xhat, out)
    }

    /// `(n, p)` parameter rows to `(n, 2, 3)` matrices.
    pub fn affine_matrix(&mut self, params: Var, mode: AffineMode) -> Result<Var> {
        let vp = self.value(params);
        expect_rank(vp, "affine_matrix", 2)?;
        expect_dim("affine_matrix", "parameter count", mode.n_params(), vp.shape()[1])?;
        let n = vp.shape()[0];
        let mut out = Vec::with_capacity(n * 6);
        for row in vp.data().chunks(mode.n_params()) {
            let row64: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            let m = affine::matrix_from_slice(mode, &row64);
            out.extend(m.iter().flatten().map(|&v| T::lit(v)));
        }
        let rg = self.rg(params);
        Ok(self.push(Tensor::new(&[n, 2, 3], out)?, Op::AffineMatrix { params, mode }, rg))
    }

    /// Inverse of each `(2, 3)` affine matrix as a homogeneous map.
    pub fn affine_inverse(&mut self, theta: Var) -> Result<Var> {
        let vt = self.value(theta);
        expect_rank(vt, "affine_inverse", 3)?;
        let n = vt.shape()[0];
        let mut out = Vec::with_capacity(n * 6);
        for m in vt.data().chunks(6) {
            let inv = affine::invert_rows(&[
                [m[0].as_f64(), m[1].as_f64(), m[2].as_f64()],
                [m[3].as_f64(), m[4].as_f64(), m[5].as_f64()],
            ])?;
            out.extend(inv.iter().flatten().map(|&v| T::lit(v)));
        }
        let rg = self.rg(theta);
        Ok(self.push(Tensor::new(&[n, 2, 3], out)?, Op::AffineInverse(theta), rg))
    }

    pub fn affine_grid(&mut self, theta: Var, h: usize, w: usize) -> Result<Var> {
        let vt = self.value(theta);
        expect_rank(vt, "affine_grid", 3)?;
        let n = vt.shape()[0];
        let grid = kernels::affine_grid(vt.data(), n, h, w);
        let rg = self.rg(theta);
        Ok(self.push(Tensor::new(&[n, h, w, 2], grid)?, Op::AffineGrid { theta }, rg))
    }

    pub fn grid_sample(&mut self, image: Var, grid: Var) -> Result<Var> {
        let (vi, vg) = (self.value(image), self.value(grid));
        expect_rank(vi, "grid_sample", 4)?;
        expect_rank(vg, "grid_sample", 4)?;
        let (n, c, h, w) = (vi.shape()[0], vi.shape()[1], vi.shape()[2], vi.shape()[3]);
        expect_dim("grid_sample", "batch", n, vg.shape()[0])?;
        expect_dim("grid_sample", "coordinate", 2, vg.shape()[3])?;
        let (oh, ow) = (vg.shape()[1], vg.shape()[2]);
        let out = kernels::grid_sample(vi.data(), vg.data(), n, c, h, w, oh, ow);
        let rg = self.rg(image) || self.rg(grid);
        Ok(self.push(Tensor::new(&[n, c, oh, ow], out)?, Op::GridSample { image, grid }, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.rg(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.value(v).numel()]);
            f(slot);
        };
        let val = |v: Var| self.value(v).data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| d.iter_mut().zip(g).zip(vb).for_each(|((d, &g), &y)| *d += g * y));
                acc(*b, &mut |d| d.iter_mut().zip(g).zip(va).for_each(|((d, &g), &x)| *d += g * x));
            }
            Op::Scale(a, c) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *c)),
            Op::AddScalar(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &mut |d| d.iter_mut().zip(g).zip(y).for_each(|((d, &g), &y)| *d += g * y));
            }
            Op::Ln(a) => {
                let x = val(*a);
                acc(*a, &mut |d| d.iter_mut().zip(g).zip(x).for_each(|((d, &g), &x)| *d += g / x));
            }
            Op::LnClamped(a, floor) => {
                let x = val(*a);
                let y = node.value.data();
                acc(*a, &mut |d| {
                    for (((d, &g), &x), &y) in d.iter_mut().zip(g).zip(x).zip(y) {
                        if y > *floor {
                            *d += g / x;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, &mut |d| d.iter_mut().zip(g).zip(y).for_each(|((d, &g), &y)| *d += g * y * (T::one() - y)));
            }
            Op::Elu(a) => {
                let x = val(*a);
                let y = node.value.data();
                acc(*a, &mut |d| {
                    for (((d, &g), &x), &y) in d.iter_mut().zip(g).zip(x).zip(y) {
                        *d += if x > T::zero() { g } else { g * (y + T::one()) };
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let s = g[0] / T::lit(val(*a).len() as f64);
                acc(*a, &mut |d| d.iter_mut().for_each(|d| *d += s));
            }
            Op::SumPerSample(a) => {
                let inner = val(*a).len() / g.len().max(1);
                acc(*a, &mut |d| {
                    for (chunk, &gi) in d.chunks_mut(inner).zip(g) {
                        chunk.iter_mut().for_each(|d| *d += gi);
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, fin) = (vx.shape()[0], vx.shape()[1]);
                let fout = vw.shape()[0];
                acc(*x, &mut |d| gemm(MatRef::row_major(g, n, fout), MatRef::row_major(vw.data(), fout, fin), T::one(), d));
                acc(*w, &mut |d| gemm(MatRef::row_major_t(g, n, fout), MatRef::row_major(vx.data(), n, fin), T::one(), d));
                acc(*b, &mut |d| {
                    for row in g.chunks(fout) {
                        add_into(d, row);
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let (vx, vw) = (val(*x), val(*w));
                let mut dx = self.rg(*x).then(|| vec![T::zero(); vx.len()]);
                let mut dw = self.rg(*w).then(|| vec![T::zero(); vw.len()]);
                let mut db = self.rg(*b).then(|| vec![T::zero(); geom.k]);
                kernels::conv2d_backward(g, vx, vw, geom, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                for (v, buf) in [(*x, dx), (*w, dw), (*b, db)] {
                    if let Some(buf) = buf {
                        acc(v, &mut |d| add_into(d, &buf));
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (vx, vw) = (val(*x), val(*w));
                let mut dx = self.rg(*x).then(|| vec![T::zero(); vx.len()]);
                let mut dw = self.rg(*w).then(|| vec![T::zero(); vw.len()]);
                let mut db = self.rg(*b).then(|| vec![T::zero(); geom.c]);
                kernels::conv_transpose2d_backward(g, vx, vw, geom, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                for (v, buf) in [(*x, dx), (*w, dw), (*b, db)] {
                    if let Some(buf) = buf {
                        acc(v, &mut |d| add_into(d, &buf));
                    }
                }
            }
            Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } | Op::BatchNormEval { x, gamma, beta, xhat, inv_std } => {
                let train = matches!(node.op, Op::BatchNormTrain { .. });
                let shape = node.value.shape();
                let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                let gam = val(*gamma);
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for bi in 0..n {
                    for ch in 0..c {
                        let r = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
                        for (&gv, &xh) in g[r.clone()].iter().zip(&xhat[r]) {
                            sum_g[ch] += gv;
                            sum_gx[ch] += gv * xh;
                        }
                    }
                }
                acc(*gamma, &mut |d| add_into(d, &sum_gx));
                acc(*beta, &mut |d| add_into(d, &sum_g));
                let m = T::lit((n * hw) as f64);
                acc(*x, &mut |d| {
                    for bi in 0..n {
                        for ch in 0..c {
                            let k = gam[ch] * inv_std[ch];
                            let r = (bi * c + ch) * hw..(bi * c + ch + 1) * hw;
                            for ((d, &gv), &xh) in d[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xhat[r]) {
                                *d += if train {
                                    k * (gv - sum_g[ch] / m - xh * sum_gx[ch] / m)
                                } else {
                                    k * gv
                                };
                            }
                        }
                    }
                });
            }
            Op::AffineMatrix { params, mode } => {
                let p = val(*params);
                let np = mode.n_params();
                acc(*params, &mut |d| {
                    for (i, row) in p.chunks(np).enumerate() {
                        let row64: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                        let jac = affine::matrix_jacobian(*mode, &row64);
                        for (j, col) in jac.iter().enumerate() {
                            let s = col.iter().zip(&g[i * 6..i * 6 + 6]).fold(0.0, |a, (&jv, gv)| a + jv * gv.as_f64());
                            d[i * np + j] += T::lit(s);
                        }
                    }
                });
            }
            Op::AffineInverse(theta) => {
                let inv = node.value.data();
                acc(*theta, &mut |d| {
                    for i in 0..g.len() / 6 {
                        let b = &inv[i * 6..i * 6 + 6];
                        let gi = &g[i * 6..i * 6 + 6];
                        let th = &val(*theta)[i * 6..i * 6 + 6];
                        let grad = affine::inverse_vjp(
                            [b[0].as_f64(), b[1].as_f64(), b[3].as_f64(), b[4].as_f64()],
                            [th[2].as_f64(), th[5].as_f64()],
                            [gi[0].as_f64(), gi[1].as_f64(), gi[2].as_f64(), gi[3].as_f64(), gi[4].as_f64(), gi[5].as_f64()],
                        );
                        for (dv, gv) in d[i * 6..i * 6 + 6].iter_mut().zip(grad) {
                            *dv += T::lit(gv);
                        }
                    }
                });
            }
            Op::AffineGrid { theta } => {
                let s = node.value.shape();
                let (n, h, w) = (s[0], s[1], s[2]);
                acc(*theta, &mut |d| kernels::affine_grid_backward(g, n, h, w, d));
            }
            Op::GridSample { image, grid } => {
                let (vi, vg) = (self.value(*image), self.value(*grid));
                let (n, c, h, w) = (vi.shape()[0], vi.shape()[1], vi.shape()[2], vi.shape()[3]);
                let (oh, ow) = (vg.shape()[1], vg.shape()[2]);
                let mut di = self.rg(*image).then(|| vec![T::zero(); vi.numel()]);
                let mut dg = self.rg(*grid).then(|| vec![T::zero(); vg.numel()]);
                kernels::grid_sample_backward(g, vi.data(), vg.data(), n, c, h, w, oh, ow, di.as_deref_mut(), dg.as_deref_mut());
                for (v, buf) in [(*image, di), (*grid, dg)] {
                    if let Some(buf) = buf {
                        acc(v, &mut |d| add_into(d, &buf));
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(d: &mut [T], g: &[T]) {
    d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn elu<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        x
    } else {
        x.exp() - T::one()
    }
}
