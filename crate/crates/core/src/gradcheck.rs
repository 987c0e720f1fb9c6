//! Reverse-mode gradients against central finite differences in f64.
//!
//! The error measure is the norm-wise relative error `|a - n| / max(|a|, |n|)`
//! over the probed coordinates of each input, which stays meaningful when
//! individual gradient entries are near zero. [`op_checks`] lists one random
//! instance generator per differentiable op.

use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::avae::avae_forward;
use crate::vae::{elbo_vars, Mode, VaeConfig, VaeModel};
use crate::{AffineMode, Graph, Tensor, Var};

/// Coordinates probed per input tensor.
pub const PROBES: usize = 24;
/// Finite-difference step.
pub const H: f64 = 1e-5;
/// Step for the affine parameters. Moving an affine parameter shifts all
/// sampling coordinates at once, so with a larger step some of them cross
/// pixel boundaries, where the bilinear sampler has kinks.
pub const HA: f64 = 1e-7;
/// Tolerance of ops that are smooth everywhere they are probed.
pub const SMOOTH: f64 = 1e-6;
/// Tolerance of ops with kinks (bilinear sampling and everything downstream).
pub const PIECEWISE: f64 = 1e-4;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - n| / max(|a|, |n|)`, or `|a - n|` when both vanish.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

fn probe_indices(numel: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if numel <= PROBES {
        (0..numel).collect()
    } else {
        (0..PROBES).map(|_| rng.random_range(0..numel)).collect()
    }
}

/// Worst relative error over all inputs of `sum(w * f(inputs))` for a random
/// fixed weighting `w`.
pub fn check(inputs: &[Tensor<f64>], rng: &mut ChaCha8Rng, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let build = |g: &mut Graph<f64>, ins: &[Tensor<f64>], grad: bool| -> (Vec<Var>, Var) {
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t, grad)).collect();
        let out = f(g, &vars);
        (vars, out)
    };
    let mut g = Graph::new();
    let (vars, out) = build(&mut g, inputs, true);
    let w = Tensor::randn(g.shape(out), rng);
    let loss = |g: &mut Graph<f64>, out: Var| {
        let wv = g.constant(w.clone());
        let p = g.mul(out, wv).expect("weights match the output");
        g.sum(p)
    };
    let l = loss(&mut g, out);
    let grads = g.backward(l).expect("scalar loss");
    let analytic: Vec<Vec<f64>> =
        (0..inputs.len()).map(|i| grads.get(vars[i]).map_or_else(|| alloc::vec![0.0; inputs[i].numel()], <[f64]>::to_vec)).collect();

    let value = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let (_, out) = build(&mut g, ins, false);
        let l = loss(&mut g, out);
        g.value(l).data()[0]
    };
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        let idx = probe_indices(inputs[i].numel(), rng);
        let mut numeric = Vec::with_capacity(idx.len());
        for &k in &idx {
            let mut ins = inputs.to_vec();
            ins[i].data_mut()[k] += H;
            let up = value(&ins);
            ins[i].data_mut()[k] -= 2.0 * H;
            let down = value(&ins);
            numeric.push((up - down) / (2.0 * H));
        }
        let a: Vec<f64> = idx.iter().map(|&k| analytic[i][k]).collect();
        worst = worst.max(rel_err(&a, &numeric));
    }
    worst
}

/// One differentiable op: a generator of random instances returning the
/// worst relative error of each.
#[derive(Clone, Copy)]
pub struct OpCheck {
    pub name: &'static str,
    pub tolerance: f64,
    pub instance: fn(&mut ChaCha8Rng) -> f64,
}

impl OpCheck {
    /// Worst error over `instances` seeded instances.
    pub fn worst(&self, instances: u64) -> f64 {
        let salt = self.name.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));
        (0..instances).map(|i| (self.instance)(&mut ChaCha8Rng::seed_from_u64(salt ^ i))).fold(0.0, f64::max)
    }
}

pub fn op_checks() -> Vec<OpCheck> {
    let op = |name, tolerance, instance| OpCheck { name, tolerance, instance };
    alloc::vec![
        op("conv2d", SMOOTH, conv2d),
        op("conv_transpose2d", SMOOTH, conv_transpose2d),
        op("linear", SMOOTH, linear),
        op("elu", SMOOTH, elu),
        op("sigmoid", SMOOTH, sigmoid),
        op("batch_norm_train", SMOOTH, batch_norm_train),
        op("batch_norm_eval", SMOOTH, batch_norm_eval),
        op("affine_matrix_rotation", SMOOTH, |r| affine_matrix(AffineMode::RotationOnly, r)),
        op("affine_matrix_rsst", SMOOTH, |r| affine_matrix(AffineMode::RotScaleShearTranslate, r)),
        op("affine_matrix_full6", SMOOTH, |r| affine_matrix(AffineMode::Full6, r)),
        op("affine_inverse", SMOOTH, affine_inverse),
        op("affine_grid", SMOOTH, affine_grid),
        op("grid_sample", PIECEWISE, grid_sample),
        op("elbo", SMOOTH, elbo),
        op("avae_pipeline", PIECEWISE, avae_pipeline),
    ]
}

fn conv2d(r: &mut ChaCha8Rng) -> f64 {
    let (n, c, k) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
    let (kh, stride, pad) = (r.random_range(2..5), r.random_range(1..3), r.random_range(0..2));
    let hw = r.random_range(kh..kh + 5);
    let ins = [uniform(&[n, c, hw, hw], -1.0, 1.0, r), uniform(&[k, c, kh, kh], -1.0, 1.0, r), uniform(&[k], -1.0, 1.0, r)];
    check(&ins, r, |g, v| g.conv2d(v[0], v[1], v[2], stride, pad).unwrap())
}

fn conv_transpose2d(r: &mut ChaCha8Rng) -> f64 {
    let (n, cin, cout) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
    let (kh, stride) = (r.random_range(2..6), r.random_range(1..3));
    let pad = r.random_range(0..kh.min(2));
    let hw = r.random_range(2..6);
    let ins = [uniform(&[n, cin, hw, hw], -1.0, 1.0, r), uniform(&[cin, cout, kh, kh], -1.0, 1.0, r), uniform(&[cout], -1.0, 1.0, r)];
    check(&ins, r, |g, v| g.conv_transpose2d(v[0], v[1], v[2], stride, pad).unwrap())
}

fn linear(r: &mut ChaCha8Rng) -> f64 {
    let (n, fin, fout) = (r.random_range(1..5), r.random_range(1..9), r.random_range(1..9));
    let ins = [uniform(&[n, fin], -1.0, 1.0, r), uniform(&[fout, fin], -1.0, 1.0, r), uniform(&[fout], -1.0, 1.0, r)];
    check(&ins, r, |g, v| g.linear(v[0], v[1], v[2]).unwrap())
}

fn elu(r: &mut ChaCha8Rng) -> f64 {
    // Keep probes away from the kink at zero.
    let len = r.random_range(1..40);
    let x = Tensor::from_fn(&[len], |_| {
        let m = r.random_range(0.01..3.0);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    });
    check(&[x], r, |g, v| g.elu(v[0]))
}

fn sigmoid(r: &mut ChaCha8Rng) -> f64 {
    let len = r.random_range(1..40);
    let x = uniform(&[len], -6.0, 6.0, r);
    check(&[x], r, |g, v| g.sigmoid(v[0]))
}

fn batch_norm_train(r: &mut ChaCha8Rng) -> f64 {
    let (n, c, hw) = (r.random_range(2..4), r.random_range(1..4), r.random_range(1..4));
    let ins = [uniform(&[n, c, hw, hw], -2.0, 2.0, r), uniform(&[c], 0.5, 1.5, r), uniform(&[c], -0.5, 0.5, r)];
    check(&ins, r, |g, v| g.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0)
}

fn batch_norm_eval(r: &mut ChaCha8Rng) -> f64 {
    let (n, c, hw) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
    let mean: Vec<f64> = (0..c).map(|_| r.random_range(-1.0..1.0)).collect();
    let var: Vec<f64> = (0..c).map(|_| r.random_range(0.2..2.0)).collect();
    let ins = [uniform(&[n, c, hw, hw], -2.0, 2.0, r), uniform(&[c], 0.5, 1.5, r), uniform(&[c], -0.5, 0.5, r)];
    check(&ins, r, |g, v| g.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5).unwrap())
}

fn affine_matrix(mode: AffineMode, r: &mut ChaCha8Rng) -> f64 {
    let n = r.random_range(1..4);
    let p = uniform(&[n, mode.n_params()], -0.8, 0.8, r);
    check(&[p], r, |g, v| g.affine_matrix(v[0], mode).unwrap())
}

fn affine_inverse(r: &mut ChaCha8Rng) -> f64 {
    let n = r.random_range(1..4);
    let theta = Tensor::from_fn(&[n, 2, 3], |i| if i % 6 == 0 || i % 6 == 4 { r.random_range(0.6..1.4) } else { r.random_range(-0.4..0.4) });
    check(&[theta], r, |g, v| g.affine_inverse(v[0]).unwrap())
}

fn affine_grid(r: &mut ChaCha8Rng) -> f64 {
    let (n, h, w) = (r.random_range(1..3), r.random_range(1..7), r.random_range(1..7));
    let theta = uniform(&[n, 2, 3], -1.0, 1.0, r);
    check(&[theta], r, |g, v| g.affine_grid(v[0], h, w).unwrap())
}

fn grid_sample(r: &mut ChaCha8Rng) -> f64 {
    let (n, c, h, w) = (r.random_range(1..3), r.random_range(1..3), r.random_range(2..7), r.random_range(2..7));
    let (oh, ow) = (r.random_range(1..6), r.random_range(1..6));
    // Slightly beyond [-1, 1] so that zero padding is exercised too.
    let ins = [uniform(&[n, c, h, w], 0.0, 1.0, r), uniform(&[n, oh, ow, 2], -1.2, 1.2, r)];
    check(&ins, r, |g, v| g.grid_sample(v[0], v[1]).unwrap())
}

fn elbo(r: &mut ChaCha8Rng) -> f64 {
    let (n, hw, latent) = (r.random_range(1..4), r.random_range(2..6), r.random_range(1..5));
    let x = uniform(&[n, 1, hw, hw], 0.0, 1.0, r);
    let ins = [uniform(&[n, 1, hw, hw], 0.05, 0.95, r), uniform(&[n, latent], -1.5, 1.5, r), uniform(&[n, latent], -1.5, 1.0, r)];
    check(&ins, r, |g, v| elbo_vars(g, &x, v[0], v[1], v[2]).unwrap().total)
}

/// Full pipeline: warp, encoder, reparameterization, decoder, inverse warp
/// and negative ELBO, differentiated with respect to the per-sample affine
/// parameters and a sample of model parameters.
fn avae_pipeline(r: &mut ChaCha8Rng) -> f64 {
    let modes = [AffineMode::RotationOnly, AffineMode::RotScaleShearTranslate, AffineMode::Full6];
    let mode = modes[r.random_range(0..3)];
    let bn = if r.random_bool(0.5) { Mode::Train } else { Mode::Eval };
    let n = r.random_range(2..4);
    let latent = r.random_range(1..5);
    let mut model = VaeModel::<f64>::new(VaeConfig::with_latent(latent), r).unwrap();
    let x = Tensor::from_fn(&[n, 1, 40, 40], |i| {
        let (row, col) = ((i / 40) % 40, i % 40);
        if (8..32).contains(&row) && (10..30).contains(&col) {
            r.random_range(0.0..1.0)
        } else {
            0.0
        }
    });
    let noise = Tensor::randn(&[n, latent], r);
    let alpha = Tensor::from_fn(&[n, mode.n_params()], |i| {
        let p = i % mode.n_params();
        match mode {
            AffineMode::RotationOnly => r.random_range(-2.5..2.5),
            AffineMode::RotScaleShearTranslate if p == 0 => r.random_range(-2.5..2.5),
            AffineMode::RotScaleShearTranslate => r.random_range(-0.2..0.2),
            AffineMode::Full6 => [1.0, 0.0, 0.0, 0.0, 1.0, 0.0][p] + r.random_range(-0.3..0.3),
        }
    });

    let loss_of = |model: &VaeModel<f64>, alpha: &Tensor<f64>, grad: bool| {
        let mut g = Graph::new();
        let f = avae_forward(&mut g, model, &x, alpha, mode, &noise, bn, grad, grad).unwrap();
        let l = f.elbo.mean_total(&mut g);
        (g, f, l)
    };
    let (g, f, l) = loss_of(&model, &alpha, true);
    let grads = g.backward(l).unwrap();
    let value = |model: &VaeModel<f64>, alpha: &Tensor<f64>| {
        let (g, _, l) = loss_of(model, alpha, false);
        g.value(l).data()[0]
    };

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let ga = grads.get(f.alpha).unwrap();
    for (k, &g) in ga.iter().enumerate() {
        let mut a = alpha.clone();
        a.data_mut()[k] += HA;
        let up = value(&model, &a);
        a.data_mut()[k] -= 2.0 * HA;
        let down = value(&model, &a);
        analytic.push(g);
        numeric.push((up - down) / (2.0 * HA));
    }
    let alpha_err = rel_err(&analytic, &numeric);

    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for _ in 0..16 {
        let p = r.random_range(0..model.params().len());
        let k = r.random_range(0..model.params()[p].numel());
        analytic.push(grads.get(f.params[p]).unwrap()[k]);
        let orig = model.params()[p].data()[k];
        model.params_mut()[p].data_mut()[k] = orig + H;
        let up = value(&model, &alpha);
        model.params_mut()[p].data_mut()[k] = orig - H;
        let down = value(&model, &alpha);
        model.params_mut()[p].data_mut()[k] = orig;
        numeric.push((up - down) / (2.0 * H));
    }
    alpha_err.max(rel_err(&analytic, &numeric))
}
