//! Loop oracles, statistical checks and model-level invariants.

use avae_core::avae::{self, fit_transform, AlphaCache, FitConfig, RestartSource, TrainConfig};
use avae_core::data::PerturbationSpec;
use avae_core::graph::elu;
use avae_core::vae::{reparameterize, vae_eval, vae_forward, LatentStats, Mode};
use avae_core::affine::warp;
use avae_core::{AffineMode, AffineParams, Graph, OptimizerState, Tensor, VaeConfig, VaeModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct definition: `out[b,k,i,j] = bias[k] + sum x[b,c,i*s+u-p, j*s+v-p] w[k,c,u,v]`.
fn conv_loops(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let [k, _, kh, kw] = w.shape().try_into().unwrap();
    let (oh, ow) = ((h + 2 * p - kh) / s + 1, (wd + 2 * p - kw) / s + 1);
    let mut out = Tensor::zeros(&[n, k, oh, ow]);
    for bi in 0..n {
        for ki in 0..k {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.data()[ki];
                    for ci in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let (y, xx) = ((i * s + u) as isize - p as isize, (j * s + v) as isize - p as isize);
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    acc += x.at(&[bi, ci, y as usize, xx as usize]) * w.at(&[ki, ci, u, v]);
                                }
                            }
                        }
                    }
                    let o = out.offset(&[bi, ki, i, j]);
                    out.data_mut()[o] = acc;
                }
            }
        }
    }
    out
}

/// Scatter definition: every input pixel adds `x * w` into the output window
/// it maps to, then the border `p` is cropped.
fn conv_transpose_loops(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
    let [n, cin, h, wd] = x.shape().try_into().unwrap();
    let [_, cout, kh, kw] = w.shape().try_into().unwrap();
    let (fh, fw) = ((h - 1) * s + kh, (wd - 1) * s + kw);
    let (oh, ow) = (fh - 2 * p, fw - 2 * p);
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);
    for bi in 0..n {
        for co in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let o = out.offset(&[bi, co, i, j]);
                    out.data_mut()[o] = b.data()[co];
                }
            }
            for ci in 0..cin {
                for y in 0..h {
                    for xx in 0..wd {
                        for u in 0..kh {
                            for v in 0..kw {
                                let (oy, ox) = ((y * s + u) as isize - p as isize, (xx * s + v) as isize - p as isize);
                                if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                    let o = out.offset(&[bi, co, oy as usize, ox as usize]);
                                    out.data_mut()[o] += x.at(&[bi, ci, y, xx]) * w.at(&[ci, co, u, v]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: usize, p: usize, transposed: bool) -> Tensor<f64> {
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = if transposed { g.conv_transpose2d(xv, wv, bv, s, p) } else { g.conv2d(xv, wv, bv, s, p) }.unwrap();
    g.value(y).clone()
}

#[test]
fn conv_matches_loops() {
    let mut r = seeded(1);
    for _ in 0..40 {
        let (n, c, k) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..5));
        let (kh, s, p) = (r.random_range(1..5), r.random_range(1..4), r.random_range(0..4));
        let hw = r.random_range(kh.max(2)..9);
        let (x, w, b) = (uniform(&[n, c, hw, hw], &mut r), uniform(&[k, c, kh, kh], &mut r), uniform(&[k], &mut r));
        assert!(conv(&x, &w, &b, s, p, false).max_abs_diff(&conv_loops(&x, &w, &b, s, p)) < 1e-12);
    }
}

#[test]
fn conv_transpose_matches_loops() {
    let mut r = seeded(2);
    for _ in 0..20 {
        let (n, cin, cout) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
        let (kh, s) = (r.random_range(2..6), r.random_range(1..3));
        let p = r.random_range(0..kh.min(2));
        let hw = r.random_range(1..6);
        let (x, w, b) = (uniform(&[n, cin, hw, hw], &mut r), uniform(&[cin, cout, kh, kh], &mut r), uniform(&[cout], &mut r));
        assert!(conv(&x, &w, &b, s, p, true).max_abs_diff(&conv_transpose_loops(&x, &w, &b, s, p)) < 1e-12);
    }
}

/// `<conv(x), y> = <x, conv_transpose(y)>` for the same weights, no bias.
#[test]
fn transposed_conv_is_the_adjoint() {
    let mut r = seeded(3);
    for _ in 0..20 {
        let (n, c, k) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
        let (kh, s, p) = (r.random_range(2..5), 2, 1);
        // Sizes where the transposed output extent equals the input extent.
        let hw = s * r.random_range(2..5) + kh - 2 * p - s;
        let w = uniform(&[k, c, kh, kh], &mut r);
        let x = uniform(&[n, c, hw, hw], &mut r);
        let cx = conv(&x, &w, &Tensor::zeros(&[k]), s, p, false);
        let y = uniform(cx.shape(), &mut r);
        let ty = conv(&y, &w, &Tensor::zeros(&[c]), s, p, true);
        assert_eq!(ty.shape(), x.shape());
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }
}

#[test]
fn elu_values() {
    assert!((elu(-1.0f64) - (-0.63212)).abs() < 1e-5);
    assert_eq!(elu(2.5f64), 2.5);
    assert_eq!(elu(0.0f64), 0.0);
}

#[test]
fn batch_norm_train_standardizes_channels() {
    let mut r = seeded(4);
    let (n, c, hw) = (4, 3, 5);
    let x = Tensor::from_fn(&[n, c, hw, hw], |i| 3.0 + 2.0 * ((i * 37) % 11) as f64 + r.random_range(0.0..1.0));
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.constant(x), g.constant(Tensor::full(&[c], 1.0)), g.constant(Tensor::zeros(&[c])));
    let (y, stats) = g.batch_norm_train(xv, gv, bv, 1e-5).unwrap();
    let y = g.value(y);
    for ch in 0..c {
        let vals: Vec<f64> = (0..n).flat_map(|b| (0..hw * hw).map(move |p| (b, p))).map(|(b, p)| y.data()[(b * c + ch) * hw * hw + p]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-3);
        assert!(stats.var_unbiased[ch] > 0.0);
    }
}

#[test]
fn batch_norm_eval_uses_running_statistics() {
    let x = Tensor::from_fn(&[2, 2, 2, 2], |i| i as f64);
    let mut g = Graph::new();
    let (xv, gv, bv) = (g.constant(x.clone()), g.constant(Tensor::new(&[2], vec![2.0, 0.5]).unwrap()), g.constant(Tensor::new(&[2], vec![0.1, -0.1]).unwrap()));
    let (mean, var) = ([1.0, -2.0], [4.0, 0.25]);
    let y = g.batch_norm_eval(xv, gv, bv, &mean, &var, 0.0).unwrap();
    let y = g.value(y);
    for (k, (&xi, &yi)) in x.data().iter().zip(y.data()).enumerate() {
        let ch = (k / 4) % 2;
        let (gamma, beta) = ([2.0, 0.5][ch], [0.1, -0.1][ch]);
        assert!((yi - (gamma * (xi - mean[ch]) / var[ch].sqrt() + beta)).abs() < 1e-12);
    }
}

#[test]
fn running_statistics_follow_momentum() {
    let mut r = seeded(5);
    let mut model = VaeModel::<f64>::new(VaeConfig::with_latent(2), &mut r).unwrap();
    let x = Tensor::from_fn(&[4, 1, 40, 40], |_| r.random_range(0.0..1.0));
    let noise = Tensor::randn(&[4, 2], &mut r);
    let mut g = Graph::new();
    let f = vae_forward(&mut g, &model, &x, &noise, Mode::Train, false).unwrap();
    let (bi, stats) = f.batch_stats[0].clone();
    let before = model.batch_norms()[bi].running_mean.clone();
    model.apply_batch_stats(f.batch_stats);
    let after = &model.batch_norms()[bi].running_mean;
    for ((a, b), s) in after.iter().zip(&before).zip(&stats.mean) {
        assert!((a - (0.9 * b + 0.1 * s)).abs() < 1e-12);
    }
}

/// `z = mu + sigma * eps` has mean `mu` and variance `exp(logvar)`.
#[test]
fn reparameterization_moments() {
    let mut r = seeded(6);
    let mu = Tensor::new(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap();
    let logvar = Tensor::new(&[1, 3], vec![0.0, -1.0, 0.7]).unwrap();
    let stats = LatentStats { mu: mu.clone(), logvar: logvar.clone() };
    let draws = 20_000;
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    for _ in 0..draws {
        let z = reparameterize(&stats, &mut r);
        for d in 0..3 {
            sum[d] += z.data()[d];
            sq[d] += z.data()[d] * z.data()[d];
        }
    }
    for d in 0..3 {
        let mean = sum[d] / draws as f64;
        let var = sq[d] / draws as f64 - mean * mean;
        let want_var = logvar.data()[d].exp();
        // Five standard errors.
        assert!((mean - mu.data()[d]).abs() < 5.0 * (want_var / draws as f64).sqrt());
        assert!((var / want_var - 1.0).abs() < 5.0 * (2.0 / draws as f64).sqrt());
    }
}

/// Pearson chi-square over 36 bins of 10^4 draws; 57.34 is the 0.99
/// quantile with 35 degrees of freedom.
#[test]
fn sampled_rotations_are_uniform() {
    let spec = PerturbationSpec::rotation(0.0, 360.0, 0);
    let mut r = seeded(7);
    let mut bins = [0usize; 36];
    let draws = 10_000;
    for _ in 0..draws {
        let deg = spec.sample(&mut r).rotation_angle().to_degrees();
        bins[((deg / 10.0) as usize).min(35)] += 1;
    }
    let expected = draws as f64 / 36.0;
    let chi2: f64 = bins.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < 57.34, "chi2 {chi2}");
}

fn kl_of(mu: &[f64], logvar: &[f64]) -> f64 {
    let n = mu.len();
    let mut g = Graph::new();
    let x = Tensor::full(&[1, 1, 1, 1], 0.5);
    let p = g.constant(x.clone());
    let (m, l) = (g.constant(Tensor::new(&[1, n], mu.to_vec()).unwrap()), g.constant(Tensor::new(&[1, n], logvar.to_vec()).unwrap()));
    let e = avae_core::vae::elbo_vars(&mut g, &x, p, m, l).unwrap();
    g.value(e.kl).data()[0]
}

proptest! {
    #[test]
    fn kl_is_nonnegative(pairs in prop::collection::vec((-5.0f64..5.0, -6.0f64..4.0), 1..12)) {
        let (mu, logvar): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assert!(kl_of(&mu, &logvar) >= 0.0);
    }
}

#[test]
fn kl_vanishes_at_the_prior() {
    assert_eq!(kl_of(&[0.0; 4], &[0.0; 4]), 0.0);
}

fn blobs(n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let centers: Vec<(f64, f64, f64)> = (0..n).map(|_| (rng.random_range(12.0..28.0), rng.random_range(12.0..28.0), rng.random_range(8.0..30.0))).collect();
    Tensor::from_fn(&[n, 1, 40, 40], |k| {
        let (b, i, j) = (k / 1600, ((k / 40) % 40) as f64, (k % 40) as f64);
        let (ci, cj, s) = centers[b];
        (-((i - ci).powi(2) + (j - cj).powi(2)) / s).exp()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// Eval-mode losses are per sample: permuting the batch permutes them.
    #[test]
    fn eval_losses_ignore_batch_order(seed in 0u64..1000) {
        let mut r = seeded(seed);
        let model = VaeModel::<f64>::new(VaeConfig::with_latent(3), &mut r).unwrap();
        let x = blobs(5, &mut r);
        let noise = Tensor::randn(&[5, 3], &mut r);
        let mut perm: Vec<usize> = (0..5).collect();
        perm.rotate_left(1 + (seed as usize) % 4);
        let (_, a) = vae_eval(&model, &x, &noise).unwrap();
        let (_, b) = vae_eval(&model, &x.select_outer(&perm), &noise.select_outer(&perm)).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            prop_assert!((a[p].total - b[k].total).abs() < 1e-9 * a[p].total.abs().max(1.0));
        }
    }
}

#[test]
fn one_epoch_reduces_loss() {
    let mut r = seeded(8);
    let mut model = VaeModel::<f32>::new(VaeConfig::with_latent(4), &mut r).unwrap();
    let x: Tensor<f32> = blobs(256, &mut r).cast();
    let noise = Tensor::zeros(&[256, 4]);
    let batch_loss = |model: &VaeModel<f32>| {
        let mut g = Graph::new();
        let f = vae_forward(&mut g, model, &x, &noise, Mode::Train, false).unwrap();
        f.elbo.report(&g).total
    };
    let before = batch_loss(&model);
    let mut opt = OptimizerState::adam(1e-3, 5e-4);
    let cfg = TrainConfig { epochs: 1, batch_size: 32 };
    avae::train_vanilla(&mut model, &x, &cfg, &mut opt, &mut r, |_, _| {}).unwrap();
    let after = batch_loss(&model);
    assert!(after < before, "{after} >= {before}");
}

fn tiny_run(seed: u64) -> (Vec<f64>, VaeModel<f64>) {
    let mut r = seeded(seed);
    let mut model = VaeModel::<f64>::new(VaeConfig::with_latent(2), &mut r).unwrap();
    let x = blobs(24, &mut r);
    let mut opt = OptimizerState::adam(1e-3, 5e-4);
    let cfg = TrainConfig { epochs: 2, batch_size: 8 };
    let log = avae::train_vanilla(&mut model, &x, &cfg, &mut opt, &mut r, |_, _| {}).unwrap();
    (log.epochs.iter().map(|e| e.loss.total).collect(), model)
}

#[test]
fn training_is_bit_reproducible() {
    let (a, ma) = tiny_run(9);
    let (b, mb) = tiny_run(9);
    assert_eq!(a, b);
    assert_eq!(ma.params(), mb.params());
    let (c, _) = tiny_run(10);
    assert_ne!(a, c);
}

/// With zero fit steps and an identity cache the per-batch fit returns the
/// identity, so the run matches plain training step for step.
#[test]
fn degenerate_transform_training_is_plain_training() {
    let setup = || {
        let mut r = seeded(11);
        let model = VaeModel::<f64>::new(VaeConfig::with_latent(2), &mut r).unwrap();
        let x = blobs(24, &mut r);
        (r, model, x, OptimizerState::adam(1e-3, 5e-4))
    };
    let cfg = TrainConfig { epochs: 2, batch_size: 8 };

    let (mut r, mut plain, x, mut opt) = setup();
    let plain_log = avae::train_vanilla(&mut plain, &x, &cfg, &mut opt, &mut r, |_, _| {}).unwrap();

    let (mut r, mut fitted, x, mut opt) = setup();
    let fit = FitConfig { steps: 0, restarts: 1, restart_source: RestartSource::RotationGrid, ..FitConfig::training() };
    let mut cache = AlphaCache::identity(24, AffineMode::RotationOnly);
    let fit_log = avae::train_transform_opt(&mut fitted, &x, &cfg, &mut opt, &fit, &mut cache, &mut r, |_, _, _| {}).unwrap();

    assert_eq!(plain_log, fit_log);
    assert_eq!(plain.params(), fitted.params());
}

/// The transform fit reads the model but never changes it.
#[test]
fn fitting_leaves_the_model_untouched() {
    let mut r = seeded(12);
    let model = VaeModel::<f64>::new(VaeConfig::with_latent(2), &mut r).unwrap();
    let snapshot = model.clone();
    let x = blobs(3, &mut r);
    let noise = Tensor::randn(&[3, 2], &mut r);
    let cfg = FitConfig { steps: 5, ..FitConfig::affine() };
    let fits = fit_transform(&model, &x, &noise, &cfg, None, &mut r).unwrap();
    assert_eq!(fits.len(), 3);
    assert_eq!(model.params(), snapshot.params());
    for (a, b) in model.batch_norms().iter().zip(snapshot.batch_norms()) {
        assert_eq!(a.running_mean, b.running_mean);
        assert_eq!(a.running_var, b.running_var);
    }
}

/// Quarter turns are exact permutations, so undoing one through the affine
/// layers reproduces the plain VAE loss of the unrotated image for any model.
#[test]
fn undone_quarter_turn_matches_the_canonical_loss() {
    let mut r = seeded(13);
    let mut model = VaeModel::<f64>::new(VaeConfig::with_latent(3), &mut r).unwrap();
    model.set_mode(Mode::Eval);
    let x = blobs(2, &mut r);
    let noise = Tensor::randn(&[2, 3], &mut r);
    let turn = |deg: f64| AffineParams::RotationOnly { theta: deg.to_radians() };
    let rotated = warp(&x, &turn(90.0)).unwrap();
    let (_, plain) = vae_eval(&model, &x, &noise).unwrap();
    let (_, undone) = avae::avae_loss(&model, &rotated, &[turn(-90.0); 2], &noise).unwrap();
    for (p, u) in plain.iter().zip(&undone) {
        assert!((p.total - u.total).abs() <= 1e-9 * p.total.abs(), "{} vs {}", p.total, u.total);
    }
}
