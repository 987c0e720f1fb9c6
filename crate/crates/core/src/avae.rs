//! The VAE wrapped in two affine layers, per-sample affine fitting with
//! restarts, and the two training procedures.
//!
//! The first layer warps the input with `alpha` (towards the pose the VAE
//! knows), the second warps the reconstruction with the inverse, and the loss
//! compares that output against the untouched input. `alpha` is carried next
//! to the latent code but is not part of the KL term.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::affine::{self, warp_var, AffineMode, AffineParams};
use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::tensor::{expect_dim, expect_rank, Scalar, Tensor};
use crate::vae::{elbo_vars, reparameterize_var, vae_forward, ElboVars, LossReport, Mode, Pass, VaeModel};

/// Where the candidate transforms screened by [`fit_transform`] come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RestartSource {
    /// `restarts` rotations equally spaced over the circle, starting at 0.
    RotationGrid,
    /// Identity plus `restarts - 1` random draws around it.
    RandomNearIdentity,
    /// `rotations` grid rotations (including 0) plus random draws for the
    /// remaining restarts.
    Mixed { rotations: usize },
    /// A single caller-provided start per sample (warm start).
    Cached,
    /// The caller-provided start followed by `rotations` grid rotations, so a
    /// warm start can still jump to another pose.
    CachedThenGrid { rotations: usize },
}

/// Half-widths of the random draws used by [`RestartSource::RandomNearIdentity`].
/// Rotation and shear are in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub rotation: f64,
    pub log_scale: f64,
    pub shear: f64,
    pub translation: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self { rotation: PI, log_scale: 0.2, shear: 0.3, translation: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub mode: AffineMode,
    pub restarts: usize,
    pub restart_source: RestartSource,
    /// Gradient iterations on each survivor.
    pub steps: usize,
    pub lr_alpha: f64,
    /// How many of the best restarts enter the gradient phase.
    pub survivors: usize,
    pub optimizer: OptimizerKind,
    pub jitter: Jitter,
    /// Rows per graph; bounds memory, does not change results.
    pub chunk: usize,
}

impl FitConfig {
    /// Rotation-only fit: 8 grid restarts, 50 Adam steps on the best.
    pub fn rotation() -> Self {
        Self {
            mode: AffineMode::RotationOnly,
            restarts: 8,
            restart_source: RestartSource::RotationGrid,
            steps: 50,
            lr_alpha: 0.05,
            survivors: 1,
            optimizer: OptimizerKind::adam(),
            jitter: Jitter::default(),
            chunk: 128,
        }
    }

    /// Rotation/scale/shear/translation fit: identity, 7 more grid rotations
    /// and 8 random starts; 100 steps on the best two.
    pub fn affine() -> Self {
        Self {
            mode: AffineMode::RotScaleShearTranslate,
            restarts: 16,
            restart_source: RestartSource::Mixed { rotations: 8 },
            steps: 100,
            survivors: 2,
            ..Self::rotation()
        }
    }

    /// Inner fit used while training: short, warm-started from the cache
    /// once a sample has been fitted.
    pub fn training() -> Self {
        Self { steps: 10, ..Self::rotation() }
    }

    /// The same fit warm-started from one cached transform per sample.
    pub fn cached(&self) -> Self {
        Self { restarts: 1, survivors: 1, restart_source: RestartSource::Cached, ..*self }
    }

    /// Warm start used by [`train_transform_opt`]. Grid restarts are screened
    /// again next to the cached transform; other sources only use the cache.
    pub fn warm(&self) -> Self {
        match self.restart_source {
            RestartSource::RotationGrid => Self {
                restarts: self.restarts + 1,
                survivors: 1,
                restart_source: RestartSource::CachedThenGrid { rotations: self.restarts },
                ..*self
            },
            _ => self.cached(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.restarts == 0 {
            return Err(Error::Config("restarts must be at least 1".into()));
        }
        if self.survivors == 0 || self.survivors > self.restarts {
            return Err(Error::Config(format!("survivors {} outside [1, {}]", self.survivors, self.restarts)));
        }
        if self.chunk == 0 {
            return Err(Error::Config("chunk must be at least 1".into()));
        }
        if self.lr_alpha.is_nan() || self.lr_alpha < 0.0 {
            return Err(Error::Config(format!("alpha learning rate {} is negative", self.lr_alpha)));
        }
        match self.restart_source {
            RestartSource::Mixed { rotations } if rotations == 0 || rotations > self.restarts => {
                Err(Error::Config(format!("{rotations} grid rotations for {} restarts", self.restarts)))
            }
            RestartSource::Cached if self.restarts != 1 => Err(Error::Config("cached starts use one restart".into())),
            RestartSource::CachedThenGrid { rotations } if rotations + 1 != self.restarts => Err(Error::Config(
                format!("a cached start and {rotations} grid rotations need {} restarts", rotations + 1),
            )),
            _ => Ok(()),
        }
    }
}

/// Screening losses of every restart and the loss curves of the survivors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitTrace {
    pub initial: Vec<f64>,
    /// Restart indices of the survivors, best first.
    pub survivors: Vec<usize>,
    /// One curve per survivor: loss before each step and after the last.
    pub curves: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformFit {
    pub alpha_star: AffineParams,
    pub loss: LossReport,
    pub trace: FitTrace,
}

/// Per-sample transforms kept between training epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaCache {
    pub mode: AffineMode,
    entries: Vec<Option<AffineParams>>,
}

impl AlphaCache {
    pub fn new(len: usize, mode: AffineMode) -> Self {
        Self { mode, entries: vec![None; len] }
    }

    /// Every sample starts at the identity.
    pub fn identity(len: usize, mode: AffineMode) -> Self {
        Self { mode, entries: vec![Some(AffineParams::identity(mode)); len] }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<AffineParams> {
        self.entries.get(index).copied().flatten()
    }

    pub fn set(&mut self, index: usize, alpha: AffineParams) -> Result<()> {
        if alpha.mode() != self.mode {
            return Err(Error::Config(format!("cache holds {:?}, got {:?}", self.mode, alpha.mode())));
        }
        let len = self.entries.len();
        let slot = self.entries.get_mut(index).ok_or(Error::OverRequest { requested: index + 1, available: len })?;
        *slot = Some(alpha);
        Ok(())
    }

    pub fn entries(&self) -> &[Option<AffineParams>] {
        &self.entries
    }
}

/// Result of [`avae_forward`] on a graph.
pub struct AvaeForward<T> {
    /// `(n, p)` transform parameters.
    pub alpha: Var,
    /// Input warped towards the canonical pose.
    pub warped: Var,
    /// Reconstruction warped back by the inverse transform.
    pub out: Var,
    pub mu: Var,
    pub logvar: Var,
    pub elbo: ElboVars,
    pub batch_stats: Vec<(usize, BatchStats<T>)>,
    pub params: Vec<Var>,
}

/// `x_A = warp(x, alpha)`, reconstruct `x_A` through the VAE with latent
/// noise `noise`, warp back with `alpha^-1` and score against `x`.
#[allow(clippy::too_many_arguments)]
pub fn avae_forward<T: Scalar>(
    g: &mut Graph<T>,
    model: &VaeModel<T>,
    x: &Tensor<T>,
    alpha: &Tensor<T>,
    affine_mode: AffineMode,
    noise: &Tensor<T>,
    mode: Mode,
    trainable: bool,
    alpha_grad: bool,
) -> Result<AvaeForward<T>> {
    expect_rank(x, "avae", 4)?;
    expect_rank(alpha, "avae", 2)?;
    expect_dim("avae", "batch", x.shape()[0], alpha.shape()[0])?;
    if noise.shape() != [x.shape()[0], model.config.latent_size] {
        return Err(Error::Rank { op: "avae noise", expected: 2, got: noise.shape().to_vec() });
    }
    let mut pass = Pass::new(g, model, mode, trainable);
    let a = g.leaf(alpha, alpha_grad);
    let theta = g.affine_matrix(a, affine_mode)?;
    let xv = g.constant(x.clone());
    let warped = warp_var(g, xv, theta)?;
    let (mu, logvar) = pass.encode(g, warped)?;
    let eps = g.constant(noise.clone());
    let z = reparameterize_var(g, mu, logvar, eps)?;
    let recon = pass.decode(g, z)?;
    let inv = g.affine_inverse(theta)?;
    let out = warp_var(g, recon, inv)?;
    let elbo = elbo_vars(g, x, out, mu, logvar)?;
    let params = pass.param_vars().to_vec();
    Ok(AvaeForward { alpha: a, warped, out, mu, logvar, elbo, batch_stats: pass.into_batch_stats(), params })
}

/// Eval-mode loss of each sample under its own transform. Returns the
/// inverse-warped reconstructions and per-sample reports.
pub fn avae_loss<T: Scalar>(
    model: &VaeModel<T>,
    x: &Tensor<T>,
    alphas: &[AffineParams],
    noise: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<LossReport>)> {
    let mode = alphas.first().map_or(AffineMode::RotationOnly, |a| a.mode());
    let a = affine::params_tensor(alphas)?;
    let mut g = Graph::new();
    let f = avae_forward(&mut g, model, x, &a, mode, noise, Mode::Eval, false, false)?;
    Ok((g.value(f.out).clone(), f.elbo.per_sample(&g)))
}

fn rsst(mode: AffineMode, theta: f64, log_scale: f64, shear: f64, tx: f64, ty: f64) -> AffineParams {
    let p = AffineParams::RotScaleShearTranslate { theta, log_scale, shear, tx, ty };
    match mode {
        AffineMode::RotationOnly => AffineParams::RotationOnly { theta },
        AffineMode::RotScaleShearTranslate => p,
        AffineMode::Full6 => {
            let m = p.to_matrix();
            AffineParams::Full6([m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2]])
        }
    }
}

fn near_identity<R: Rng + ?Sized>(mode: AffineMode, j: &Jitter, rng: &mut R) -> AffineParams {
    let mut u = |w: f64| if w > 0.0 { rng.random_range(-w..w) } else { 0.0 };
    let theta = u(j.rotation);
    let (s, psi, tx, ty) = (u(j.log_scale), u(j.shear), u(j.translation), u(j.translation));
    rsst(mode, theta, s, psi, tx, ty)
}

/// Candidate starts for one sample, identity (or the cached value) first.
fn candidates<R: Rng + ?Sized>(cfg: &FitConfig, cached: Option<AffineParams>, rng: &mut R) -> Vec<AffineParams> {
    let grid = |k: usize, r: usize| rsst(cfg.mode, TAU * k as f64 / r as f64, 0.0, 0.0, 0.0, 0.0);
    match cfg.restart_source {
        RestartSource::Cached => vec![cached.unwrap_or(AffineParams::identity(cfg.mode))],
        RestartSource::CachedThenGrid { rotations } => core::iter::once(cached.unwrap_or(AffineParams::identity(cfg.mode)))
            .chain((0..rotations).map(|k| grid(k, rotations)))
            .collect(),
        RestartSource::RotationGrid => (0..cfg.restarts).map(|k| grid(k, cfg.restarts)).collect(),
        RestartSource::RandomNearIdentity => core::iter::once(AffineParams::identity(cfg.mode))
            .chain((1..cfg.restarts).map(|_| near_identity(cfg.mode, &cfg.jitter, rng)))
            .collect(),
        RestartSource::Mixed { rotations } => (0..rotations)
            .map(|k| grid(k, rotations))
            .chain((rotations..cfg.restarts).map(|_| near_identity(cfg.mode, &cfg.jitter, rng)))
            .collect(),
    }
}

fn is_invertible(mode: AffineMode, p: &[f64]) -> bool {
    if p.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let m = affine::matrix_from_slice(mode, p);
    (m[0][0] * m[1][1] - m[0][1] * m[1][0]).abs() > affine::SINGULAR_DET
}

/// Eval-mode reports for `(sample, alpha)` rows, in chunks.
fn screen<T: Scalar>(
    model: &VaeModel<T>,
    x: &Tensor<T>,
    noise: &Tensor<T>,
    rows: &[(usize, AffineParams)],
    cfg: &FitConfig,
) -> Result<Vec<LossReport>> {
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(cfg.chunk) {
        let idx: Vec<usize> = chunk.iter().map(|r| r.0).collect();
        let alphas: Vec<AffineParams> = chunk.iter().map(|r| r.1).collect();
        let (_, reports) = avae_loss(model, &x.select_outer(&idx), &alphas, &noise.select_outer(&idx))?;
        out.extend(reports);
    }
    Ok(out)
}

struct Descent {
    best: Vec<(AffineParams, LossReport)>,
    curves: Vec<Vec<f64>>,
}

/// Gradient phase on independent rows. Each row keeps the best iterate it
/// has seen, seeded with its screening result.
fn descend<T: Scalar>(
    model: &VaeModel<T>,
    x: &Tensor<T>,
    noise: &Tensor<T>,
    rows: &[(usize, AffineParams, LossReport)],
    cfg: &FitConfig,
) -> Result<Descent> {
    let p = cfg.mode.n_params();
    let mut best: Vec<(AffineParams, LossReport)> = rows.iter().map(|r| (r.1, r.2)).collect();
    let mut curves = vec![Vec::with_capacity(cfg.steps + 1); rows.len()];
    if cfg.steps == 0 {
        return Ok(Descent { best, curves });
    }
    for (c, chunk) in rows.chunks(cfg.chunk).enumerate() {
        let base = c * cfg.chunk;
        let idx: Vec<usize> = chunk.iter().map(|r| r.0).collect();
        let xs = x.select_outer(&idx);
        let ns = noise.select_outer(&idx);
        let mut alpha: Vec<T> = chunk.iter().flat_map(|r| r.1.to_vec()).map(T::lit).collect();
        let mut opt = OptimizerState::<T>::new(cfg.optimizer, cfg.lr_alpha, 0.0);
        for step in 0..=cfg.steps {
            // A step that left the invertible set restarts that row from its best.
            for (r, row) in alpha.chunks_mut(p).enumerate() {
                let vals: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                if !is_invertible(cfg.mode, &vals) {
                    for (d, s) in row.iter_mut().zip(best[base + r].0.to_vec()) {
                        *d = T::lit(s);
                    }
                }
            }
            let last = step == cfg.steps;
            let a = Tensor::new(&[chunk.len(), p], alpha.clone())?;
            let mut g = Graph::new();
            let f = avae_forward(&mut g, model, &xs, &a, cfg.mode, &ns, Mode::Eval, false, !last)?;
            for (r, rep) in f.elbo.per_sample(&g).into_iter().enumerate() {
                curves[base + r].push(rep.total);
                if rep.total < best[base + r].1.total {
                    let vals: Vec<f64> = alpha[r * p..(r + 1) * p].iter().map(|v| v.as_f64()).collect();
                    best[base + r] = (AffineParams::from_slice(cfg.mode, &vals), rep);
                }
            }
            if last {
                break;
            }
            let loss = g.sum(f.elbo.total);
            let grads = g.backward(loss)?;
            let ga = grads.get(f.alpha).ok_or(Error::MissingGrad(0))?.to_vec();
            opt.step_slices(vec![&mut alpha[..]], &[ga]);
        }
    }
    Ok(Descent { best, curves })
}

/// Fits one transform per sample of `x` `(n, 1, h, w)` by minimizing the
/// AVAE loss with the model frozen in eval mode.
///
/// All restart candidates are screened, the best `survivors` per sample are
/// refined by `steps` optimizer iterations on `alpha` only, and the best
/// iterate seen anywhere is returned. `noise` `(n, latent)` is held fixed
/// for every evaluation of a sample, so the objective is deterministic.
/// `cached` provides the warm starts of the cached sources; `rng` is only
/// drawn from by random restarts.
pub fn fit_transform<T: Scalar, R: Rng + ?Sized>(
    model: &VaeModel<T>,
    x: &Tensor<T>,
    noise: &Tensor<T>,
    cfg: &FitConfig,
    cached: Option<&[AffineParams]>,
    rng: &mut R,
) -> Result<Vec<TransformFit>> {
    cfg.validate()?;
    expect_rank(x, "fit_transform", 4)?;
    let n = x.shape()[0];
    if let Some(c) = cached {
        expect_dim("fit_transform", "cached starts", n, c.len())?;
        if let Some(bad) = c.iter().find(|a| a.mode() != cfg.mode) {
            return Err(Error::Config(format!("cached start in {:?}, fit in {:?}", bad.mode(), cfg.mode)));
        }
    } else if matches!(cfg.restart_source, RestartSource::Cached | RestartSource::CachedThenGrid { .. }) {
        return Err(Error::Config("cached restart source without cached starts".into()));
    }

    let per_sample: Vec<Vec<AffineParams>> = (0..n).map(|i| candidates(cfg, cached.map(|c| c[i]), rng)).collect();
    let rows: Vec<(usize, AffineParams)> =
        per_sample.iter().enumerate().flat_map(|(i, c)| c.iter().map(move |&a| (i, a))).collect();
    let screened = screen(model, x, noise, &rows, cfg)?;

    let mut traces = Vec::with_capacity(n);
    let mut survivors = Vec::new();
    let mut offset = 0;
    for cands in &per_sample {
        let reports = &screened[offset..offset + cands.len()];
        let mut order: Vec<usize> = (0..cands.len()).collect();
        // Stable sort: ties go to the earlier restart, i.e. the identity.
        order.sort_by(|&a, &b| reports[a].total.total_cmp(&reports[b].total));
        order.truncate(cfg.survivors.min(cands.len()));
        for &k in &order {
            survivors.push((rows[offset + k].0, cands[k], reports[k]));
        }
        traces.push(FitTrace { initial: reports.iter().map(|r| r.total).collect(), survivors: order, curves: Vec::new() });
        offset += cands.len();
    }

    let d = descend(model, x, noise, &survivors, cfg)?;
    let mut fits = Vec::with_capacity(n);
    let mut it = d.best.into_iter().zip(d.curves);
    for mut trace in traces {
        let mut best: Option<(AffineParams, LossReport)> = None;
        for _ in 0..trace.survivors.len() {
            let ((a, rep), curve) = it.next().expect("one result per survivor");
            if best.is_none_or(|b| rep.total < b.1.total) {
                best = Some((a, rep));
            }
            trace.curves.push(curve);
        }
        let (alpha_star, loss) = best.expect("at least one survivor");
        fits.push(TransformFit { alpha_star, loss, trace });
    }
    Ok(fits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    /// Sample-weighted mean of the training-mode batch losses.
    pub loss: LossReport,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

fn check_train_inputs<T: Scalar>(data: &Tensor<T>, cfg: &TrainConfig) -> Result<usize> {
    expect_rank(data, "train", 4)?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    Ok(data.shape()[0])
}

/// Gradient step on the model from a finished forward pass.
fn apply_step<T: Scalar>(
    model: &mut VaeModel<T>,
    opt: &mut OptimizerState<T>,
    g: &mut Graph<T>,
    elbo: ElboVars,
    params: &[Var],
    batch_stats: Vec<(usize, BatchStats<T>)>,
) -> Result<LossReport> {
    let report = elbo.report(g);
    let loss = elbo.mean_total(g);
    let grads = g.backward(loss)?;
    model.zero_grad();
    for (v, p) in params.iter().zip(model.params_mut()) {
        grads.accumulate_into(*v, p);
    }
    opt.step(&mut model.params_mut())?;
    model.apply_batch_stats(batch_stats);
    Ok(report)
}

struct EpochMean {
    recon: f64,
    kl: f64,
    n: usize,
}

impl EpochMean {
    fn add(&mut self, r: LossReport, n: usize) {
        self.recon += r.recon * n as f64;
        self.kl += r.kl * n as f64;
        self.n += n;
    }

    fn report(&self) -> LossReport {
        let n = self.n.max(1) as f64;
        LossReport::new(self.recon / n, self.kl / n)
    }
}

/// Plain minibatch training on the negative ELBO. Each epoch shuffles the
/// rows of `data` and draws fresh latent noise per batch from `rng`.
pub fn train_vanilla<T: Scalar, R: Rng + ?Sized>(
    model: &mut VaeModel<T>,
    data: &Tensor<T>,
    cfg: &TrainConfig,
    opt: &mut OptimizerState<T>,
    rng: &mut R,
    mut on_epoch: impl FnMut(&EpochLog, &VaeModel<T>),
) -> Result<TrainLog> {
    let n = check_train_inputs(data, cfg)?;
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        model.set_mode(Mode::Train);
        order.shuffle(rng);
        let mut acc = EpochMean { recon: 0.0, kl: 0.0, n: 0 };
        for batch in order.chunks(cfg.batch_size) {
            let x = data.select_outer(batch);
            let noise = Tensor::randn(&[batch.len(), model.config.latent_size], rng);
            let mut g = Graph::new();
            let f = vae_forward(&mut g, model, &x, &noise, Mode::Train, true)?;
            let rep = apply_step(model, opt, &mut g, f.elbo, &f.params, f.batch_stats)?;
            acc.add(rep, batch.len());
        }
        model.set_mode(Mode::Eval);
        let entry = EpochLog { epoch, loss: acc.report() };
        on_epoch(&entry, model);
        log.epochs.push(entry);
    }
    Ok(log)
}

/// Training with a per-sample affine fit before every model step.
///
/// For each batch: (1) fit `alpha` for every sample with the model frozen,
/// batch norm in eval mode and the latent noise at zero, starting from the
/// cache where it has an entry (see [`FitConfig::warm`]) and from `fit`'s
/// restarts otherwise; (2) store the fitted transforms in `cache`; (3) take
/// one optimizer step on the model at those transforms in training mode. `cache` is indexed by row of `data`.
#[allow(clippy::too_many_arguments)]
pub fn train_transform_opt<T: Scalar, R: Rng + ?Sized>(
    model: &mut VaeModel<T>,
    data: &Tensor<T>,
    cfg: &TrainConfig,
    opt: &mut OptimizerState<T>,
    fit: &FitConfig,
    cache: &mut AlphaCache,
    rng: &mut R,
    mut on_epoch: impl FnMut(&EpochLog, &VaeModel<T>, &AlphaCache),
) -> Result<TrainLog> {
    let n = check_train_inputs(data, cfg)?;
    fit.validate()?;
    expect_dim("train_transform_opt", "cache size", n, cache.len())?;
    if cache.mode != fit.mode {
        return Err(Error::Config(format!("cache holds {:?}, fit uses {:?}", cache.mode, fit.mode)));
    }
    let warm = fit.warm();
    let latent = model.config.latent_size;
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        let mut acc = EpochMean { recon: 0.0, kl: 0.0, n: 0 };
        for batch in order.chunks(cfg.batch_size) {
            let x = data.select_outer(batch);
            let (hit, miss): (Vec<usize>, Vec<usize>) = (0..batch.len()).partition(|&r| cache.get(batch[r]).is_some());
            let mut alphas = vec![AffineParams::identity(fit.mode); batch.len()];
            for (rows, cfg_used) in [(&miss, fit), (&hit, &warm)] {
                if rows.is_empty() {
                    continue;
                }
                let starts: Vec<AffineParams> = rows.iter().filter_map(|&r| cache.get(batch[r])).collect();
                let cached = (!starts.is_empty()).then_some(&starts[..]);
                let zeros = Tensor::zeros(&[rows.len(), latent]);
                let fits = fit_transform(model, &x.select_outer(rows), &zeros, cfg_used, cached, rng)?;
                for (&r, f) in rows.iter().zip(fits) {
                    alphas[r] = f.alpha_star;
                    cache.set(batch[r], f.alpha_star)?;
                }
            }

            let a = affine::params_tensor(&alphas)?;
            let noise = Tensor::randn(&[batch.len(), latent], rng);
            let mut g = Graph::new();
            let f = avae_forward(&mut g, model, &x, &a, fit.mode, &noise, Mode::Train, true, false)?;
            let rep = apply_step(model, opt, &mut g, f.elbo, &f.params, f.batch_stats)?;
            acc.add(rep, batch.len());
        }
        model.set_mode(Mode::Eval);
        let entry = EpochLog { epoch, loss: acc.report() };
        on_epoch(&entry, model, cache);
        log.epochs.push(entry);
    }
    Ok(log)
}
