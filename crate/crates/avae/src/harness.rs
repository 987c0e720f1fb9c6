//! Experiment orchestration behind the CLI commands.
//!
//! Every command is generic over the scalar type and returns its rows, so
//! the acceptance suite can call the same code paths as the binary.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::time::Instant;

use avae_core::affine;
use avae_core::avae::{self as fitting, AlphaCache, FitConfig, TrainConfig};
use avae_core::data::{self, MnistSet, PerturbationSpec, Split};
use avae_core::vae::vae_eval;
use avae_core::{AffineMode, AffineParams, LossReport, OptimizerState, Scalar, Tensor, VaeModel};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, RngState};
use crate::config::{DatasetKind, ExperimentConfig, ModelMode};
use crate::error::{HarnessError, Result};
use crate::io::{self, CsvDoc};

/// Samples per evaluation work unit. Fixed so that results do not depend on
/// the number of threads.
pub const EVAL_CHUNK: usize = 256;
pub const HIST_BIN_DEG: f64 = 10.0;

const NOISE_SALT: u64 = 1;
const FIT_SALT: u64 = 2;
const VAL_PERTURB_SALT: u64 = 3;

/// Independent seed for purpose `k` under `seed`.
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    data::sample_rng(seed, k as usize).next_u64()
}

/// Progress line on stderr unless the config is quiet.
pub fn note(cfg: &ExperimentConfig, msg: impl Display) {
    if !cfg.quiet {
        eprintln!("{msg}");
    }
}

/// `path` with `suffix` appended to its file name.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

fn deg(rad: f64) -> f64 {
    affine::wrap_angle(rad).to_degrees()
}

/// The `train_n` training images selected by `data_seed` from the 60k file.
pub fn load_train<T: Scalar>(cfg: &ExperimentConfig) -> Result<MnistSet<T>> {
    let (raw, labels) = io::load_raw(&cfg.data_dir, Split::Train)?;
    let (rows, _) = data::make_splits(raw.count, cfg.train_n, 0, cfg.data_seed)?;
    io::select_rows(&raw, &labels, &rows, Split::Train)
}

/// The `val_n` validation images selected by `data_seed` from the 10k file.
pub fn load_val<T: Scalar>(cfg: &ExperimentConfig) -> Result<MnistSet<T>> {
    let (raw, labels) = io::load_raw(&cfg.data_dir, Split::Val)?;
    let (_, rows) = data::make_splits(raw.count, 0, cfg.val_n, cfg.data_seed)?;
    io::select_rows(&raw, &labels, &rows, Split::Val)
}

/// Perturbation of the training images in `epoch` (1-based); `None` for
/// canonical data. Each epoch draws fresh transforms.
pub fn augmentation(cfg: &ExperimentConfig, epoch: usize) -> Option<PerturbationSpec> {
    match cfg.dataset {
        DatasetKind::Canonical => None,
        DatasetKind::RotAug => Some(PerturbationSpec::rotation(0.0, 360.0, derive_seed(cfg.rot_seed, epoch as u64))),
        DatasetKind::AffineAug => {
            let spec = cfg.perturbation.to_spec();
            Some(PerturbationSpec { seed: derive_seed(spec.seed, epoch as u64), ..spec })
        }
    }
}

/// Validation images drawn from the same distribution as the training data
/// of `cfg.dataset`, with one fixed transform per sample.
pub fn matched_val<T: Scalar>(cfg: &ExperimentConfig, val: &MnistSet<T>) -> Result<Tensor<T>> {
    let spec = match cfg.dataset {
        DatasetKind::Canonical => return Ok(val.images.clone()),
        DatasetKind::RotAug => PerturbationSpec::rotation(0.0, 360.0, derive_seed(cfg.rot_seed, VAL_PERTURB_SALT)),
        DatasetKind::AffineAug => {
            let spec = cfg.perturbation.to_spec();
            PerturbationSpec { seed: derive_seed(spec.seed, VAL_PERTURB_SALT), ..spec }
        }
    };
    Ok(data::perturb_indexed(&val.images, &val.indices, &spec)?.0)
}

/// Standard-normal latent noise, one independent stream per stable sample
/// index, so a sample sees the same noise in every evaluation.
pub fn eval_noise<T: Scalar>(seed: u64, indices: &[usize], latent: usize) -> Tensor<T> {
    let base = derive_seed(seed, NOISE_SALT);
    let mut values = Vec::with_capacity(indices.len() * latent);
    for &i in indices {
        let mut rng = data::sample_rng(base, i);
        values.extend((0..latent).map(|_| T::sample_normal(&mut rng)));
    }
    Tensor::new(&[indices.len(), latent], values).expect("noise shape")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleEval {
    pub loss: LossReport,
    /// Fitted transform; the identity when fitting is off.
    pub alpha: AffineParams,
}

/// The fit used at evaluation time: off for `vae`, `cfg.fit` otherwise.
pub fn eval_fit(cfg: &ExperimentConfig) -> Result<Option<FitConfig>> {
    match cfg.mode {
        ModelMode::Vae => Ok(None),
        ModelMode::Avae | ModelMode::AvaeTransopt => Ok(Some(cfg.fit.to_fit()?)),
    }
}

/// Per-sample eval-mode loss of `x`, with the plain VAE (`fit` off) or after
/// a per-sample transform fit. Chunks of [`EVAL_CHUNK`] samples run on all
/// available cores; random restarts draw from a stream per chunk.
pub fn evaluate<T: Scalar>(
    model: &VaeModel<T>,
    x: &Tensor<T>,
    noise: &Tensor<T>,
    fit: Option<&FitConfig>,
    seed: u64,
) -> Result<Vec<SampleEval>> {
    let n = x.shape()[0];
    let chunks: Vec<(usize, usize)> = (0..n).step_by(EVAL_CHUNK).map(|s| (s, (s + EVAL_CHUNK).min(n))).collect();
    let fit_seed = derive_seed(seed, FIT_SALT);
    let run = |k: usize| -> Result<Vec<SampleEval>> {
        let (s, e) = chunks[k];
        let (xc, nc) = (x.slice_outer(s, e), noise.slice_outer(s, e));
        Ok(match fit {
            None => {
                let identity = AffineParams::identity(AffineMode::RotationOnly);
                vae_eval(model, &xc, &nc)?.1.into_iter().map(|loss| SampleEval { loss, alpha: identity }).collect()
            }
            Some(f) => {
                let mut rng = data::sample_rng(fit_seed, k);
                fitting::fit_transform(model, &xc, &nc, f, None, &mut rng)?
                    .into_iter()
                    .map(|t| SampleEval { loss: t.loss, alpha: t.alpha_star })
                    .collect()
            }
        })
    };

    let threads = std::thread::available_parallelism().map_or(1, |t| t.get()).min(chunks.len()).max(1);
    let mut results: Vec<Option<Result<Vec<SampleEval>>>> = (0..chunks.len()).map(|_| None).collect();
    if threads == 1 {
        for (k, r) in results.iter_mut().enumerate() {
            *r = Some(run(k));
        }
    } else {
        std::thread::scope(|scope| {
            let (run, count) = (&run, chunks.len());
            let workers: Vec<_> = (0..threads)
                .map(|t| scope.spawn(move || (t..count).step_by(threads).map(|k| (k, run(k))).collect::<Vec<_>>()))
                .collect();
            for w in workers {
                for (k, r) in w.join().expect("evaluation worker panicked") {
                    results[k] = Some(r);
                }
            }
        });
    }
    let mut out = Vec::with_capacity(n);
    for r in results {
        out.extend(r.expect("every chunk evaluated")?);
    }
    Ok(out)
}

pub fn mean_loss(evals: &[SampleEval]) -> LossReport {
    LossReport::mean(&evals.iter().map(|e| e.loss).collect::<Vec<_>>())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training-mode loss over the epoch's batches.
    pub train: LossReport,
    /// Eval-mode loss on validation data matched to the training
    /// distribution, fit off.
    pub val: LossReport,
}

/// Fitted rotation of one training sample at the end of an epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleSnapshot {
    pub epoch: usize,
    pub index: usize,
    pub label: u8,
    /// Rotation of the augmentation applied this epoch, degrees in [0, 360).
    pub applied_deg: f64,
    /// Rotation of the cached fit on the augmented image.
    pub fit_deg: f64,
    /// Rotation of augmentation followed by fit, i.e. the pose at which the
    /// model sees the original digit.
    pub canonical_deg: f64,
}

pub struct TrainOutcome<T> {
    pub model: VaeModel<T>,
    pub epochs: Vec<EpochRecord>,
    pub snapshots: Vec<AngleSnapshot>,
    pub rng: RngState,
    pub final_val: LossReport,
}

fn compose(a: &AffineParams, b: &AffineParams) -> AffineParams {
    let (p, q) = (a.to_homogeneous(), b.to_homogeneous());
    let m = |i: usize, j: usize| (0..3).map(|k| p[i][k] * q[k][j]).sum::<f64>();
    AffineParams::Full6([m(0, 0), m(0, 1), m(0, 2), m(1, 0), m(1, 1), m(1, 2)])
}

/// Re-expresses cached fits after the augmentation changed from `prev` to
/// `now`. Fits compose with the augmentation, so for rotations the cached
/// transform is rotated by the difference. Other augmentations clear the
/// cache and the affected samples restart.
fn remap_cache(cache: &mut AlphaCache, prev: &[AffineParams], now: &[AffineParams]) -> Result<()> {
    let rotations = prev.iter().chain(now).all(|a| a.mode() == AffineMode::RotationOnly);
    if !rotations {
        *cache = AlphaCache::new(cache.len(), cache.mode);
        return Ok(());
    }
    for i in 0..cache.len() {
        if let Some(a) = cache.get(i) {
            cache.set(i, a.rotated_by(prev[i].rotation_angle() - now[i].rotation_angle()))?;
        }
    }
    Ok(())
}

fn snapshot_angles<T: Scalar>(epoch: usize, train: &MnistSet<T>, applied: Option<&[AffineParams]>, cache: &AlphaCache) -> Vec<AngleSnapshot> {
    let identity = AffineParams::identity(AffineMode::RotationOnly);
    (0..train.len())
        .filter_map(|r| {
            let fit = cache.get(r)?;
            let aug = applied.map_or(identity, |a| a[r]);
            Some(AngleSnapshot {
                epoch,
                index: train.indices[r],
                label: train.labels[r],
                applied_deg: deg(aug.rotation_angle()),
                fit_deg: deg(fit.rotation_angle()),
                canonical_deg: deg(compose(&aug, &fit).rotation_angle()),
            })
        })
        .collect()
}

/// Trains a fresh model as configured. `val` is scored after every epoch;
/// `on_epoch` sees each record with the model and rng state after it.
pub fn train<T: Scalar>(
    cfg: &ExperimentConfig,
    train: &MnistSet<T>,
    val: &Tensor<T>,
    val_indices: &[usize],
    mut on_epoch: impl FnMut(&EpochRecord, &VaeModel<T>, &RngState) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model_cfg = cfg.vae_config();
    if cfg.normalize {
        model_cfg.input_norm = Some(train.mean_std());
    }
    let mut model = VaeModel::new(model_cfg, &mut rng)?;
    let mut opt = OptimizerState::adam(cfg.lr, cfg.wd);
    let tc = TrainConfig { epochs: 1, batch_size: cfg.batch };
    let val_noise = eval_noise(cfg.seed, val_indices, cfg.latent);
    let transopt = cfg.mode == ModelMode::AvaeTransopt;
    let fit = cfg.train_fit.to_fit()?;
    let mut cache = AlphaCache::new(train.len(), fit.mode);
    let mut prev_applied: Option<Vec<AffineParams>> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut snapshots = Vec::new();

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let (augmented, applied) = match augmentation(cfg, epoch) {
            Some(spec) => {
                let (x, a) = data::perturb_indexed(&train.images, &train.indices, &spec)?;
                (Some(x), Some(a))
            }
            None => (None, None),
        };
        let x = augmented.as_ref().unwrap_or(&train.images);
        let log = if transopt {
            if let (Some(prev), Some(now)) = (&prev_applied, &applied) {
                remap_cache(&mut cache, prev, now)?;
            }
            fitting::train_transform_opt(&mut model, x, &tc, &mut opt, &fit, &mut cache, &mut rng, |_, _, _| {})?
        } else {
            fitting::train_vanilla(&mut model, x, &tc, &mut opt, &mut rng, |_, _| {})?
        };
        let val_loss = mean_loss(&evaluate(&model, val, &val_noise, None, cfg.seed)?);
        let record = EpochRecord { epoch, train: log.epochs[0].loss, val: val_loss };
        if transopt {
            snapshots.extend(snapshot_angles(epoch, train, applied.as_deref(), &cache));
        }
        note(
            cfg,
            format_args!(
                "epoch {epoch}/{}: train {:.2} val {:.2} ({:.1} s)",
                cfg.epochs,
                record.train.total,
                record.val.total,
                start.elapsed().as_secs_f64()
            ),
        );
        on_epoch(&record, &model, &RngState::capture(&rng))?;
        epochs.push(record);
        prev_applied = applied;
    }
    let final_val = match epochs.last() {
        Some(r) => r.val,
        None => mean_loss(&evaluate(&model, val, &val_noise, None, cfg.seed)?),
    };
    Ok(TrainOutcome { model, epochs, snapshots, rng: RngState::capture(&rng), final_val })
}

fn config_header(doc: &mut CsvDoc, cfg: &ExperimentConfig) {
    doc.meta("config", &cfg.to_json()).meta("seed", &cfg.seed.to_string());
}

fn require_ckpt(cfg: &ExperimentConfig) -> Result<&Path> {
    cfg.ckpt.as_deref().ok_or_else(|| HarnessError::Missing("this command needs --ckpt".into()))
}

/// Trains and writes the checkpoint to `out` (after every epoch), the loss
/// log to `<out>.epochs.csv` and, for `avae-transopt`, the fitted angles to
/// `<out>.snapshots.csv` with per-epoch histograms in `<out>.angles.csv`.
pub fn cmd_train<T: Scalar>(cfg: &ExperimentConfig) -> Result<TrainOutcome<T>> {
    let train_set = load_train::<T>(cfg)?;
    let val = load_val::<T>(cfg)?;
    let val_x = matched_val(cfg, &val)?;
    note(cfg, format_args!("training {:?} on {} ({} train, {} val)", cfg.mode, cfg.dataset.name(), train_set.len(), val.len()));
    let outcome = train(cfg, &train_set, &val_x, &val.indices, |_, model, rng| checkpoint::save(&cfg.out, cfg, model, rng))?;
    checkpoint::save(&cfg.out, cfg, &outcome.model, &outcome.rng)?;

    let mut doc = CsvDoc::new(&["epoch", "train_total", "train_recon", "train_kl", "val_total"]);
    config_header(&mut doc, cfg);
    doc.meta("val_source", "t10k");
    for r in &outcome.epochs {
        doc.row([r.epoch.to_string(), r.train.total.to_string(), r.train.recon.to_string(), r.train.kl.to_string(), r.val.total.to_string()]);
    }
    doc.write(&sidecar(&cfg.out, ".epochs.csv"))?;

    if cfg.mode == ModelMode::AvaeTransopt {
        let mut doc = CsvDoc::new(&["epoch", "index", "label", "applied_deg", "fit_deg", "canonical_deg"]);
        config_header(&mut doc, cfg);
        for s in &outcome.snapshots {
            doc.row([
                s.epoch.to_string(),
                s.index.to_string(),
                s.label.to_string(),
                s.applied_deg.to_string(),
                s.fit_deg.to_string(),
                s.canonical_deg.to_string(),
            ]);
        }
        doc.write(&sidecar(&cfg.out, ".snapshots.csv"))?;
        write_histograms(&sidecar(&cfg.out, ".angles.csv"), cfg, &histogram_rows(&outcome.snapshots, &(0..10).collect::<Vec<_>>()))?;
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub angle_deg: f64,
    pub loss: LossReport,
    pub n: usize,
}

/// Mean loss of `val` rotated by each angle, fit off or on. Also returns the
/// per-sample evaluations, one vector per angle.
pub fn eval_sweep<T: Scalar>(
    model: &VaeModel<T>,
    val: &MnistSet<T>,
    angles_deg: &[f64],
    fit: Option<&FitConfig>,
    seed: u64,
    mut on_row: impl FnMut(&SweepRow),
) -> Result<(Vec<SweepRow>, Vec<Vec<SampleEval>>)> {
    let noise = eval_noise(seed, &val.indices, model.config.latent_size);
    let mut rows = Vec::with_capacity(angles_deg.len());
    let mut samples = Vec::with_capacity(angles_deg.len());
    for (k, &a) in angles_deg.iter().enumerate() {
        let x = affine::warp(&val.images, &AffineParams::rotation(a.to_radians()))?;
        let evals = evaluate(model, &x, &noise, fit, derive_seed(seed, k as u64))?;
        let row = SweepRow { angle_deg: a, loss: mean_loss(&evals), n: evals.len() };
        on_row(&row);
        rows.push(row);
        samples.push(evals);
    }
    Ok((rows, samples))
}

/// Rotation sweep of the checkpoint over `cfg.angles`, written to `out`.
pub fn cmd_eval_sweep<T: Scalar>(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>> {
    let ckpt_path = require_ckpt(cfg)?;
    let ckpt = checkpoint::load::<T>(ckpt_path)?;
    let val = load_val::<T>(cfg)?;
    let fit = eval_fit(cfg)?;
    let start = Instant::now();
    let (rows, _) = eval_sweep(&ckpt.model, &val, &cfg.angles.values(), fit.as_ref(), cfg.seed, |r| {
        note(cfg, format_args!("angle {:>5}: loss {:.2} ({:.0} s)", r.angle_deg, r.loss.total, start.elapsed().as_secs_f64()))
    })?;
    let mut doc = CsvDoc::new(&["angle_deg", "mean_total", "mean_recon", "mean_kl", "n"]);
    config_header(&mut doc, cfg);
    doc.meta("checkpoint", &ckpt_path.display().to_string())
        .meta("checkpoint_config", &ckpt.experiment.to_json())
        .meta("fit", if fit.is_some() { "on" } else { "off" })
        .meta("val_source", "t10k");
    for r in &rows {
        doc.row([r.angle_deg.to_string(), r.loss.total.to_string(), r.loss.recon.to_string(), r.loss.kl.to_string(), r.n.to_string()]);
    }
    doc.write(&cfg.out)?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentRow {
    pub latent: usize,
    pub dataset: DatasetKind,
    pub seed: u64,
    pub final_loss: f64,
}

/// Plain VAEs over `latent_sizes` x {canonical, rot-aug} x `seeds` seeds.
/// The final loss is the last epoch's validation loss on data matched to
/// the training distribution.
pub fn cmd_latent_sweep<T: Scalar>(cfg: &ExperimentConfig) -> Result<Vec<LatentRow>> {
    let train_set = load_train::<T>(cfg)?;
    let val = load_val::<T>(cfg)?;
    let mut rows = Vec::new();
    for &latent in &cfg.latent_sizes {
        for dataset in [DatasetKind::Canonical, DatasetKind::RotAug] {
            for s in 0..cfg.seeds {
                let mut run = cfg.clone();
                run.mode = ModelMode::Vae;
                run.latent = latent;
                run.dataset = dataset;
                run.seed = cfg.seed + s as u64;
                run.quiet = true;
                let val_x = matched_val(&run, &val)?;
                let start = Instant::now();
                let out = train(&run, &train_set, &val_x, &val.indices, |_, _, _| Ok(()))?;
                note(
                    cfg,
                    format_args!(
                        "latent {latent} {} seed {}: {:.2} ({:.0} s)",
                        dataset.name(),
                        run.seed,
                        out.final_val.total,
                        start.elapsed().as_secs_f64()
                    ),
                );
                rows.push(LatentRow { latent, dataset, seed: run.seed, final_loss: out.final_val.total });
            }
        }
    }
    let mut doc = CsvDoc::new(&["latent", "dataset", "final_loss"]);
    config_header(&mut doc, cfg);
    doc.meta("row_order", "latent, dataset, seed ascending from the configured seed");
    for r in &rows {
        doc.row([r.latent.to_string(), r.dataset.name().to_string(), r.final_loss.to_string()]);
    }
    doc.write(&cfg.out)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineEval {
    pub vae_mean: f64,
    pub avae_mean: f64,
    pub reduction_pct: f64,
    pub n: usize,
    pub vae: Vec<SampleEval>,
    pub avae: Vec<SampleEval>,
}

/// Plain and fitted loss of the same model on the same perturbed samples.
pub fn affine_eval<T: Scalar>(
    model: &VaeModel<T>,
    val: &MnistSet<T>,
    spec: &PerturbationSpec,
    fit: &FitConfig,
    seed: u64,
) -> Result<AffineEval> {
    let (x, _) = data::perturb_indexed(&val.images, &val.indices, spec)?;
    let noise = eval_noise(seed, &val.indices, model.config.latent_size);
    let vae = evaluate(model, &x, &noise, None, seed)?;
    let avae = evaluate(model, &x, &noise, Some(fit), seed)?;
    let (vae_mean, avae_mean) = (mean_loss(&vae).total, mean_loss(&avae).total);
    Ok(AffineEval { vae_mean, avae_mean, reduction_pct: 100.0 * (1.0 - avae_mean / vae_mean), n: vae.len(), vae, avae })
}

/// Validation images under `cfg.perturbation`, scored with and without the
/// fit; one summary row.
pub fn cmd_affine_eval<T: Scalar>(cfg: &ExperimentConfig) -> Result<AffineEval> {
    let ckpt_path = require_ckpt(cfg)?;
    let ckpt = checkpoint::load::<T>(ckpt_path)?;
    let val = load_val::<T>(cfg)?;
    let fit = cfg.fit.to_fit()?;
    let r = affine_eval(&ckpt.model, &val, &cfg.perturbation.to_spec(), &fit, cfg.seed)?;
    note(cfg, format_args!("vae {:.2} avae {:.2} reduction {:.2}%", r.vae_mean, r.avae_mean, r.reduction_pct));
    let mut doc = CsvDoc::new(&["vae_mean", "avae_mean", "reduction_pct", "n"]);
    config_header(&mut doc, cfg);
    doc.meta("checkpoint", &ckpt_path.display().to_string())
        .meta("checkpoint_config", &ckpt.experiment.to_json())
        .meta("val_source", "t10k");
    doc.row([r.vae_mean.to_string(), r.avae_mean.to_string(), r.reduction_pct.to_string(), r.n.to_string()]);
    doc.write(&cfg.out)?;
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircularStats {
    /// Circular mean in degrees, in `[0, 360 / fold)`.
    pub mean_deg: f64,
    /// Mean resultant length in `[0, 1]`.
    pub resultant_length: f64,
    pub n: usize,
}

/// Circular mean and concentration of angles multiplied by `fold`. A fold
/// of 2 identifies angles 180 degrees apart.
pub fn circular_stats(angles_deg: &[f64], fold: f64) -> CircularStats {
    let (s, c) = angles_deg.iter().fold((0.0, 0.0), |(s, c), a| {
        let (sa, ca) = (a * fold).to_radians().sin_cos();
        (s + sa, c + ca)
    });
    let n = angles_deg.len();
    let r = if n == 0 { 0.0 } else { s.hypot(c) / n as f64 };
    CircularStats { mean_deg: deg(s.atan2(c)) / fold, resultant_length: r, n }
}

/// Absolute difference of two angles in degrees, in `[0, 180]`.
pub fn angle_gap_deg(a: f64, b: f64) -> f64 {
    affine::angle_distance(a.to_radians(), b.to_radians()).to_degrees()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HistRow {
    pub epoch: usize,
    pub digit: u8,
    pub bin_lo_deg: u32,
    pub count: usize,
}

/// 10-degree histograms of the canonical angle per epoch and digit.
pub fn histogram_rows(snapshots: &[AngleSnapshot], digits: &[u8]) -> Vec<HistRow> {
    let bins = (360.0 / HIST_BIN_DEG) as usize;
    let mut epochs: Vec<usize> = snapshots.iter().map(|s| s.epoch).collect();
    epochs.sort_unstable();
    epochs.dedup();
    let mut rows = Vec::new();
    for &epoch in &epochs {
        for &digit in digits {
            let mut counts = vec![0usize; bins];
            for s in snapshots.iter().filter(|s| s.epoch == epoch && s.label == digit) {
                counts[((s.canonical_deg / HIST_BIN_DEG) as usize).min(bins - 1)] += 1;
            }
            rows.extend(counts.into_iter().enumerate().map(|(b, count)| HistRow {
                epoch,
                digit,
                bin_lo_deg: (b as f64 * HIST_BIN_DEG) as u32,
                count,
            }));
        }
    }
    rows
}

fn write_histograms(path: &Path, cfg: &ExperimentConfig, rows: &[HistRow]) -> Result<()> {
    let mut doc = CsvDoc::new(&["epoch", "digit", "bin_lo_deg", "count"]);
    config_header(&mut doc, cfg);
    doc.meta("angle", "canonical_deg: augmentation rotation followed by the fitted rotation");
    for r in rows {
        doc.row([r.epoch.to_string(), r.digit.to_string(), r.bin_lo_deg.to_string(), r.count.to_string()]);
    }
    doc.write(path)
}

pub fn read_snapshots(path: &Path) -> Result<Vec<AngleSnapshot>> {
    let table = io::read_csv(path)?;
    let cols = ["epoch", "index", "label", "applied_deg", "fit_deg", "canonical_deg"].map(|c| table.f64_column(c));
    let [epoch, index, label, applied, fit, canonical] = cols;
    let (epoch, index, label, applied, fit, canonical) = (epoch?, index?, label?, applied?, fit?, canonical?);
    Ok((0..epoch.len())
        .map(|i| AngleSnapshot {
            epoch: epoch[i] as usize,
            index: index[i] as usize,
            label: label[i] as u8,
            applied_deg: applied[i],
            fit_deg: fit[i],
            canonical_deg: canonical[i],
        })
        .collect())
}

/// Histograms of the fitted rotations saved by an `avae-transopt` training
/// run whose checkpoint is `cfg.ckpt`, for `cfg.digits`.
pub fn cmd_rotation_hist(cfg: &ExperimentConfig) -> Result<Vec<HistRow>> {
    let path = sidecar(require_ckpt(cfg)?, ".snapshots.csv");
    if !path.exists() {
        return Err(HarnessError::Missing(format!(
            "no angle snapshots at {}; train with --mode avae-transopt first",
            path.display()
        )));
    }
    let snaps = read_snapshots(&path)?;
    let rows = histogram_rows(&snaps, &cfg.digits);
    let mut epochs: Vec<usize> = snaps.iter().map(|s| s.epoch).collect();
    epochs.dedup();
    for &epoch in &epochs {
        for &digit in &cfg.digits {
            let angles: Vec<f64> = snaps.iter().filter(|s| s.epoch == epoch && s.label == digit).map(|s| s.canonical_deg).collect();
            let plain = circular_stats(&angles, 1.0);
            let folded = circular_stats(&angles, 2.0);
            note(
                cfg,
                format_args!(
                    "epoch {epoch} digit {digit}: n {} mean {:.1} R {:.3} folded R {:.3}",
                    plain.n, plain.mean_deg, plain.resultant_length, folded.resultant_length
                ),
            );
        }
    }
    write_histograms(&cfg.out, cfg, &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circular_statistics() {
        let s = circular_stats(&[350.0, 10.0], 1.0);
        assert!(s.mean_deg < 1e-9 || (360.0 - s.mean_deg) < 1e-9);
        assert!((s.resultant_length - 10f64.to_radians().cos()).abs() < 1e-12);
        let opposite = [30.0, 210.0, 30.0, 210.0];
        assert!(circular_stats(&opposite, 1.0).resultant_length < 1e-12);
        let folded = circular_stats(&opposite, 2.0);
        assert!((folded.resultant_length - 1.0).abs() < 1e-12);
        assert!((folded.mean_deg - 30.0).abs() < 1e-9);
        assert!((angle_gap_deg(10.0, 350.0) - 20.0).abs() < 1e-9);
    }

    #[test]
    fn histogram_counts_cover_every_sample() {
        let snaps: Vec<AngleSnapshot> = (0..50)
            .map(|i| AngleSnapshot {
                epoch: 1 + i % 2,
                index: i,
                label: (i % 3) as u8,
                applied_deg: 0.0,
                fit_deg: 0.0,
                canonical_deg: (i as f64 * 37.0) % 360.0,
            })
            .collect();
        let rows = histogram_rows(&snaps, &[0, 2]);
        assert_eq!(rows.len(), 2 * 2 * 36);
        let total: usize = rows.iter().map(|r| r.count).sum();
        assert_eq!(total, snaps.iter().filter(|s| s.label != 1).count());
    }

    #[test]
    fn rotation_remap_tracks_the_augmentation() {
        let mut cache = AlphaCache::new(2, AffineMode::RotationOnly);
        cache.set(0, AffineParams::rotation(0.5)).unwrap();
        let prev = [AffineParams::rotation(1.0), AffineParams::rotation(2.0)];
        let now = [AffineParams::rotation(0.25), AffineParams::rotation(0.0)];
        remap_cache(&mut cache, &prev, &now).unwrap();
        let AffineParams::RotationOnly { theta } = cache.get(0).unwrap() else { panic!() };
        // Canonical pose is unchanged: 1.0 + 0.5 = 0.25 + theta.
        assert!((theta - 1.25).abs() < 1e-12);
        assert!(cache.get(1).is_none());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }

    #[test]
    fn sidecar_appends() {
        assert_eq!(sidecar(Path::new("runs/a.ckpt"), ".epochs.csv"), PathBuf::from("runs/a.ckpt.epochs.csv"));
    }
}
