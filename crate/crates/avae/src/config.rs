//! Experiment configuration shared by the CLI, output headers and
//! checkpoints.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use avae_core::avae::{FitConfig, Jitter, RestartSource};
use avae_core::data::PerturbationSpec;
use avae_core::{AffineMode, OptimizerKind, VaeConfig};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelMode {
    /// Plain VAE; evaluation without affine fitting.
    Vae,
    /// VAE trained plainly, evaluated with affine fitting.
    Avae,
    /// Affine fit before every training step, evaluated with fitting.
    AvaeTransopt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Canonical,
    /// Each training image rotated once by a uniform angle in [0, 360).
    RotAug,
    /// Each training image under a random rotation, shear and scaling.
    AffineAug,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Canonical => "canonical",
            DatasetKind::RotAug => "rot-aug",
            DatasetKind::AffineAug => "affine-aug",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FitMode {
    Rotation,
    /// Rotation, log-scale, shear and translation.
    Rsst,
    Full6,
}

impl From<FitMode> for AffineMode {
    fn from(m: FitMode) -> Self {
        match m {
            FitMode::Rotation => AffineMode::RotationOnly,
            FitMode::Rsst => AffineMode::RotScaleShearTranslate,
            FitMode::Full6 => AffineMode::Full6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum RestartKind {
    Grid,
    Random,
    /// Grid rotations first, random starts for the rest.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaOptimizer {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub mode: FitMode,
    pub restarts: usize,
    pub restart_source: RestartKind,
    /// Grid rotations when `restart_source` is mixed.
    pub grid_rotations: usize,
    pub steps: usize,
    pub lr_alpha: f64,
    pub survivors: usize,
    pub optimizer: AlphaOptimizer,
}

impl FitSettings {
    pub fn from_fit(cfg: &FitConfig) -> Self {
        let (restart_source, restarts, grid_rotations) = match cfg.restart_source {
            RestartSource::RotationGrid | RestartSource::Cached => (RestartKind::Grid, cfg.restarts, cfg.restarts),
            RestartSource::CachedThenGrid { rotations } => (RestartKind::Grid, rotations, rotations),
            RestartSource::RandomNearIdentity => (RestartKind::Random, cfg.restarts, 1),
            RestartSource::Mixed { rotations } => (RestartKind::Mixed, cfg.restarts, rotations),
        };
        Self {
            mode: match cfg.mode {
                AffineMode::RotationOnly => FitMode::Rotation,
                AffineMode::RotScaleShearTranslate => FitMode::Rsst,
                AffineMode::Full6 => FitMode::Full6,
            },
            restarts,
            restart_source,
            grid_rotations,
            steps: cfg.steps,
            lr_alpha: cfg.lr_alpha,
            survivors: cfg.survivors,
            optimizer: match cfg.optimizer {
                OptimizerKind::Sgd => AlphaOptimizer::Sgd,
                OptimizerKind::Adam { .. } => AlphaOptimizer::Adam,
            },
        }
    }

    pub fn to_fit(&self) -> Result<FitConfig> {
        let cfg = FitConfig {
            mode: self.mode.into(),
            restarts: self.restarts,
            restart_source: match self.restart_source {
                RestartKind::Grid => RestartSource::RotationGrid,
                RestartKind::Random => RestartSource::RandomNearIdentity,
                RestartKind::Mixed => RestartSource::Mixed { rotations: self.grid_rotations },
            },
            steps: self.steps,
            lr_alpha: self.lr_alpha,
            survivors: self.survivors,
            optimizer: match self.optimizer {
                AlphaOptimizer::Adam => OptimizerKind::adam(),
                AlphaOptimizer::Sgd => OptimizerKind::Sgd,
            },
            jitter: Jitter::default(),
            chunk: 128,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Inclusive angle grid in degrees, written `LO:HI:STEP`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleRange {
    pub lo: f64,
    pub hi: f64,
    pub step: f64,
}

impl AngleRange {
    pub fn values(&self) -> Vec<f64> {
        let n = ((self.hi - self.lo) / self.step + 1e-9).floor() as usize;
        (0..=n).map(|i| self.lo + i as f64 * self.step).collect()
    }
}

impl Default for AngleRange {
    fn default() -> Self {
        Self { lo: 0.0, hi: 180.0, step: 15.0 }
    }
}

impl FromStr for AngleRange {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || HarnessError::Argument(format!("angles must be LO:HI:STEP, got {s:?}"));
        let parts: Vec<f64> = s.split(':').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
        let [lo, hi, step] = parts[..] else { return Err(bad()) };
        if !lo.is_finite() || !hi.is_finite() || step.is_nan() || step <= 0.0 || hi < lo {
            return Err(bad());
        }
        Ok(Self { lo, hi, step })
    }
}

impl fmt::Display for AngleRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.lo, self.hi, self.step)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSettings {
    pub rotation_lo: f64,
    pub rotation_hi: f64,
    pub shear: f64,
    pub scale: f64,
    pub seed: u64,
}

impl PerturbSettings {
    pub fn to_spec(&self) -> PerturbationSpec {
        PerturbationSpec { rotation: (self.rotation_lo, self.rotation_hi), shear: self.shear, scale: self.scale, seed: self.seed }
    }

    pub fn from_spec(s: &PerturbationSpec) -> Self {
        Self { rotation_lo: s.rotation.0, rotation_hi: s.rotation.1, shear: s.shear, scale: s.scale, seed: s.seed }
    }
}

/// Everything that determines an experiment's output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub command: String,
    pub data_dir: PathBuf,
    pub out: PathBuf,
    pub ckpt: Option<PathBuf>,
    pub mode: ModelMode,
    pub dataset: DatasetKind,
    pub latent: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub wd: f64,
    pub seed: u64,
    /// Seed of the train/val subset selection.
    pub data_seed: u64,
    pub train_n: usize,
    /// Validation images, drawn from the 10k test file.
    pub val_n: usize,
    pub full: bool,
    pub f64: bool,
    /// Encoder input normalized by the training pixel mean and std.
    pub normalize: bool,
    /// Test-time fit used by evaluation commands.
    pub fit: FitSettings,
    /// Per-batch fit of `avae-transopt` training. After a sample's first fit,
    /// its grid restarts are screened next to the cached transform.
    pub train_fit: FitSettings,
    /// Affine perturbation used by `affine-aug` data and `affine-eval`.
    pub perturbation: PerturbSettings,
    /// Seed of the one-off rotations of `rot-aug` data.
    pub rot_seed: u64,
    pub angles: AngleRange,
    pub latent_sizes: Vec<usize>,
    pub seeds: usize,
    pub digits: Vec<u8>,
    #[serde(skip)]
    pub quiet: bool,
}

impl ExperimentConfig {
    /// Small-scale defaults: 10k train / 2k val, 15 epochs.
    pub fn desk(command: &str) -> Self {
        Self {
            command: command.to_string(),
            data_dir: PathBuf::from("data/mnist"),
            out: PathBuf::from("out.csv"),
            ckpt: None,
            mode: ModelMode::Vae,
            dataset: DatasetKind::Canonical,
            latent: 8,
            epochs: 15,
            batch: 256,
            lr: 0.001,
            wd: 0.0005,
            seed: 0,
            data_seed: 0,
            train_n: 10_000,
            val_n: 2_000,
            full: false,
            f64: false,
            normalize: false,
            fit: FitSettings::from_fit(&FitConfig::rotation()),
            train_fit: FitSettings::from_fit(&FitConfig::training()),
            perturbation: PerturbSettings::from_spec(&PerturbationSpec::affine_suite(1)),
            rot_seed: 2,
            angles: AngleRange::default(),
            latent_sizes: vec![2, 8, 32],
            seeds: 3,
            digits: vec![1, 6, 9],
            quiet: false,
        }
    }

    /// Full MNIST: 60k train / 10k val, 30 epochs.
    pub fn make_full(&mut self) {
        self.full = true;
        self.train_n = 60_000;
        self.val_n = 10_000;
        self.epochs = 30;
    }

    pub fn vae_config(&self) -> VaeConfig {
        VaeConfig::with_latent(self.latent)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

/// Serializable mirror of the core model configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub latent_size: usize,
    pub encoder_channels: [usize; 4],
    pub decoder_channels: [usize; 4],
    pub input_hw: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub input_norm: Option<(f64, f64)>,
}

impl From<&VaeConfig> for ModelSpec {
    fn from(c: &VaeConfig) -> Self {
        Self {
            latent_size: c.latent_size,
            encoder_channels: c.encoder_channels,
            decoder_channels: c.decoder_channels,
            input_hw: c.input_hw,
            kernel: c.kernel,
            stride: c.stride,
            padding: c.padding,
            bn_momentum: c.bn_momentum,
            bn_eps: c.bn_eps,
            input_norm: c.input_norm,
        }
    }
}

impl From<&ModelSpec> for VaeConfig {
    fn from(s: &ModelSpec) -> Self {
        VaeConfig {
            latent_size: s.latent_size,
            encoder_channels: s.encoder_channels,
            decoder_channels: s.decoder_channels,
            input_hw: s.input_hw,
            kernel: s.kernel,
            stride: s.stride,
            padding: s.padding,
            bn_momentum: s.bn_momentum,
            bn_eps: s.bn_eps,
            input_norm: s.input_norm,
        }
    }
}
