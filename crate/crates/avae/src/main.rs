//! `avae` command line.
//!
//! On failure the last line on stderr is a JSON object
//! `{"error": <kind>, "message": <text>}` and the exit code is nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use avae_core::avae::FitConfig;
use avae_core::Scalar;
use avae::config::{
    AlphaOptimizer, AngleRange, DatasetKind, ExperimentConfig, FitMode, FitSettings, ModelMode, RestartKind,
};
use avae::harness;
use avae::{HarnessError, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "avae", version, about = "Affine VAE experiments on MNIST")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes the checkpoint to --out plus CSV sidecars.
    Train(Flags),
    /// Loss of a checkpoint over rotated validation images.
    EvalSweep(Flags),
    /// Plain VAEs across latent sizes on canonical and rotated data.
    LatentSweep(Flags),
    /// Plain vs fitted loss under random affine perturbations.
    AffineEval(Flags),
    /// Histograms of fitted rotations saved by avae-transopt training.
    RotationHist(Flags),
}

#[derive(Args, Debug)]
struct Flags {
    /// Directory with the four MNIST IDX files.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Output path (checkpoint for `train`, CSV otherwise).
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Checkpoint to evaluate; for rotation-hist, the transopt run's checkpoint.
    #[arg(long, value_name = "PATH")]
    ckpt: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModelMode>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetKind>,
    #[arg(long, value_name = "N")]
    latent: Option<usize>,
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    batch: Option<usize>,
    #[arg(long, value_name = "F")]
    lr: Option<f64>,
    #[arg(long, value_name = "F")]
    wd: Option<f64>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Seed of the train/val subset selection.
    #[arg(long, value_name = "N")]
    data_seed: Option<u64>,
    #[arg(long, value_name = "N")]
    train_n: Option<usize>,
    #[arg(long, value_name = "N")]
    val_n: Option<usize>,
    /// Restart candidates of the test-time fit.
    #[arg(long, value_name = "N")]
    restarts: Option<usize>,
    /// Gradient steps of the test-time fit.
    #[arg(long, value_name = "N")]
    fit_steps: Option<usize>,
    #[arg(long, value_name = "F")]
    alpha_lr: Option<f64>,
    #[arg(long, value_enum)]
    fit_mode: Option<FitMode>,
    #[arg(long, value_enum)]
    restart_source: Option<RestartKind>,
    /// Grid rotations among the restarts when --restart-source mixed.
    #[arg(long, value_name = "N")]
    grid_rotations: Option<usize>,
    #[arg(long, value_name = "N")]
    survivors: Option<usize>,
    #[arg(long, value_enum)]
    alpha_optimizer: Option<AlphaOptimizer>,
    /// Gradient steps of the per-batch fit in avae-transopt training.
    #[arg(long, value_name = "N")]
    train_fit_steps: Option<usize>,
    /// Grid restarts of the per-batch fit in avae-transopt training.
    #[arg(long, value_name = "N")]
    train_restarts: Option<usize>,
    #[arg(long, value_name = "LO:HI:STEP")]
    angles: Option<AngleRange>,
    /// Rotation range in degrees of affine-aug data and affine-eval.
    #[arg(long, value_name = "LO:HI")]
    rotation: Option<String>,
    /// Largest shear in degrees of affine-aug data and affine-eval.
    #[arg(long, value_name = "DEG")]
    shear: Option<f64>,
    /// Largest fractional scale change of affine-aug data and affine-eval.
    #[arg(long, value_name = "F")]
    scale: Option<f64>,
    #[arg(long, value_name = "N")]
    perturb_seed: Option<u64>,
    /// Seed of the rot-aug rotations.
    #[arg(long, value_name = "N")]
    rot_seed: Option<u64>,
    /// Latent sizes of latent-sweep.
    #[arg(long, value_name = "N,N,..", value_delimiter = ',')]
    latent_sizes: Option<Vec<usize>>,
    /// Seeds per latent-sweep cell.
    #[arg(long, value_name = "N")]
    seeds: Option<usize>,
    /// Digits reported by rotation-hist.
    #[arg(long, value_name = "D,D,..", value_delimiter = ',')]
    digits: Option<Vec<u8>>,
    /// Full MNIST (60k train, 10k val, 30 epochs) instead of the 10k/2k subsets.
    #[arg(long)]
    full: bool,
    /// Double precision throughout.
    #[arg(long = "f64")]
    double: bool,
    /// Normalize encoder input by the training pixel mean and std.
    #[arg(long)]
    normalize: bool,
    /// No progress output.
    #[arg(long, short)]
    quiet: bool,
}

fn parse_range(s: &str) -> Result<(f64, f64)> {
    let bad = || HarnessError::Argument(format!("expected LO:HI, got {s:?}"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    Ok((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?))
}

fn build_config(name: &str, f: Flags) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::desk(name);
    if name == "affine-eval" {
        cfg.fit = FitSettings::from_fit(&FitConfig::affine());
    }
    if f.full {
        cfg.make_full();
    }
    cfg.out = f.out;
    cfg.ckpt = f.ckpt;
    cfg.f64 = f.double;
    cfg.normalize = f.normalize;
    cfg.quiet = f.quiet;
    let explicit_grid = f.grid_rotations.is_some();
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = f.$flag { cfg.$($field).+ = v; })*
        };
    }
    set!(
        data => data_dir, mode => mode, dataset => dataset, latent => latent, epochs => epochs, batch => batch,
        lr => lr, wd => wd, seed => seed, data_seed => data_seed, train_n => train_n, val_n => val_n,
        restarts => fit.restarts, fit_steps => fit.steps, alpha_lr => fit.lr_alpha, fit_mode => fit.mode,
        restart_source => fit.restart_source, grid_rotations => fit.grid_rotations, survivors => fit.survivors,
        alpha_optimizer => fit.optimizer, train_fit_steps => train_fit.steps, train_restarts => train_fit.restarts,
        angles => angles, shear => perturbation.shear, scale => perturbation.scale, perturb_seed => perturbation.seed,
        rot_seed => rot_seed, latent_sizes => latent_sizes, seeds => seeds, digits => digits,
    );
    if let Some(r) = f.rotation {
        (cfg.perturbation.rotation_lo, cfg.perturbation.rotation_hi) = parse_range(&r)?;
    }
    // Keep the grid consistent when only the restart count changes.
    match cfg.fit.restart_source {
        RestartKind::Grid => cfg.fit.grid_rotations = cfg.fit.restarts,
        _ if !explicit_grid => cfg.fit.grid_rotations = cfg.fit.grid_rotations.min(cfg.fit.restarts),
        _ => {}
    }
    if cfg.batch == 0 {
        return Err(HarnessError::Argument("--batch must be at least 1".into()));
    }
    if cfg.latent == 0 {
        return Err(HarnessError::Argument("--latent must be at least 1".into()));
    }
    if let Some(d) = cfg.digits.iter().find(|&&d| d > 9) {
        return Err(HarnessError::Argument(format!("digit {d} is not in 0..=9")));
    }
    cfg.fit.to_fit()?;
    cfg.train_fit.to_fit()?;
    cfg.perturbation.to_spec().validate()?;
    Ok(cfg)
}

fn run<T: Scalar>(cfg: &ExperimentConfig) -> Result<()> {
    match cfg.command.as_str() {
        "train" => {
            harness::cmd_train::<T>(cfg)?;
        }
        "eval-sweep" => {
            harness::cmd_eval_sweep::<T>(cfg)?;
        }
        "latent-sweep" => {
            harness::cmd_latent_sweep::<T>(cfg)?;
        }
        "affine-eval" => {
            harness::cmd_affine_eval::<T>(cfg)?;
        }
        "rotation-hist" => {
            harness::cmd_rotation_hist(cfg)?;
        }
        other => return Err(HarnessError::Argument(format!("unknown command {other}"))),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let _ = e.print();
            eprintln!("{}", HarnessError::Argument(e.kind().to_string()).to_json_line());
            return ExitCode::from(2);
        }
    };
    let (name, flags) = match cli.command {
        Command::Train(f) => ("train", f),
        Command::EvalSweep(f) => ("eval-sweep", f),
        Command::LatentSweep(f) => ("latent-sweep", f),
        Command::AffineEval(f) => ("affine-eval", f),
        Command::RotationHist(f) => ("rotation-hist", f),
    };
    let result = build_config(name, flags).and_then(|cfg| {
        if cfg.f64 {
            run::<f64>(&cfg)
        } else {
            run::<f32>(&cfg)
        }
        .map(|()| cfg)
    });
    match result {
        Ok(cfg) => {
            println!("{}", cfg.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::FAILURE
        }
    }
}
