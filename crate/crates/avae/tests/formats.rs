//! File formats and the command line: IDX fixtures, checkpoints and
//! `#`-headed CSV output, driven against a small synthetic dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use avae::checkpoint::{self, RngState};
use avae::config::ExperimentConfig;
use avae::harness::{eval_noise, evaluate};
use avae::io::{self, read_csv};
use avae::HarnessError;
use avae_core::data::{parse_idx_images, parse_idx_labels, Split};
use avae_core::{IdxError, Tensor, VaeConfig, VaeModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn idx_images(count: usize, rows: usize, cols: usize, pixel: impl Fn(usize, usize, usize) -> u8) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [0x0803u32, count as u32, rows as u32, cols as u32] {
        out.extend(v.to_be_bytes());
    }
    for n in 0..count {
        for i in 0..rows {
            for j in 0..cols {
                out.push(pixel(n, i, j));
            }
        }
    }
    out
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend(0x0801u32.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend(labels);
    out
}

/// A bar through the center at an angle set by the label, so the data has a
/// pose to fit.
fn bar(n: usize, i: usize, j: usize) -> u8 {
    let theta = (n % 10) as f64 * 0.31;
    let (y, x) = (i as f64 - 13.5, j as f64 - 13.5);
    let across = (x * theta.sin() - y * theta.cos()).abs();
    let along = (x * theta.cos() + y * theta.sin()).abs();
    if across < 1.5 && along < 9.0 {
        255
    } else {
        0
    }
}

fn write_mnist(dir: &Path, train: usize, test: usize) {
    let labels = |n: usize| (0..n).map(|k| (k % 10) as u8).collect::<Vec<_>>();
    fs::write(dir.join(io::TRAIN_IMAGES), idx_images(train, 28, 28, bar)).unwrap();
    fs::write(dir.join(io::TRAIN_LABELS), idx_labels(&labels(train))).unwrap();
    fs::write(dir.join(io::TEST_IMAGES), idx_images(test, 28, 28, bar)).unwrap();
    fs::write(dir.join(io::TEST_LABELS), idx_labels(&labels(test))).unwrap();
}

#[test]
fn idx_valid_files_decode() {
    let bytes = idx_images(3, 28, 28, bar);
    let raw = parse_idx_images(&bytes).unwrap();
    assert_eq!((raw.count, raw.rows, raw.cols), (3, 28, 28));
    assert_eq!(raw.pixels[..], bytes[16..]);
    assert_eq!(parse_idx_labels(&idx_labels(&[7, 0, 9])).unwrap(), vec![7, 0, 9]);
    let empty = parse_idx_images(&idx_images(0, 28, 28, bar)).unwrap();
    assert_eq!(empty.count, 0);
}

#[test]
fn idx_invalid_headers_are_rejected() {
    let good = idx_images(2, 28, 28, bar);

    let mut magic = good.clone();
    magic[3] = 0x01;
    assert!(matches!(parse_idx_images(&magic), Err(IdxError::BadMagic { found: 0x0801, .. })));
    assert!(matches!(parse_idx_labels(&good), Err(IdxError::BadMagic { .. })));

    assert!(matches!(parse_idx_images(&good[..10]), Err(IdxError::Truncated { .. })));
    assert!(matches!(parse_idx_images(&good[..good.len() - 1]), Err(IdxError::Truncated { .. })));
    assert!(matches!(parse_idx_images(&[]), Err(IdxError::Truncated { .. })));

    let mut count = good.clone();
    count[7] = 5;
    assert!(matches!(parse_idx_images(&count), Err(IdxError::Truncated { .. })));
    let mut trailing = good.clone();
    trailing.push(0);
    assert!(matches!(parse_idx_images(&trailing), Err(IdxError::DimMismatch(_))));
    assert!(matches!(parse_idx_images(&idx_images(1, 0, 28, bar)), Err(IdxError::DimMismatch(_))));

    assert!(matches!(parse_idx_labels(&idx_labels(&[1, 10])), Err(IdxError::DimMismatch(_))));
    assert!(matches!(parse_idx_labels(&idx_labels(&[1, 2])[..9]), Err(IdxError::Truncated { .. })));
}

#[test]
fn label_count_must_match_images() {
    let dir = tempfile::tempdir().unwrap();
    write_mnist(dir.path(), 20, 10);
    fs::write(dir.path().join(io::TEST_LABELS), idx_labels(&[1; 9])).unwrap();
    let err = io::load_raw(dir.path(), Split::Val).unwrap_err();
    assert_eq!(err.kind(), "idx");
    let (raw, labels) = io::load_raw(dir.path(), Split::Train).unwrap();
    assert_eq!((raw.count, labels.len()), (20, 20));
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = VaeModel::<f32>::new(VaeConfig::with_latent(4), &mut rng).unwrap();
    let cfg = ExperimentConfig::desk("train");
    checkpoint::save(&path, &cfg, &model, &RngState::capture(&rng)).unwrap();
    let back = checkpoint::load::<f32>(&path).unwrap();
    assert_eq!(back.model.params(), model.params());
    assert_eq!(back.experiment, cfg);
    assert_eq!(checkpoint::encode(&back.experiment, &back.model, &back.rng), fs::read(&path).unwrap());

    let x = Tensor::from_fn(&[6, 1, 40, 40], |k| ((k * 31) % 17) as f32 / 16.0);
    let noise = eval_noise::<f32>(1, &[0, 1, 2, 3, 4, 5], 4);
    let a = evaluate(&model, &x, &noise, None, 1).unwrap();
    let b = evaluate(&back.model, &x, &noise, None, 1).unwrap();
    assert_eq!(a, b);

    let widened = checkpoint::load::<f64>(&path).unwrap();
    let exact: Vec<f64> = model.params().iter().flat_map(|p| p.data().iter().map(|&v| v as f64)).collect();
    let got: Vec<f64> = widened.model.params().iter().flat_map(|p| p.data().to_vec()).collect();
    assert_eq!(exact, got);
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let err = checkpoint::load::<f32>(Path::new("/nonexistent/m.ckpt")).unwrap_err();
    assert_eq!(err.kind(), "io");
    let line: serde_json::Value = serde_json::from_str(&err.to_json_line()).unwrap();
    assert_eq!(line["error"], "io");
}

fn avae<S: AsRef<str>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avae")).args(args.iter().map(AsRef::as_ref)).output().unwrap()
}

fn ok(args: &[String]) -> PathBuf {
    let out = avae(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    PathBuf::from(String::from_utf8(out.stdout).unwrap().trim())
}

fn last_json(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    serde_json::from_str(stderr.lines().last().unwrap()).unwrap()
}

/// Every CSV starts with the full configuration and the seed.
fn assert_headed(path: &Path, columns: &[&str]) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let first = lines.next().unwrap();
    let config: ExperimentConfig = serde_json::from_str(first.strip_prefix("# config: ").unwrap()).unwrap();
    assert!(text.lines().any(|l| l == format!("# seed: {}", config.seed)));
    let table = read_csv(path).unwrap();
    assert_eq!(table.columns, columns);
    assert!(!table.rows.is_empty());
}

#[test]
fn commands_write_headed_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("mnist");
    fs::create_dir(&data).unwrap();
    write_mnist(&data, 120, 40);
    let p = |name: &str| dir.path().join(name).display().to_string();
    let common = ["--data", data.to_str().unwrap(), "-q", "--train-n", "64", "--val-n", "16", "--latent", "2", "--batch", "32"];
    let cmd = |name: &str, extra: &[&str]| -> Vec<String> {
        [name].iter().chain(&common).chain(extra).map(|s| s.to_string()).collect()
    };

    let ckpt = p("t.ckpt");
    let args = cmd("train", &["--out", &ckpt, "--epochs", "2", "--mode", "avae-transopt", "--dataset", "rot-aug", "--train-fit-steps", "1", "--train-restarts", "2"]);
    assert_eq!(ok(&args), PathBuf::from(&ckpt));
    assert_headed(&checkpoint_sidecar(&ckpt, ".epochs.csv"), &["epoch", "train_total", "train_recon", "train_kl", "val_total"]);

    let sweep = p("sweep.csv");
    let sweep_args = cmd("eval-sweep", &["--out", &sweep, "--ckpt", &ckpt, "--mode", "avae", "--restarts", "2", "--fit-steps", "2", "--angles", "0:30:15"]);
    ok(&sweep_args);
    assert_headed(Path::new(&sweep), &["angle_deg", "mean_total", "mean_recon", "mean_kl", "n"]);
    let table = read_csv(Path::new(&sweep)).unwrap();
    assert_eq!(table.f64_column("angle_deg").unwrap(), vec![0.0, 15.0, 30.0]);
    assert_eq!(table.meta_value("fit"), Some("on"));
    let first = fs::read(&sweep).unwrap();
    ok(&sweep_args);
    assert_eq!(fs::read(&sweep).unwrap(), first, "sweeps are deterministic");

    let affine = p("affine.csv");
    ok(&cmd("affine-eval", &["--out", &affine, "--ckpt", &ckpt, "--restarts", "2", "--fit-steps", "2"]));
    assert_headed(Path::new(&affine), &["vae_mean", "avae_mean", "reduction_pct", "n"]);

    let hist = p("hist.csv");
    ok(&cmd("rotation-hist", &["--out", &hist, "--ckpt", &ckpt]));
    assert_headed(Path::new(&hist), &["epoch", "digit", "bin_lo_deg", "count"]);

    let latent = p("latent.csv");
    ok(&cmd("latent-sweep", &["--out", &latent, "--epochs", "1", "--latent-sizes", "2", "--seeds", "1"]));
    assert_headed(Path::new(&latent), &["latent", "dataset", "final_loss"]);
    assert_eq!(read_csv(Path::new(&latent)).unwrap().rows.len(), 2);
}

fn checkpoint_sidecar(ckpt: &str, suffix: &str) -> PathBuf {
    PathBuf::from(format!("{ckpt}{suffix}"))
}

#[test]
fn failures_end_with_a_json_error_line() {
    let bad_flag = avae(&["train", "--out", "/tmp/x", "--batch", "many"]);
    assert_eq!(bad_flag.status.code(), Some(2));
    assert_eq!(last_json(&bad_flag)["error"], "argument");

    let zero = avae(&["train", "--out", "/tmp/x", "--batch", "0"]);
    assert!(!zero.status.success());
    assert_eq!(last_json(&zero)["error"], "argument");

    let no_data = avae(&["train", "--out", "/tmp/x", "--data", "/nonexistent", "-q"]);
    assert!(!no_data.status.success());
    assert_eq!(last_json(&no_data)["error"], "io");

    let no_ckpt = avae(&["eval-sweep", "--out", "/tmp/x.csv", "-q"]);
    assert!(!no_ckpt.status.success());
    assert!(last_json(&no_ckpt)["message"].is_string());
}

#[test]
fn harness_errors_render_as_json() {
    let e = HarnessError::Argument("bad \"quote\"".into());
    let v: serde_json::Value = serde_json::from_str(&e.to_json_line()).unwrap();
    assert_eq!(v["error"], "argument");
    assert_eq!(v["message"], "invalid argument: bad \"quote\"");
}
