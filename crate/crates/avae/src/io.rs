//! File access: IDX loading, atomic writes and `#`-headed CSV files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use avae_core::data::{self, IdxImages, MnistSet, Split};
use avae_core::Scalar;

use crate::error::{HarnessError, Result};

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| HarnessError::io(path, e))
}

pub fn load_idx_images(path: &Path) -> Result<IdxImages> {
    data::parse_idx_images(&read_bytes(path)?).map_err(|source| HarnessError::Idx { path: path.into(), source })
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    data::parse_idx_labels(&read_bytes(path)?).map_err(|source| HarnessError::Idx { path: path.into(), source })
}

/// Raw images and labels of one MNIST split from the standard file names
/// under `dir`. `Split::Train` reads the 60k file, `Split::Val` the 10k test
/// file.
pub fn load_raw(dir: &Path, split: Split) -> Result<(IdxImages, Vec<u8>)> {
    let (img, lab) = match split {
        Split::Train => (TRAIN_IMAGES, TRAIN_LABELS),
        Split::Val => (TEST_IMAGES, TEST_LABELS),
    };
    let raw = load_idx_images(&dir.join(img))?;
    let labels = load_idx_labels(&dir.join(lab))?;
    if labels.len() != raw.count {
        return Err(HarnessError::Idx {
            path: dir.join(lab),
            source: avae_core::IdxError::DimMismatch(format!("{} labels for {} images", labels.len(), raw.count)),
        });
    }
    Ok((raw, labels))
}

/// Rows `rows` of a raw split, padded to 40x40. Stable indices are the rows
/// in the source file.
pub fn select_rows<T: Scalar>(raw: &IdxImages, labels: &[u8], rows: &[usize], split: Split) -> Result<MnistSet<T>> {
    let size = raw.rows * raw.cols;
    let mut pixels = Vec::with_capacity(rows.len() * size);
    for &r in rows {
        pixels.extend_from_slice(&raw.pixels[r * size..(r + 1) * size]);
    }
    let sub = IdxImages { count: rows.len(), rows: raw.rows, cols: raw.cols, pixels };
    let mut set = MnistSet::new(data::preprocess(&sub)?, rows.iter().map(|&r| labels[r]).collect(), split)?;
    set.indices = rows.to_vec();
    Ok(set)
}

/// A whole MNIST split, padded to 40x40.
pub fn load_mnist<T: Scalar>(dir: &Path, split: Split) -> Result<MnistSet<T>> {
    let (raw, labels) = load_raw(dir, split)?;
    let rows: Vec<usize> = (0..raw.count).collect();
    select_rows(&raw, &labels, &rows, split)
}

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| HarnessError::io(path, e))?;
    tmp.persist(path).map_err(|e| HarnessError::io(path, e.error))?;
    Ok(())
}

/// A CSV document with `#` metadata lines ahead of the column header.
pub struct CsvDoc {
    meta: Vec<String>,
    writer: csv::Writer<Vec<u8>>,
}

impl CsvDoc {
    pub fn new(columns: &[&str]) -> Self {
        let mut writer = csv::Writer::from_writer(Vec::new());
        writer.write_record(columns).expect("in-memory write");
        Self { meta: Vec::new(), writer }
    }

    /// Adds a `# key: value` line. Values must be single-line.
    pub fn meta(&mut self, key: &str, value: &str) -> &mut Self {
        self.meta.push(format!("# {key}: {}", value.replace('\n', " ")));
        self
    }

    pub fn row<I, S>(&mut self, fields: I) -> &mut Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields).expect("in-memory write");
        self
    }

    pub fn to_bytes(self) -> Vec<u8> {
        let mut out = Vec::new();
        for m in &self.meta {
            out.extend_from_slice(m.as_bytes());
            out.push(b'\n');
        }
        out.extend(self.writer.into_inner().expect("in-memory flush"));
        out
    }

    pub fn write(self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }
}

/// Parsed CSV: metadata lines (without `# `) and string records.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub meta: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Metadata value for `key`, from a `# key: value` line.
    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find_map(|m| m.strip_prefix(key).and_then(|r| r.strip_prefix(": ")))
    }

    pub fn f64_column(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column(name).ok_or_else(|| HarnessError::Missing(format!("column {name}")))?;
        self.rows
            .iter()
            .map(|r| r[c].parse().map_err(|_| HarnessError::Argument(format!("{name}: not a number: {}", r[c]))))
            .collect()
    }
}

pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let meta = text.lines().take_while(|l| l.starts_with('#')).map(|l| l.trim_start_matches('#').trim().to_string()).collect();
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let csv_err = |source| HarnessError::Csv { path: path.into(), source };
    let columns = reader.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let rows = reader
        .records()
        .map(|r| r.map(|rec| rec.iter().map(String::from).collect()).map_err(csv_err))
        .collect::<Result<_>>()?;
    Ok(CsvTable { meta, columns, rows })
}
