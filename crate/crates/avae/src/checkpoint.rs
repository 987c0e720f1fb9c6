//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "AVAE1"            magic
//! u32                format version
//! u8                 payload dtype: 0 = f32, 1 = f64
//! u32 + bytes        JSON header {"experiment": ..., "model": ...}
//! u32                tensor count, then per tensor:
//!   u16 + bytes      name (UTF-8)
//!   u8               rank
//!   u32 * rank       dims
//!   payload          numel values in the payload dtype
//! u32                batch-norm count, then per layer:
//!   u32              channels
//!   payload * 2      running mean, running variance
//! [u8; 32] u64 u128  rng seed, stream and word position
//! ```
//!
//! The payload dtype follows the model's precision, so a checkpoint reloads
//! bit-exactly in the precision it was written from.

use std::path::Path;

use avae_core::{DType, Scalar, Tensor, VaeConfig, VaeModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ModelSpec};
use crate::error::{HarnessError, Result};
use crate::io;

pub const MAGIC: &[u8; 5] = b"AVAE1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    experiment: ExperimentConfig,
    model: ModelSpec,
}

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub experiment: ExperimentConfig,
    pub model: VaeModel<T>,
    pub rng: RngState,
    /// Precision the payload was stored in.
    pub stored: DType,
}

fn put_values<T: Scalar>(out: &mut Vec<u8>, values: &[T]) {
    for v in values {
        match T::DTYPE {
            DType::F32 => out.extend((v.as_f64() as f32).to_le_bytes()),
            DType::F64 => out.extend(v.as_f64().to_le_bytes()),
        }
    }
}

pub fn encode<T: Scalar>(experiment: &ExperimentConfig, model: &VaeModel<T>, rng: &RngState) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend(VERSION.to_le_bytes());
    out.push(match T::DTYPE {
        DType::F32 => 0,
        DType::F64 => 1,
    });
    let header = Header { experiment: experiment.clone(), model: ModelSpec::from(&model.config) };
    let json = serde_json::to_vec(&header).expect("header serializes");
    out.extend((json.len() as u32).to_le_bytes());
    out.extend(json);
    out.extend((model.params().len() as u32).to_le_bytes());
    for (name, t) in model.param_names().iter().zip(model.params()) {
        out.extend((name.len() as u16).to_le_bytes());
        out.extend(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend((d as u32).to_le_bytes());
        }
        put_values(&mut out, t.data());
    }
    out.extend((model.batch_norms().len() as u32).to_le_bytes());
    for bn in model.batch_norms() {
        out.extend((bn.running_mean.len() as u32).to_le_bytes());
        put_values(&mut out, &bn.running_mean);
        put_values(&mut out, &bn.running_var);
    }
    out.extend(rng.seed);
    out.extend(rng.stream.to_le_bytes());
    out.extend(rng.word_pos.to_le_bytes());
    out
}

pub fn save<T: Scalar>(path: &Path, experiment: &ExperimentConfig, model: &VaeModel<T>, rng: &RngState) -> Result<()> {
    io::write_atomic(path, &encode(experiment, model, rng))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            HarnessError::checkpoint(self.path, format!("truncated at byte {} (need {n} more)", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn values<T: Scalar>(&mut self, dtype: DType, n: usize) -> Result<Vec<T>> {
        Ok(match dtype {
            DType::F32 => self.take(n * 4)?.chunks(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect(),
            DType::F64 => self.take(n * 8)?.chunks(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap()))).collect(),
        })
    }
}

/// Parses a checkpoint into a model of precision `T`, converting the payload
/// if it was stored in the other precision.
pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Checkpoint<T>> {
    let mut c = Cursor { bytes, at: 0, path };
    if c.take(MAGIC.len())? != MAGIC {
        return Err(HarnessError::checkpoint(path, "bad magic"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(HarnessError::checkpoint(path, format!("unsupported version {version}")));
    }
    let stored = match c.take(1)?[0] {
        0 => DType::F32,
        1 => DType::F64,
        t => return Err(HarnessError::checkpoint(path, format!("unknown dtype tag {t}"))),
    };
    let json_len = c.u32()? as usize;
    let header: Header = serde_json::from_slice(c.take(json_len)?)
        .map_err(|e| HarnessError::checkpoint(path, format!("header: {e}")))?;
    let config = VaeConfig::from(&header.model);
    // Parameters are overwritten below; the seed only fixes the shapes.
    let mut model = VaeModel::<T>::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;

    let count = c.u32()? as usize;
    if count != model.params().len() {
        return Err(HarnessError::checkpoint(path, format!("{count} tensors, architecture has {}", model.params().len())));
    }
    let mut params = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = u16::from_le_bytes(c.array()?) as usize;
        let name = std::str::from_utf8(c.take(name_len)?).map_err(|_| HarnessError::checkpoint(path, "name is not UTF-8"))?;
        if name != model.param_names()[i] {
            return Err(HarnessError::checkpoint(path, format!("tensor {i} is {name:?}, expected {:?}", model.param_names()[i])));
        }
        let rank = c.take(1)?[0] as usize;
        let dims = (0..rank).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().product();
        params.push(Tensor::new(&dims, c.values(stored, numel)?)?);
    }
    let bn_count = c.u32()? as usize;
    let mut running = Vec::with_capacity(bn_count);
    for _ in 0..bn_count {
        let ch = c.u32()? as usize;
        running.push((c.values(stored, ch)?, c.values(stored, ch)?));
    }
    model.load_state(params, running)?;
    model.set_mode(avae_core::Mode::Eval);
    let seed = c.array::<32>()?;
    let stream = u64::from_le_bytes(c.array()?);
    let word_pos = u128::from_le_bytes(c.array()?);
    if c.at != bytes.len() {
        return Err(HarnessError::checkpoint(path, format!("{} trailing bytes", bytes.len() - c.at)));
    }
    Ok(Checkpoint { experiment: header.experiment, model, rng: RngState { seed, stream, word_pos }, stored })
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    decode(&io::read_bytes(path)?, path)
}
