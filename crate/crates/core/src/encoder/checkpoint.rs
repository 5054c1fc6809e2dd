//! Binary checkpoint: magic, version, JSON config, step counter, RNG seed,
//! then length-prefixed named tensors of little-endian `f32`.

use std::path::Path;

use super::tensor::Mat;
use super::{Model, ModelConfig, ModelError, ModelParameters};

const MAGIC: &[u8; 8] = b"EHRTCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
    /// All randomness is derived from this seed and the step counter.
    pub rng_seed: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.model.config).expect("config serializes");
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng_seed.to_le_bytes());
        let named = self.model.params.named();
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, m) in named {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols as u32).to_le_bytes());
            for &x in &m.data {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let cfg_len = r.u32()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
            .map_err(|e| corrupt(format!("config: {e}")))?;
        config.validate()?;
        let step = r.u64()?;
        let rng_seed = r.u64()?;
        let count = r.u32()? as usize;

        let mut params = ModelParameters::zeros(&config);
        let expected: Vec<(String, usize, usize)> = params
            .named()
            .into_iter()
            .map(|(n, m)| (n, m.rows, m.cols))
            .collect();
        if count != expected.len() {
            return Err(corrupt(format!(
                "{count} tensors, expected {}",
                expected.len()
            )));
        }
        for ((name, rows, cols), (_, slot)) in expected.into_iter().zip(params.named_mut()) {
            let name_len = r.u32()? as usize;
            let got = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?;
            if got != name {
                return Err(corrupt(format!("tensor {got:?}, expected {name:?}")));
            }
            let (gr, gc) = (r.u32()? as usize, r.u32()? as usize);
            if (gr, gc) != (rows, cols) {
                return Err(corrupt(format!("{name}: {gr}x{gc}, config implies {rows}x{cols}")));
            }
            let raw = r.take(rows * cols * 4)?;
            *slot = Mat::from_vec(
                rows,
                cols,
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            );
        }
        if r.pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if !params.is_finite() {
            return Err(corrupt("non-finite parameter"));
        }
        Ok(Self {
            model: Model { config, params },
            step,
            rng_seed,
        })
    }
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::CorruptCheckpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a checkpoint; with `expected` set, its config must match exactly.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint, ModelError> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    if let Some(want) = expected {
        if &ckpt.model.config != want {
            return Err(ModelError::ConfigMismatch(format!(
                "{} has {:?}, expected {:?}",
                path.display(),
                ckpt.model.config,
                want
            )));
        }
    }
    Ok(ckpt)
}
