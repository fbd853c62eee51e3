//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "VWGN" | version: u16 | meta_len: u32 | meta: JSON bytes
//!        | count: u32 | count x (name_len: u32 | name | rank: u32 | dims: rank x u32 | f32 data)
//! ```

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::models::{Decoder, Encoder, ModelConfig};
use crate::nn::Module;
use crate::trainer::TrainConfig;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VWGN";
pub const FORMAT_VERSION: u16 = 1;

/// Counters and stream positions needed to resume a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Global step count.
    pub step: u64,
    /// Steps already taken inside the current epoch.
    pub step_in_epoch: usize,
    pub perceptual_classes: usize,
    /// Noise-stream position, as a decimal string (u128 does not fit JSON numbers).
    pub noise_word_pos: String,
    pub adam_steps: [u64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub arrays: Vec<(String, ArrayD<f32>)>,
}

impl Checkpoint {
    pub fn array(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Copies every parameter of `module` from the array with the same name.
    pub fn load_into(&self, module: &mut dyn Module) -> Result<()> {
        for p in module.params_mut() {
            let src = self
                .array(&p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint has no array named {:?}", p.name)))?;
            if src.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "array {:?}: checkpoint shape {:?}, model expects {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value.assign(src);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        let mut out = Vec::with_capacity(meta.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, a) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
            for &d in a.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in a.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic bytes {magic:?}, expected \"VWGN\"")));
        }
        let version = u16::from_le_bytes(r.take(2, "format version")?.try_into().expect("2 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta_at = r.pos;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| Error::Corrupt {
            offset: meta_at as u64,
            msg: format!("metadata: {e}"),
        })?;
        let count = r.u32("array count")?;
        let mut arrays = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name_at = r.pos;
            let name = String::from_utf8(r.take(name_len, "array name")?.to_vec()).map_err(|_| Error::Corrupt {
                offset: name_at as u64,
                msg: "array name is not utf-8".into(),
            })?;
            let rank = r.u32("rank")? as usize;
            let dims = (0..rank).map(|_| r.u32("dimension").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            let raw = r.take(len * 4, "array data")?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let a = ArrayD::from_shape_vec(IxDyn(&dims), data).expect("length matches dims");
            arrays.push((name, a));
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt {
                offset: r.pos as u64,
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Checkpoint { meta, arrays })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Corrupt {
                offset: self.pos as u64,
                msg: format!(
                    "truncated while reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Encoder stored in `ckpt`, in eval-ready form.
pub fn encoder_from(ckpt: &Checkpoint) -> Result<Encoder> {
    let mut enc = Encoder::new(&ckpt.meta.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    ckpt.load_into(&mut enc)?;
    Ok(enc)
}

pub fn decoder_from(ckpt: &Checkpoint) -> Result<Decoder> {
    let mut dec = Decoder::new(&ckpt.meta.model, &mut ChaCha8Rng::seed_from_u64(0))?;
    ckpt.load_into(&mut dec)?;
    Ok(dec)
}

pub fn save_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, c.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
