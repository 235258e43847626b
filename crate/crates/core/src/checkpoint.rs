//! Single-file model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "RFCKPT\0\0"
//! version      u32
//! meta_len     u64
//! meta         meta_len bytes of JSON: config, trained_epochs, vocab, norm
//! n_tensors    u32
//! per tensor:  name_len u16 | name | rows u64 | cols u64 | rows*cols f64
//! checksum     32 bytes SHA-256 of everything above
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{Model, NormStats};
use crate::params::{ModelConfig, ModelParams};
use crate::vocab::Vocabulary;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"RFCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    trained_epochs: usize,
    vocab: Vec<String>,
    norm: NormStats,
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&Meta {
        config: model.params.config,
        trained_epochs: model.trained_epochs,
        vocab: model.vocab.tokens().to_vec(),
        norm: model.norm.clone(),
    })
    .map_err(std::io::Error::from)?;

    let mut out = Vec::with_capacity(meta.len() + 8 * model.params.parameter_count() + 256);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    let tensors = model.params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = Sha256::digest(&out);
    out.extend_from_slice(&checksum);
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a riskfuse checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version.to_string(),
            expected: FORMAT_VERSION.to_string(),
        });
    }
    if bytes.len() < 12 + 32 {
        return Err(Error::Checkpoint("truncated".into()));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }

    let mut cur = Cursor { buf: body, pos: 12 };
    let meta_len = cur.len()?;
    let meta: Meta = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    let n = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = cur.len()?;
        let cols = cur.len()?;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} shape overflows")))?;
        let raw = cur.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Array2::from_shape_vec((rows, cols), data).expect("count matches shape");
        tensors.push((name, t));
    }
    if cur.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }
    let params = ModelParams::from_named(meta.config, tensors)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let vocab = Vocabulary::from_tokens(meta.vocab).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if vocab.len() != params.config.vocab_size || meta.norm.n_analytes() != params.config.n_analytes {
        return Err(Error::Checkpoint("metadata disagrees with tensor shapes".into()));
    }
    Ok(Model {
        params,
        norm: meta.norm,
        vocab,
        trained_epochs: meta.trained_epochs,
    })
}

/// Hex SHA-256 of a checkpoint's bytes; used as the model version.
pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes atomically (temp file + rename) and returns the digest.
pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = to_bytes(model)?;
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(digest(&bytes))
}

/// Loads a checkpoint and returns it with its digest.
pub fn load(path: impl AsRef<Path>) -> Result<(Model, String)> {
    let bytes = fs::read(path)?;
    let model = from_bytes(&bytes)?;
    Ok((model, digest(&bytes)))
}
