//! Binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "CALCKPT\0"
//! version      u32      1
//! config_len   u64      then config_len bytes of UTF-8 flat config text
//! config_hash  u64      first 8 bytes of SHA-256(config text)
//! classes      u64
//! audio_width  u64
//! step         u64      optimiser updates applied
//! adam_t       u64
//! trace_len    u64      then trace_len f64 per-epoch losses
//! partial      f64      loss accumulated so far in the unfinished epoch
//! n_params     u64
//! per parameter:
//!   name_len u32, name bytes, rows u64, cols u64,
//!   rows·cols f64 values, rows·cols f64 first moments, rows·cols f64 second moments
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::adamw::AdamState;
use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

const MAGIC: &[u8; 8] = b"CALCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub classes: usize,
    pub audio_width: usize,
    pub step: u64,
    pub epoch_losses: Vec<f64>,
    pub partial_epoch_loss: f64,
    pub names: Vec<String>,
    pub params: Vec<Matrix>,
    pub adam: AdamState,
}

pub fn config_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let text = self.config.to_text();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for v in [
            config_hash(&text),
            self.classes as u64,
            self.audio_width as u64,
            self.step,
            self.adam.t,
            self.epoch_losses.len() as u64,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in self.epoch_losses.iter().chain([&self.partial_epoch_loss]) {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (i, p) in self.params.iter().enumerate() {
            let name = self.names[i].as_bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name);
            out.extend_from_slice(&(p.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(p.cols() as u64).to_le_bytes());
            for m in [p, &self.adam.m[i], &self.adam.v[i]] {
                for v in m.as_slice() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(8, format!("unsupported checkpoint version {version}")));
        }
        let text_len = r.len()?;
        let text_start = r.pos as u64;
        let text = std::str::from_utf8(r.take(text_len)?)
            .map_err(|_| Error::format(text_start, "config text is not UTF-8"))?
            .to_string();
        let hash_pos = r.pos as u64;
        if r.u64()? != config_hash(&text) {
            return Err(Error::format(hash_pos, "config hash does not match embedded config"));
        }
        let config = TrainConfig::parse(&text)?;
        let classes = r.len()?;
        let audio_width = r.len()?;
        let step = r.u64()?;
        let adam_t = r.u64()?;
        let trace_len = r.len()?;
        let epoch_losses = (0..trace_len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let partial_epoch_loss = r.f64()?;
        let n = r.len()?;
        let mut names = Vec::with_capacity(n);
        let mut params = Vec::with_capacity(n);
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name_pos = r.pos as u64;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(name_pos, "parameter name is not UTF-8"))?
                .to_string();
            let rows = r.len()?;
            let cols = r.len()?;
            let mut matrix = || -> Result<Matrix> {
                let pos = r.pos as u64;
                let count = rows
                    .checked_mul(cols)
                    .ok_or_else(|| Error::format(pos, "parameter shape overflows"))?;
                let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                Matrix::from_vec(rows, cols, data).map_err(|e| Error::format(pos, e.to_string()))
            };
            params.push(matrix()?);
            m.push(matrix()?);
            v.push(matrix()?);
            names.push(name);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after checkpoint"));
        }
        Ok(Self {
            config,
            classes,
            audio_width,
            step,
            epoch_losses,
            partial_epoch_loss,
            names,
            params,
            adam: AdamState { m, v, t: adam_t },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.bytes.len() as u64,
                format!("checkpoint truncated: needed {n} bytes at offset {}", self.pos),
            )),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let pos = self.pos as u64;
        usize::try_from(self.u64()?).map_err(|_| Error::format(pos, "length does not fit in usize"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
