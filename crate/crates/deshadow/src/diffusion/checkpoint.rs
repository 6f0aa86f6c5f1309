//! Versioned binary checkpoint container shared by the denoiser and the
//! learned refiner: magic, version, architecture hash, config JSON, weight
//! blob, optional optimizer state, optional EMA weights.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::adam::Adam;

const MAGIC: &[u8; 4] = b"DSCK";
const VERSION: u32 = 1;

/// A loaded checkpoint, architecture-agnostic: `arch_json` identifies the
/// model family and hyperparameters.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub arch_json: String,
    pub arch_hash: [u8; 32],
    pub weights: Vec<f32>,
    pub adam: Option<Adam>,
    pub ema: Option<Vec<f32>>,
}

pub fn arch_hash(arch_json: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(arch_json.as_bytes());
    h.finalize().into()
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    arch_json: &str,
    weights: &[f32],
    adam: Option<&Adam>,
    ema: Option<&[f32]>,
) -> Result<()> {
    let path = path.as_ref();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&arch_hash(arch_json));
    buf.extend_from_slice(&(arch_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(arch_json.as_bytes());
    buf.extend_from_slice(&(weights.len() as u64).to_le_bytes());
    for w in weights {
        buf.extend_from_slice(&w.to_le_bytes());
    }
    let flags = (adam.is_some() as u8) | ((ema.is_some() as u8) << 1);
    buf.push(flags);
    if let Some(a) = adam {
        buf.extend_from_slice(&a.step.to_le_bytes());
        for v in a.m.iter().chain(a.v.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(e) = ema {
        if e.len() != weights.len() {
            return Err(Error::Checkpoint("EMA length differs from weights".into()));
        }
        for v in e {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated at byte {}",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
        path,
    };

    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic (not a checkpoint)",
            path.display()
        )));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let mut stored_hash = [0u8; 32];
    stored_hash.copy_from_slice(cur.take(32)?);
    let json_len = cur.u32()? as usize;
    let arch_json = String::from_utf8(cur.take(json_len)?.to_vec())
        .map_err(|e| Error::Checkpoint(format!("{}: bad config utf8: {e}", path.display())))?;
    if arch_hash(&arch_json) != stored_hash {
        return Err(Error::Checkpoint(format!(
            "{}: architecture hash mismatch",
            path.display()
        )));
    }
    let n = cur.u64()? as usize;
    let weights = cur.f32s(n)?;
    let flags = cur.take(1)?[0];
    let adam = if flags & 1 != 0 {
        let step = cur.u64()?;
        let m = cur.f32s(n)?;
        let v = cur.f32s(n)?;
        let mut a = Adam::new(n);
        a.step = step;
        a.m = m;
        a.v = v;
        Some(a)
    } else {
        None
    };
    let ema = if flags & 2 != 0 { Some(cur.f32s(n)?) } else { None };
    Ok(Checkpoint {
        arch_json,
        arch_hash: stored_hash,
        weights,
        adam,
        ema,
    })
}
