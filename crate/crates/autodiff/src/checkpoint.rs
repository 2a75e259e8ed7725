//! Flat binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "PSSTCKPT"
//! version  u32 LE
//! records  until EOF:
//!   name_len u32 LE, name (UTF-8, name_len bytes),
//!   rank u32 LE, dims u32 LE × rank,
//!   data f64 LE × product(dims)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{AutodiffError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PSSTCKPT";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(AutodiffError::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(AutodiffError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(AutodiffError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let mut params = ParamSet::new();
    while !r.done() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| AutodiffError::Checkpoint(format!("name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let tensor = Tensor::new(dims, data)
            .map_err(|e| AutodiffError::Checkpoint(format!("record {name}: {e}")))?;
        params.push(name, tensor)?;
    }
    Ok(params)
}

/// Writes through a temporary sibling file so readers never see a torn file.
pub fn save(params: &ParamSet, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode(params))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamSet> {
    decode(&fs::read(path)?)
}
