//! Flat binary checkpoint container (`FTCK`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "FTCK" | version u32 | count u32
//! per parameter: name_len u16 | name utf-8 | rank u8 | dims u32 * rank | f32 * numel
//! ```
//!
//! Only parameter values are stored; momentum buffers restart at zero.

use std::path::Path;

use crate::error::{Error, Result};
use crate::models::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FTCK";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParamSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        let name = p.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("parameter name too long: {}", p.name)))?;
        let rank = u8::try_from(p.value.rank())
            .map_err(|_| Error::InvalidArgument(format!("rank too large for `{}`", p.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for &d in p.value.shape() {
            let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension too large: {d}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                msg: format!(
                    "truncated while reading {what}: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ParamSet> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(bad("bad magic, expected FTCK".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let count = r.u32("parameter count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| bad(format!("parameter name is not utf-8: {e}")))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| bad(format!("parameter `{name}`: {e}")))?;
        params.insert(name, tensor)?;
    }
    if r.pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(params)
}

pub fn save(params: &ParamSet, path: &Path) -> Result<()> {
    std::fs::write(path, encode(params)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
