//! Binary checkpoint format.
//!
//! ```text
//! magic            8 bytes  "DSCKPT\0\0"
//! format_version   u32
//! config           u64 length + UTF-8 TOML
//! iteration        u64
//! params           u64 count, then named tensors sorted by name
//! optimizer        u8 present flag; if 1: u64 step, u64 count, then
//!                  per name: name, first moment, second moment
//! ```
//!
//! Integers are little-endian. A named tensor is `u32` name length, name
//! bytes, `u8` dtype (0 = f32, 1 = f64), `u32` rank, `u64` dims, raw
//! little-endian values.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DSCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    /// First and second moments keyed by parameter name.
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: String,
    pub iteration: u64,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: Option<OptimizerState>,
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    let shape = t.dims().to_vec();
    let t = t.flatten_all()?;
    let (tag, bytes): (u8, Vec<u8>) = match t.dtype() {
        DType::F32 => (0, t.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        DType::F64 => (1, t.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    };
    out.push(tag);
    out.extend((shape.len() as u32).to_le_bytes());
    for d in shape {
        out.extend((d as u64).to_le_bytes());
    }
    out.extend(bytes);
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = self.string(len)?;
        let tag = self.u8()?;
        let rank = self.u32()? as usize;
        let dims = (0..rank).map(|_| Ok(self.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let t = match tag {
            0 => {
                let raw = self.take(4 * n)?;
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            1 => {
                let raw = self.take(8 * n)?;
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            other => return Err(Error::Checkpoint(format!("unknown dtype tag {other} for `{name}`"))),
        };
        Ok((name, t))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(self.format_version.to_le_bytes());
        out.extend((self.config.len() as u64).to_le_bytes());
        out.extend(self.config.as_bytes());
        out.extend(self.iteration.to_le_bytes());
        out.extend((self.params.len() as u64).to_le_bytes());
        for (name, t) in &self.params {
            put_tensor(&mut out, name, t)?;
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend(opt.step.to_le_bytes());
                out.extend((opt.moments.len() as u64).to_le_bytes());
                for (name, (m, v)) in &opt.moments {
                    put_tensor(&mut out, name, m)?;
                    put_tensor(&mut out, name, v)?;
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let format_version = r.u32()?;
        if format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {format_version}, expected {FORMAT_VERSION}"
            )));
        }
        let len = r.u64()? as usize;
        let config = r.string(len)?;
        let iteration = r.u64()?;
        let count = r.u64()?;
        let mut params = BTreeMap::new();
        for _ in 0..count {
            let (name, t) = r.tensor()?;
            params.insert(name, t);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let count = r.u64()?;
                let mut moments = BTreeMap::new();
                for _ in 0..count {
                    let (name, m) = r.tensor()?;
                    let (_, v) = r.tensor()?;
                    moments.insert(name, (m, v));
                }
                Some(OptimizerState { step, moments })
            }
            other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
        };
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            format_version,
            config,
            iteration,
            params,
            optimizer,
        })
    }

    /// Writes through a temporary file so an interrupted save never
    /// leaves a partial checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
