//! Versioned binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "MEATCKPT"
//! version      u32
//! endianness   u32      0x01020304 as written by the producer
//! body_len     u64      bytes between the header and the checksum
//! body:
//!   epoch        u64
//!   num_batches  u64
//!   n_params     u32, then per tensor:
//!     layer str, name str, ndim u32, dims u64 × ndim, payload f32 × product(dims)
//!   n_bn         u32, then per layer:
//!     layer str, dim u64, mean f32 × dim, var f32 × dim
//! sha256       32 bytes over everything before it
//! ```
//!
//! Strings are a `u32` byte length followed by UTF-8.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::diffnet::{BnLayerStats, BnStats, NamedParams, ParamTensor};
use crate::ensemble::Checkpoint;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 8] = b"MEATCKPT";
pub const VERSION: u32 = 1;
const ENDIAN_MARK: u32 = 0x0102_0304;
const HEADER_LEN: usize = 8 + 4 + 4 + 8;
const DIGEST_LEN: usize = 32;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut body = Writer(Vec::new());
    body.u64(ckpt.epoch as u64);
    body.u64(ckpt.bnstats.num_batches);
    body.u32(ckpt.params.len() as u32);
    for e in ckpt.params.iter() {
        body.str(&e.layer);
        body.str(&e.name);
        body.u32(e.tensor.shape().len() as u32);
        for &d in e.tensor.shape() {
            body.u64(d as u64);
        }
        body.f32s(e.tensor.data());
    }
    body.u32(ckpt.bnstats.layers.len() as u32);
    for l in &ckpt.bnstats.layers {
        body.str(&l.layer);
        body.u64(l.mean.len() as u64);
        body.f32s(l.mean.data());
        body.f32s(l.var.data());
    }

    let mut out = Writer(Vec::with_capacity(HEADER_LEN + body.0.len() + DIGEST_LEN));
    out.0.extend_from_slice(MAGIC);
    out.u32(VERSION);
    out.u32(ENDIAN_MARK);
    out.u64(body.0.len() as u64);
    out.0.extend_from_slice(&body.0);
    let digest = Sha256::digest(&out.0);
    out.0.extend_from_slice(&digest);
    out.0
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated {
                offset: self.pos as u64,
                needed: n as u64,
                available: (self.buf.len() - self.pos) as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let at = self.pos as u64;
        usize::try_from(self.u64()?).map_err(|_| Error::Format {
            offset: at,
            message: "length does not fit in memory".into(),
        })
    }
    fn str(&mut self) -> Result<String> {
        let at = self.pos as u64;
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format {
            offset: at,
            message: "name is not UTF-8".into(),
        })
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            message: "payload size overflow".into(),
        })?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_checkpoint(buf: &[u8], origin: &Path) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad checkpoint magic".into(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    if r.u32()? != ENDIAN_MARK {
        return Err(Error::Format {
            offset: 12,
            message: "unsupported endianness marker".into(),
        });
    }
    let body_len = r.len()?;
    let expected = HEADER_LEN
        .checked_add(body_len)
        .and_then(|n| n.checked_add(DIGEST_LEN))
        .ok_or_else(|| Error::Format {
            offset: 16,
            message: "body length overflow".into(),
        })?;
    if buf.len() < expected {
        return Err(Error::Truncated {
            offset: buf.len() as u64,
            needed: expected as u64,
            available: buf.len() as u64,
        });
    }
    if buf.len() > expected {
        return Err(Error::Format {
            offset: expected as u64,
            message: "trailing bytes after checksum".into(),
        });
    }
    let digest = Sha256::digest(&buf[..HEADER_LEN + body_len]);
    if digest.as_slice() != &buf[HEADER_LEN + body_len..] {
        return Err(Error::Checksum {
            path: origin.to_path_buf(),
        });
    }

    let epoch = r.len()?;
    let num_batches = r.u64()?;
    let n_params = r.u32()?;
    let mut entries = Vec::with_capacity(n_params as usize);
    for _ in 0..n_params {
        let layer = r.str()?;
        let name = r.str()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let at = r.pos as u64;
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format {
                offset: at,
                message: "tensor size overflow".into(),
            })?;
        let tensor = Tensor::new(shape, r.f32s(count)?)?;
        entries.push(ParamTensor {
            layer,
            name,
            tensor,
        });
    }
    let n_bn = r.u32()?;
    let mut layers = Vec::with_capacity(n_bn as usize);
    for _ in 0..n_bn {
        let layer = r.str()?;
        let dim = r.len()?;
        let mean = Tensor::vector(r.f32s(dim)?);
        let var = Tensor::vector(r.f32s(dim)?);
        layers.push(BnLayerStats { layer, mean, var });
    }
    if r.pos != HEADER_LEN + body_len {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: "body length disagrees with contents".into(),
        });
    }
    Ok(Checkpoint {
        epoch,
        params: NamedParams::new(entries)?,
        bnstats: BnStats {
            layers,
            num_batches,
        },
    })
}

/// Write atomically: a sibling temp file is renamed over `path`.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_checkpoint(ckpt))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&std::fs::read(path)?, path)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
