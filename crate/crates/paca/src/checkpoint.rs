//! Binary checkpoint format.
//!
//! ```text
//! "PACA" | u32 version | u64 config hash | u32 tensor count
//! per tensor, sorted by name:
//!   u16 name length | name bytes | u8 rank | rank × u64 extents | f32 payload
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use paca_core::config::ModelConfig;
use paca_core::model::PaCaModel;
use paca_core::{Real, Tensor};

use crate::error::{io_err, IoError, Result};

pub const MAGIC: &[u8; 4] = b"PACA";
pub const VERSION: u32 = 1;

pub fn to_bytes<T: Real>(model: &PaCaModel<T>) -> Vec<u8> {
    let params = model.params();
    let mut out = Vec::with_capacity(20 + 4 * params.element_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.config().hash().to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.sorted() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.dims().len() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn save<T: Real>(model: &PaCaModel<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(io_err(path))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(IoError::Truncated {
                offset: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

/// Rebuilds a model for `cfg` and fills it from checkpoint bytes.
pub fn from_bytes(bytes: &[u8], cfg: &ModelConfig) -> Result<PaCaModel<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
        return Err(IoError::BadMagic);
    }
    r.take(4)?;
    let version = u32::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(IoError::UnsupportedVersion(version));
    }
    let found = u64::from_le_bytes(r.array()?);
    if found != cfg.hash() {
        return Err(IoError::ConfigMismatch {
            expected: cfg.hash(),
            found,
        });
    }
    let count = u32::from_le_bytes(r.array()?) as usize;
    let mut model = PaCaModel::<f32>::build(cfg, 0)?;
    let expected: Vec<(String, Vec<usize>)> = model
        .params()
        .sorted()
        .map(|(n, t)| (n.to_string(), t.dims().to_vec()))
        .collect();
    if count != expected.len() {
        return Err(IoError::TensorCount {
            expected: expected.len(),
            found: count,
        });
    }
    for (index, (name, dims)) in expected.iter().enumerate() {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let found = String::from_utf8_lossy(r.take(len)?).into_owned();
        if &found != name {
            return Err(IoError::NameMismatch {
                index,
                expected: name.clone(),
                found,
            });
        }
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(r.array()?) as usize);
        }
        if &shape != dims {
            return Err(IoError::ShapeMismatch {
                name: name.clone(),
                expected: dims.clone(),
                found: shape,
            });
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 4)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        model.params_mut().set(name, Tensor::new(&shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(IoError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(model)
}

pub fn load(path: &Path, cfg: &ModelConfig) -> Result<PaCaModel<f32>> {
    from_bytes(&fs::read(path).map_err(io_err(path))?, cfg)
}
