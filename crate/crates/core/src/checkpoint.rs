//! Versioned binary parameter files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"SSCK"
//! u32    format version
//! u32    record count
//! per record:
//!   u32 name length, name bytes (UTF-8)
//!   u8  dtype tag (0 = f32, 1 = f64)
//!   u8  rank, then rank × u64 extents
//!   raw values
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::nn::ParamSet;
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"SSCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found}, this build reads {VERSION}")]
    Version { found: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint holds {found:?} values but the model uses {expected:?}")]
    DType { expected: DType, found: DType },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

/// One parameter as stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Record<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
}

pub fn encode<T: Scalar>(params: &ParamSet<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.numel() * T::DTYPE.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        let shape = p.tensor.shape();
        out.push(shape.len() as u8);
        for &e in shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in p.tensor.values() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(CheckpointError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Vec<Record<T>>, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let count = r.u32("record count")?;
    let mut records = Vec::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| CheckpointError::Corrupt(format!("parameter name is not UTF-8: {e}")))?
            .to_string();
        let tag = r.u8("dtype")?;
        let dtype = DType::from_tag(tag).ok_or_else(|| CheckpointError::Corrupt(format!("unknown dtype tag {tag}")))?;
        if dtype != T::DTYPE {
            return Err(CheckpointError::DType {
                expected: T::DTYPE,
                found: dtype,
            });
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| CheckpointError::Corrupt(format!("{name}: extents overflow")))?;
        let width = dtype.width();
        let raw = r.take(n.checked_mul(width).ok_or(CheckpointError::Truncated("values"))?, "values")?;
        let values = raw.chunks_exact(width).map(T::read_le).collect();
        let tensor = Tensor::new(&shape, values).map_err(|e| CheckpointError::Corrupt(format!("{name}: {e}")))?;
        records.push(Record { name, tensor });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(records)
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn save<T: Scalar>(params: &ParamSet<T>, path: &Path) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode(params))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Copies every stored value into `params`. The file must hold exactly the
/// set's names with the same shapes; on any error `params` is untouched.
pub fn load_into<T: Scalar>(params: &mut ParamSet<T>, path: &Path) -> Result<(), CheckpointError> {
    let records = decode::<T>(&fs::read(path)?)?;
    apply(params, records)
}

pub fn apply<T: Scalar>(params: &mut ParamSet<T>, records: Vec<Record<T>>) -> Result<(), CheckpointError> {
    if records.len() != params.len() {
        return Err(CheckpointError::Mismatch(format!("{} records for {} parameters", records.len(), params.len())));
    }
    for rec in &records {
        let want = params
            .get(&rec.name)
            .map_err(|_| CheckpointError::Mismatch(format!("unknown parameter {}", rec.name)))?;
        if want.shape() != rec.tensor.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "{}: expected shape {:?}, found {:?}",
                rec.name,
                want.shape(),
                rec.tensor.shape()
            )));
        }
    }
    for rec in records {
        params.set_values(&rec.name, rec.tensor.values()).expect("validated above");
    }
    Ok(())
}
