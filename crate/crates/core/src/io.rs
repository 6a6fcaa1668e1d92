//! CCT1 tensor files.
//!
//! Layout: `b"CCT1"`, one byte scalar width (4 or 8), one byte rank `r`, `r`
//! little-endian `u32` extents, then the row-major little-endian payload.
//! No padding, no checksum.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"CCT1";

/// A tensor read from disk in whatever precision it was written with.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            Self::F32(t) => t.shape(),
            Self::F64(t) => t.shape(),
        }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            Self::F32(t) => t.cast(),
            Self::F64(t) => t.clone(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        match self {
            Self::F32(t) => t.clone(),
            Self::F64(t) => t.cast(),
        }
    }
}

pub fn encode<T: Scalar>(x: &Tensor<T>) -> Result<Vec<u8>> {
    let rank = u8::try_from(x.rank()).map_err(|_| Error::InvalidShape {
        shape: x.shape().to_vec(),
        reason: "rank does not fit in one byte".into(),
    })?;
    let mut out = Vec::with_capacity(6 + 4 * x.rank() + x.len() * T::WIDTH as usize);
    out.extend_from_slice(MAGIC);
    out.push(T::WIDTH);
    out.push(rank);
    for &e in x.shape() {
        let e = u32::try_from(e).map_err(|_| Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "extent does not fit in u32".into(),
        })?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for &v in x.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<StoredTensor> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "missing CCT1 magic".into(),
        });
    }
    let width = *bytes.get(4).ok_or(Error::Format {
        offset: 4,
        reason: "missing scalar width".into(),
    })?;
    if width != 4 && width != 8 {
        return Err(Error::Format {
            offset: 4,
            reason: format!("scalar width {width} is not 4 or 8"),
        });
    }
    let rank = *bytes.get(5).ok_or(Error::Format {
        offset: 5,
        reason: "missing rank".into(),
    })? as usize;
    if rank == 0 {
        return Err(Error::Format {
            offset: 5,
            reason: "rank must be at least 1".into(),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for d in 0..rank {
        let at = 6 + 4 * d;
        let raw = bytes.get(at..at + 4).ok_or_else(|| Error::Format {
            offset: at,
            reason: format!("header truncated inside extent {d}"),
        })?;
        let e = u32::from_le_bytes(raw.try_into().expect("4 bytes")) as usize;
        if e == 0 {
            return Err(Error::Format {
                offset: at,
                reason: format!("extent {d} is zero"),
            });
        }
        shape.push(e);
    }
    let start = 6 + 4 * rank;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format {
            offset: 6,
            reason: "extent product overflows".into(),
        })?;
    let payload = &bytes[start..];
    let expected = count * width as usize;
    if payload.len() != expected {
        return Err(Error::Length {
            expected,
            found: payload.len(),
        });
    }
    Ok(match width {
        4 => StoredTensor::F32(Tensor::new(shape, read_payload(payload))?),
        _ => StoredTensor::F64(Tensor::new(shape, read_payload(payload))?),
    })
}

fn read_payload<T: Scalar>(payload: &[u8]) -> Vec<T> {
    payload.chunks_exact(T::WIDTH as usize).map(T::read_le).collect()
}

pub fn save_tensor<T: Scalar>(x: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(x)?)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<StoredTensor> {
    decode(&fs::read(path)?)
}
