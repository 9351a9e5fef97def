//! The PTT1 tensor container.
//!
//! Layout: magic `PTT1`, u8 dtype (0 = f32, 1 = f64), u8 ndim, `ndim`
//! little-endian u32 extents, then the row-major little-endian payload.

use std::io::{Read, Write};
use std::path::Path;

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PTT1";

/// A tensor of either supported element type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn into_dtype<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    let ndim = u8::try_from(t.ndim())
        .map_err(|_| Error::Format(format!("{} axes exceed the u8 ndim field", t.ndim())))?;
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE as u8);
    out.push(ndim);
    for &d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| Error::Format(format!("extent {d} exceeds the u32 field")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.reserve(t.len() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

pub fn write_tensor<T: Scalar>(w: &mut impl Write, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::new();
    encode(t, &mut buf)?;
    w.write_all(&buf)
        .map_err(|e| Error::Format(format!("writing tensor: {e}")))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Format(format!("truncated tensor ({what}): {e}")))
}

pub fn read_tensor(r: &mut impl Read) -> Result<AnyTensor> {
    let mut head = [0u8; 6];
    read_exact(r, &mut head, "header")?;
    if &head[..4] != MAGIC {
        return Err(Error::Format(format!("bad tensor magic {:?}", &head[..4])));
    }
    let dtype = DType::from_tag(head[4])
        .ok_or_else(|| Error::Format(format!("unknown dtype tag {}", head[4])))?;
    let ndim = head[5] as usize;
    let mut dims = vec![0u8; 4 * ndim];
    read_exact(r, &mut dims, "extents")?;
    let shape: Vec<usize> = dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let len: usize = shape.iter().product();
    let mut payload = vec![0u8; len * dtype.size()];
    read_exact(r, &mut payload, "payload")?;
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_payload(&shape, &payload)?),
        DType::F64 => AnyTensor::F64(decode_payload(&shape, &payload)?),
    })
}

fn decode_payload<T: Scalar>(shape: &[usize], bytes: &[u8]) -> Result<Tensor<T>> {
    let data = bytes.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    encode(t, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&mut bytes.as_slice())
}
