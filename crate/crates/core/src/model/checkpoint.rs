//! The PTCK checkpoint container.
//!
//! Layout: magic `PTCK`, u32 version, u32 record count, then per record a
//! u16 name length, the UTF-8 name and an embedded PTT1 tensor, and finally
//! a u32-length-prefixed JSON metadata block. All integers little-endian.
//! Random feature matrices are not stored; they are regenerated from the
//! seed when the network is rebuilt.

use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PtNet, PtNetConfig};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::io::{read_tensor, write_tensor};
use crate::tensor::{Scalar, Tensor};

pub const PTCK_MAGIC: &[u8; 4] = b"PTCK";
pub const PTCK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: PtNetConfig,
    pub seed: u64,
    pub epoch: Option<usize>,
    pub val_ssim: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn capture(store: &ParameterStore<T>, meta: CheckpointMeta) -> Self {
        Self {
            meta,
            params: store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    /// Rebuilds the network from the stored config and seed and loads the
    /// stored weights into it.
    pub fn restore(self) -> Result<(PtNet, ParameterStore<T>)> {
        let (net, mut store) = PtNet::new::<T>(&self.meta.config, self.meta.seed)?;
        store.load_values(self.params)?;
        Ok((net, store))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(PTCK_MAGIC);
        out.extend_from_slice(&PTCK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("parameter name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            write_tensor(&mut out, t)?;
        }
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let truncated = |_| Error::Format("truncated checkpoint".into());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != PTCK_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(truncated)?;
        let version = u32::from_le_bytes(u32buf);
        if version != PTCK_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        r.read_exact(&mut u32buf).map_err(truncated)?;
        let count = u32::from_le_bytes(u32buf) as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let mut u16buf = [0u8; 2];
            r.read_exact(&mut u16buf).map_err(truncated)?;
            let mut name = vec![0u8; u16::from_le_bytes(u16buf) as usize];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            params.push((name, read_tensor(&mut r)?.into_dtype::<T>()));
        }
        r.read_exact(&mut u32buf).map_err(truncated)?;
        let mut meta = vec![0u8; u32::from_le_bytes(u32buf) as usize];
        r.read_exact(&mut meta).map_err(truncated)?;
        Ok(Self {
            meta: serde_json::from_slice(&meta)?,
            params,
        })
    }
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, ckpt: &Checkpoint<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
