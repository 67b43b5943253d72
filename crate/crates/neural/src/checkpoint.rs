//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "ISPCKPT\0"
//! version    u32      = 1
//! dtype      u8       1 = f32, 2 = f64
//! digest     32 bytes model-config digest supplied by the caller
//! count      u32      number of parameters
//! repeated count times:
//!   name_len u32, name utf-8 bytes
//!   ndim     u32, dims u32 * ndim
//!   data     numel * dtype size bytes
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NeuralError, Result};
use crate::param::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ISPCKPT\0";
pub const VERSION: u32 = 1;

pub type ConfigDigest = [u8; 32];

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub digest: ConfigDigest,
    pub params: Vec<(String, Tensor<T>)>,
}

pub fn encode<T: Scalar>(store: &ParamStore<T>, digest: &ConfigDigest) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + store.num_scalars() * T::DTYPE.size_bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE as u8);
    out.extend_from_slice(digest);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(NeuralError::Format("unexpected end of checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(NeuralError::Format("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(NeuralError::Format(format!("unsupported version {version}")));
    }
    let tag = cur.take(1)?[0];
    let dtype = DType::from_tag(tag).ok_or_else(|| NeuralError::Format(format!("unknown dtype tag {tag}")))?;
    if dtype != T::DTYPE {
        return Err(NeuralError::Format(format!(
            "checkpoint holds {dtype:?}, requested {:?}",
            T::DTYPE
        )));
    }
    let mut digest = [0u8; 32];
    digest.copy_from_slice(cur.take(32)?);
    let count = cur.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| NeuralError::Format("parameter name is not utf-8".into()))?
            .to_string();
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let size = dtype.size_bytes();
        let raw = cur.take(n * size)?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        params.push((name, Tensor::from_vec(&shape, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(NeuralError::Format("trailing bytes after last parameter".into()));
    }
    Ok(Checkpoint { digest, params })
}

pub fn save<T: Scalar>(path: &Path, store: &ParamStore<T>, digest: &ConfigDigest) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&encode(store, digest))?;
    file.sync_all()?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_store(values: &[f32]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::from_vec(&[values.len()], values.to_vec()).unwrap())
            .unwrap();
        s.insert("b", Tensor::from_vec(&[1, 2], vec![f32::MIN_POSITIVE, -0.0]).unwrap())
            .unwrap();
        s
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..64)) {
            let store = sample_store(&values);
            let digest = [7u8; 32];
            let bytes = encode(&store, &digest);
            let ckpt: Checkpoint<f32> = decode(&bytes).unwrap();
            prop_assert_eq!(ckpt.digest, digest);
            let mut back = ParamStore::new();
            for (name, t) in ckpt.params {
                back.insert(name, t).unwrap();
            }
            prop_assert_eq!(encode(&back, &digest), bytes);
        }
    }

    #[test]
    fn rejects_truncation_and_dtype_mismatch() {
        let bytes = encode(&sample_store(&[1.0, 2.0]), &[0u8; 32]);
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode::<f64>(&bytes).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
    }
}
