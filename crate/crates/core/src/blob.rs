//! `GBFT` tensor blobs: a fixed little-endian header followed by the raw
//! row-major payload.
//!
//! ```text
//! magic   4 bytes  "GBFT"
//! version u32      1
//! dtype   u8       0 = f32, 1 = f64
//! rank    u8       always 4
//! dims    4 x u32  N, C, H, W
//! payload          N*C*H*W little-endian floats
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Shape, Tensor};

pub const BLOB_MAGIC: [u8; 4] = *b"GBFT";
pub const BLOB_VERSION: u32 = 1;
pub const BLOB_HEADER_LEN: usize = 4 + 4 + 1 + 1 + 4 * 4;

pub fn blob_write<T: Element, W: Write>(t: &Tensor<T>, sink: &mut W) -> Result<()> {
    sink.write_all(&encode(t))?;
    Ok(())
}

pub fn encode<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(BLOB_HEADER_LEN + t.len() * T::DTYPE.size());
    out.extend_from_slice(&BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.push(4);
    for d in t.shape().0 {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Reads one blob, failing with [`Error::DTypeMismatch`] if it was stored with
/// a different element type than `T`.
pub fn blob_read<T: Element, R: Read>(source: &mut R) -> Result<Tensor<T>> {
    let (dtype, shape) = read_header(source)?;
    if dtype != T::DTYPE {
        return Err(Error::DTypeMismatch { expected: T::DTYPE.name(), found: dtype.name() });
    }
    let mut payload = vec![0u8; shape.numel() * dtype.size()];
    read_exact(source, &mut payload, "payload")?;
    let data = payload.chunks_exact(dtype.size()).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

pub fn decode<T: Element>(mut bytes: &[u8]) -> Result<Tensor<T>> {
    blob_read(&mut bytes)
}

/// A blob of either element type.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn write<W: Write>(&self, sink: &mut W) -> Result<()> {
        match self {
            AnyTensor::F32(t) => blob_write(t, sink),
            AnyTensor::F64(t) => blob_write(t, sink),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    /// Converts to `T`, refusing a dtype other than the stored one.
    pub fn into_typed<T: Element>(self) -> Result<Tensor<T>> {
        if self.dtype() != T::DTYPE {
            return Err(Error::DTypeMismatch { expected: T::DTYPE.name(), found: self.dtype().name() });
        }
        Ok(match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        })
    }
}

/// Reads one blob whatever its stored element type.
pub fn blob_read_any<R: Read>(source: &mut R) -> Result<AnyTensor> {
    let (dtype, shape) = read_header(source)?;
    let mut payload = vec![0u8; shape.numel() * dtype.size()];
    read_exact(source, &mut payload, "payload")?;
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(Tensor::from_vec(shape, payload.chunks_exact(4).map(f32::read_le).collect())?),
        DType::F64 => AnyTensor::F64(Tensor::from_vec(shape, payload.chunks_exact(8).map(f64::read_le).collect())?),
    })
}

fn read_header<R: Read>(source: &mut R) -> Result<(DType, Shape)> {
    let mut magic = [0u8; 4];
    read_exact(source, &mut magic, "magic")?;
    if magic != BLOB_MAGIC {
        return Err(Error::BadMagic { expected: BLOB_MAGIC, found: magic });
    }
    let mut word = [0u8; 4];
    read_exact(source, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != BLOB_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut codes = [0u8; 2];
    read_exact(source, &mut codes, "dtype/rank")?;
    let dtype = DType::from_code(codes[0])?;
    if codes[1] != 4 {
        return Err(Error::BadRank(codes[1]));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        read_exact(source, &mut word, "dims")?;
        *d = u32::from_le_bytes(word) as usize;
    }
    Ok((dtype, Shape(dims)))
}

fn read_exact<R: Read>(source: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated(format!("eof while reading {what}")),
        _ => Error::Io(e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zeros_layout() {
        let t = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        let bytes = encode(&t);
        assert_eq!(BLOB_HEADER_LEN, 26);
        assert_eq!(bytes.len(), BLOB_HEADER_LEN + 16);
        assert_eq!(&bytes[..4], b"GBFT");
        assert_eq!(bytes[8], 0);
        assert_eq!(bytes[9], 4);
        let back: Tensor<f32> = decode(&bytes).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode(&Tensor::<f32>::zeros(Shape::new(1, 1, 1, 1)));
        bytes[..4].copy_from_slice(b"XXXX");
        let err = decode::<f32>(&bytes).unwrap_err();
        assert!(matches!(err, Error::BadMagic { .. }));
    }

    #[test]
    fn rejects_truncation_and_dtype() {
        let bytes = encode(&Tensor::<f64>::full(Shape::new(1, 2, 3, 1), 1.5));
        let short = &bytes[..bytes.len() - 3];
        let e1 = decode::<f64>(short).unwrap_err();
        assert!(matches!(e1, Error::Truncated(_)));
        let e2 = decode::<f32>(&bytes).unwrap_err();
        assert!(matches!(e2, Error::DTypeMismatch { .. }));
        assert_ne!(e1.code(), e2.code());
        let mut bad_rank = bytes.clone();
        bad_rank[9] = 3;
        assert!(matches!(decode::<f64>(&bad_rank), Err(Error::BadRank(3))));
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_bit_exact(
            dims in (1usize..3, 1usize..4, 1usize..6, 1usize..8),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let shape = Shape::new(dims.0, dims.1, dims.2, dims.3);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::from_fn(shape, |_| f64::from_bits(rng.gen::<u64>() & !(0x7ffu64 << 52) | (0x3ffu64 << 52)) * if rng.gen() { -1.0 } else { 1.0 });
            let bytes = encode(&t);
            let back: Tensor<f64> = decode(&bytes).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
