//! Per-sample tensor files: a 32-byte header followed by a raw row-major
//! little-endian payload.
//!
//! ```text
//! bytes 0..4    magic "MEDN"
//! byte  4       dtype code (0 = f32, 1 = f64)
//! bytes 5..8    zero
//! bytes 8..24   four u32 dims
//! bytes 24..32  zero
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{MednError, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"MEDN";
pub const HEADER_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn encode_tensor(t: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    if t.shape().len() != 4 {
        return Err(MednError::ShapeMismatch(format!(
            "tensor files hold rank-4 arrays, got {:?}",
            t.shape()
        )));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + t.numel() * dtype.width());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.push(dtype as u8);
    buf.extend_from_slice(&[0; 3]);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&[0; 8]);
    match dtype {
        DType::F32 => t
            .data()
            .iter()
            .for_each(|v| buf.extend_from_slice(&(*v as f32).to_le_bytes())),
        DType::F64 => t
            .data()
            .iter()
            .for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(buf)
}

pub fn decode_tensor(bytes: &[u8], origin: &str) -> Result<Tensor> {
    let bad = |message: String| MednError::Format {
        path: origin.to_string(),
        message,
    };
    if bytes.len() < HEADER_LEN || &bytes[..4] != TENSOR_MAGIC {
        return Err(bad("missing MEDN tensor header".into()));
    }
    let dtype = match bytes[4] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(bad(format!("unknown dtype code {other}"))),
    };
    let dims: Vec<usize> = (0..4)
        .map(|i| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != n * dtype.width() {
        return Err(bad(format!(
            "payload of {} bytes does not match dims {:?}",
            payload.len(),
            dims
        )));
    }
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Tensor::from_vec(&dims, data)
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: DType) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_tensor(t, dtype)?)?;
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    decode_tensor(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::from_vec(&[1, 2, 1, 3], vec![0.5, -1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let bytes = encode_tensor(&t, DType::F32).unwrap();
        assert_eq!(&bytes[..4], b"MEDN");
        assert_eq!(bytes[4], 0);
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), 32 + 6 * 4);
        assert_eq!(&bytes[32..36], &0.5f32.to_le_bytes());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = Tensor::zeros(&[1, 1, 2, 2]);
        let mut bytes = encode_tensor(&t, DType::F32).unwrap();
        bytes.pop();
        assert_eq!(decode_tensor(&bytes, "x").unwrap_err().kind(), "Format");
    }

    proptest! {
        #[test]
        fn f32_round_trip(vals in proptest::collection::vec(-1e6f32..1e6, 12)) {
            let t = Tensor::from_vec(&[2, 2, 3, 1], vals.iter().map(|&v| v as f64).collect()).unwrap();
            let back = decode_tensor(&encode_tensor(&t, DType::F32).unwrap(), "p").unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
