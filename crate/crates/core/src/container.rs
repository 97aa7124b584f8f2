//! Binary matrix container shared by corpus files.
//!
//! Layout: 4-byte magic, `u32` rows, `u32` cols (little endian), then
//! `rows * cols` little-endian `f32` values in row-major order.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const MATRIX_MAGIC: &[u8; 4] = b"PSGF";

/// Encodes a matrix into the container format.
pub fn encode_matrix(m: &Array2<f32>) -> Vec<u8> {
    let (rows, cols) = m.dim();
    let mut out = Vec::with_capacity(12 + rows * cols * 4);
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a matrix, validating magic and payload length.
pub fn decode_matrix(bytes: &[u8]) -> Result<Array2<f32>> {
    if bytes.len() < 12 {
        return Err(Error::Format("matrix container shorter than header".into()));
    }
    if &bytes[..4] != MATRIX_MAGIC {
        return Err(Error::Format(format!(
            "bad matrix magic {:?}",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let rows = read_u32(bytes, 4) as usize;
    let cols = read_u32(bytes, 8) as usize;
    let payload = &bytes[12..];
    if payload.len() != rows * cols * 4 {
        return Err(Error::Format(format!(
            "matrix payload is {} bytes, header declares {}x{}",
            payload.len(),
            rows,
            cols
        )));
    }
    let data = read_f32s(payload);
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
}

pub fn write_matrix(path: &Path, m: &Array2<f32>) -> Result<()> {
    fs::write(path, encode_matrix(m)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes)
}

pub(crate) fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub(crate) fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_little_endian() {
        let m = Array2::from_shape_vec((1, 2), vec![1.0f32, -2.5]).unwrap();
        let b = encode_matrix(&m);
        assert_eq!(&b[..4], b"PSGF");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[12..16], &1.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let m = Array2::<f32>::zeros((2, 2));
        let mut b = encode_matrix(&m);
        b.pop();
        assert!(matches!(decode_matrix(&b), Err(Error::Format(_))));
        let mut b = encode_matrix(&m);
        b[0] = b'X';
        assert!(matches!(decode_matrix(&b), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(rows in 0usize..6, cols in 0usize..6, seed in any::<u32>()) {
            let m = Array2::from_shape_fn((rows, cols), |(i, j)| {
                f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add((i * 31 + j) as u32) & 0x7f7f_ffff)
            });
            let back = decode_matrix(&encode_matrix(&m)).unwrap();
            prop_assert_eq!(back.dim(), m.dim());
            for (a, b) in back.iter().zip(m.iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
