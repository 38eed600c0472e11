//! `PITM` raw matrix files.
//!
//! Layout, little-endian: `"PITM"`, version `u32`, rows `u64`, cols `u64`,
//! dtype `u8` (0 = f32), then `rows·cols` row-major f32 values.

use std::path::Path;

use super::atomic::{f32_payload, read_f32s, write_atomic, Reader};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Precision};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"PITM";
pub const EMBEDDING_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 4 + 4 + 8 + 8 + 1;

pub fn encode_matrix(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + m.data().len() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    out.push(DTYPE_F32);
    f32_payload(m.data(), &mut out);
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != EMBEDDING_MAGIC {
        return Err(Error::Format("not an embedding file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != EMBEDDING_VERSION {
        return Err(Error::Format(format!("unsupported embedding file version {version}")));
    }
    let rows = r.u64()?;
    let cols = r.u64()?;
    let dtype = r.u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype {dtype}")));
    }
    let expected = rows.checked_mul(cols).and_then(|n| n.checked_mul(4));
    let payload = bytes.len() - r.pos();
    if expected != Some(payload as u64) {
        return Err(Error::Format(format!("{rows}x{cols} f32 matrix needs {} payload bytes, found {payload}", rows * cols * 4)));
    }
    let data = read_f32s(r.take(payload)?);
    Ok(Matrix::from_vec(rows as usize, cols as usize, data)?.with_precision(Precision::F32))
}

pub fn write_embedding(path: &Path, m: &Matrix) -> Result<()> {
    write_atomic(path, &encode_matrix(m))
}

pub fn read_embedding(path: &Path) -> Result<Matrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    decode_matrix(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_exact() {
        let m = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0], vec![0.0, 1.0]]).unwrap();
        let b = encode_matrix(&m);
        assert_eq!(&b[..4], b"PITM");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..16], &3u64.to_le_bytes());
        assert_eq!(&b[16..24], &2u64.to_le_bytes());
        assert_eq!(b[24], 0);
        assert_eq!(b.len(), 25 + 24);
        assert_eq!(&b[25..29], &1.0f32.to_le_bytes());
        assert_eq!(&b[29..33], &(-2.0f32).to_le_bytes());
        assert_eq!(decode_matrix(&b).unwrap().data(), m.data());
    }

    #[test]
    fn rejects_bad_files() {
        let b = encode_matrix(&Matrix::gaussian(4, 3, 1));
        assert!(decode_matrix(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(decode_matrix(&extra).is_err());
        let mut magic = b.clone();
        magic[0] = b'X';
        assert!(decode_matrix(&magic).is_err());
        let mut dtype = b.clone();
        dtype[24] = 1;
        assert!(decode_matrix(&dtype).is_err());
        assert!(decode_matrix(&b[..10]).is_err());
    }

    #[test]
    fn file_roundtrip_rounds_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.pitm");
        let m = Matrix::gaussian(7, 3, 2);
        write_embedding(&p, &m).unwrap();
        let back = read_embedding(&p).unwrap();
        assert_eq!(back.data(), m.with_precision(Precision::F32).data());
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip(rows in 1usize..30, cols in 1usize..30, seed in 0u64..1000) {
            let m = Matrix::gaussian(rows, cols, seed).with_precision(Precision::F32);
            let bytes = encode_matrix(&m);
            prop_assert_eq!(bytes.len(), 25 + 4 * rows * cols);
            let back = decode_matrix(&bytes).unwrap();
            prop_assert_eq!(back.shape(), m.shape());
            prop_assert_eq!(back.data(), m.data());
        }
    }
}
