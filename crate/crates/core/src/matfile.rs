//! Binary matrix payloads: a shape header (`rows`, `cols` as little-endian `u64`)
//! followed by the entries as little-endian `f64` in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn encode(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * m.len());
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> std::result::Result<DMatrix<f64>, String> {
    if bytes.len() < 16 {
        return Err("missing shape header".into());
    }
    let word = |i: usize| u64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().expect("8 bytes"));
    let (rows, cols) = (word(0) as usize, word(1) as usize);
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(16))
        .ok_or("shape header overflows")?;
    if bytes.len() != expected {
        return Err(format!(
            "{rows}x{cols} matrix needs {expected} bytes, file has {}",
            bytes.len()
        ));
    }
    Ok(DMatrix::from_row_iterator(
        rows,
        cols,
        bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))),
    ))
}

pub fn write(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(m)).map_err(|e| Error::io(path, e))
}

pub fn read(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::MalformedFile {
        path: path.to_path_buf(),
        reason,
    })
}

/// Inline JSON form of a matrix: shape plus row-major entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&DMatrix<f64>> for JsonMatrix {
    fn from(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        }
    }
}

impl JsonMatrix {
    pub fn to_matrix(&self) -> std::result::Result<DMatrix<f64>, String> {
        if self.rows * self.cols != self.data.len() {
            return Err(format!(
                "{}x{} matrix with {} entries",
                self.rows,
                self.cols,
                self.data.len()
            ));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_row_major_little_endian() {
        let m = DMatrix::from_row_slice(2, 3, &[1., 2., 3., 4., 5., 6.]);
        let b = encode(&m);
        assert_eq!(&b[..8], &2u64.to_le_bytes());
        assert_eq!(&b[8..16], &3u64.to_le_bytes());
        assert_eq!(&b[16..24], &1.0f64.to_le_bytes());
        assert_eq!(&b[24..32], &2.0f64.to_le_bytes());
        assert_eq!(decode(&b).unwrap(), m);
        assert!(decode(&b[..b.len() - 1]).is_err());
        assert!(decode(&b[..10]).is_err());
    }

    #[test]
    fn json_matrix_round_trip() {
        let m = DMatrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64 / 3.0);
        let j = JsonMatrix::from(&m);
        assert_eq!(j.data[1], m[(0, 1)]);
        assert_eq!(j.to_matrix().unwrap(), m);
    }
}
