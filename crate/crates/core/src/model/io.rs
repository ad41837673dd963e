//! Binary parameter files: a little-endian `u64` header length, a JSON header
//! describing each tensor, then the tensors as row-major little-endian `f64`.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset in `f64` elements from the start of the data section.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    tensors: Vec<TensorEntry>,
}

pub fn save_params<W: Write>(params: &[(String, &DMatrix<f64>)], mut out: W) -> Result<()> {
    let mut offset = 0;
    let tensors = params
        .iter()
        .map(|(name, m)| {
            let e = TensorEntry { name: name.clone(), rows: m.nrows(), cols: m.ncols(), offset };
            offset += m.len();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header { dtype: "f64-le".into(), tensors })?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for (_, m) in params {
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.write_all(&m[(i, j)].to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn load_params<R: Read>(mut input: R) -> Result<Vec<(String, DMatrix<f64>)>> {
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut header = vec![0u8; len];
    input.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    if header.dtype != "f64-le" {
        return Err(Error::Config(format!("unsupported dtype {}", header.dtype)));
    }
    let mut data = Vec::new();
    input.read_to_end(&mut data)?;
    let values: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    header
        .tensors
        .into_iter()
        .map(|t| {
            let end = t.offset + t.rows * t.cols;
            if data.len() % 8 != 0 || end > values.len() {
                return Err(Error::Config(format!("tensor {} runs past the end of the file", t.name)));
            }
            Ok((t.name, DMatrix::from_row_slice(t.rows, t.cols, &values[t.offset..end])))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, -2.5, 3.0, 4.0, 5.0, f64::MIN_POSITIVE]);
        let b = DMatrix::from_element(1, 4, 0.125);
        let mut buf = Vec::new();
        save_params(&[("a".into(), &a), ("b".into(), &b)], &mut buf).unwrap();
        let back = load_params(buf.as_slice()).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("b".to_string(), b)]);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let a = DMatrix::from_element(3, 3, 1.0);
        let mut buf = Vec::new();
        save_params(&[("a".into(), &a)], &mut buf).unwrap();
        buf.truncate(buf.len() - 8);
        assert!(load_params(buf.as_slice()).is_err());
    }
}
