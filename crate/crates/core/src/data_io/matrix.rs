//! Binary matrix files.
//!
//! Layout (little-endian): magic `FAVM`, format version `u16`, reserved
//! `u16` (zero), rows `u32`, cols `u32`, then `rows × cols` `f64` values in
//! row-major order.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{FaError, Result};

pub const MATRIX_MAGIC: [u8; 4] = *b"FAVM";
pub const MATRIX_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_matrix(m: &DMatrix<f64>) -> Vec<u8> {
    let (rows, cols) = m.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * rows * cols);
    out.extend_from_slice(&MATRIX_MAGIC);
    out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for r in 0..rows {
        for c in 0..cols {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
    out
}

/// Parses a matrix buffer. `context` names the source in errors.
pub fn decode_matrix(bytes: &[u8], context: &str) -> Result<DMatrix<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(FaError::format(
            context,
            format!("{} bytes is shorter than the header", bytes.len()),
        ));
    }
    if bytes[..4] != MATRIX_MAGIC {
        return Err(FaError::format(context, "bad magic, expected FAVM"));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = u16_at(4);
    if version != MATRIX_VERSION {
        return Err(FaError::Version {
            found: format!("matrix format {version}"),
            supported: format!("matrix format {MATRIX_VERSION}"),
        });
    }
    let rows = u32_at(8) as usize;
    let cols = u32_at(12) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| FaError::format(context, "header dimensions overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(FaError::dim(
            format!("{context} payload bytes for {rows}×{cols}"),
            expected,
            payload.len(),
        ));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    Ok(DMatrix::from_row_iterator(rows, cols, values))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path).map_err(|e| FaError::io(path, e))?;
    decode_matrix(&bytes, &path.display().to_string())
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    fs::write(path, encode_matrix(m)).map_err(|e| FaError::io(path, e))
}
