//! CEF1 dense matrix files.
//!
//! Layout (all little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `b"CEF1"`                         |
//! | 4      | 4    | rows, `u32`                             |
//! | 8      | 4    | cols, `u32`                             |
//! | 12     | 4    | payload kind, `u32` (0 = f32, 1 = f64)  |
//! | 16     | …    | row-major payload                       |
//!
//! Feature files always use kind 0 (single precision, promoted on load).
//! Kind 1 carries double-precision checkpoint tensors.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CEF1";
pub const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Payload {
    F32 = 0,
    F64 = 1,
}

impl Payload {
    fn width(self) -> usize {
        match self {
            Payload::F32 => 4,
            Payload::F64 => 8,
        }
    }
}

fn matrix_dims<T: Scalar>(m: &Tensor<T>) -> (usize, usize) {
    m.dims()
}

/// Serializes a matrix; every value must be finite.
pub fn encode<T: Scalar>(m: &Tensor<T>, payload: Payload) -> Result<Vec<u8>> {
    let (rows, cols) = matrix_dims(m);
    let too_big = |what: &str| Error::Contract(format!("{what} {} exceeds u32", rows.max(cols)));
    let r = u32::try_from(rows).map_err(|_| too_big("rows"))?;
    let c = u32::try_from(cols).map_err(|_| too_big("cols"))?;
    if let Some(k) = m.data().iter().position(|x| !x.is_finite()) {
        return Err(Error::Contract(format!("non-finite value at flat index {k}")));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + m.len() * payload.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&r.to_le_bytes());
    out.extend_from_slice(&c.to_le_bytes());
    out.extend_from_slice(&(payload as u32).to_le_bytes());
    for &x in m.data() {
        match payload {
            Payload::F32 => out.extend_from_slice(&(x.to_f64_lossy() as f32).to_le_bytes()),
            Payload::F64 => out.extend_from_slice(&x.to_f64_lossy().to_le_bytes()),
        }
    }
    Ok(out)
}

/// Parses CEF1 bytes; `path` only labels errors.
pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Tensor<T>> {
    let fail = |offset: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(fail(0, "bad magic, expected \"CEF1\"".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(fail(bytes.len(), "truncated header".into()));
    }
    let word = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    let rows = word(4) as usize;
    let cols = word(8) as usize;
    let payload = match word(12) {
        0 => Payload::F32,
        1 => Payload::F64,
        k => return Err(fail(12, format!("unknown payload kind {k}"))),
    };
    let need = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(payload.width()))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| fail(4, format!("extent {rows}×{cols} overflows")))?;
    if bytes.len() < need {
        return Err(fail(
            bytes.len(),
            format!("truncated payload: {rows}×{cols} needs {need} bytes, file has {}", bytes.len()),
        ));
    }
    if bytes.len() > need {
        return Err(fail(need, format!("{} trailing bytes", bytes.len() - need)));
    }
    let body = &bytes[HEADER_LEN..need];
    let data: Vec<T> = match payload {
        Payload::F32 => body
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect(),
        Payload::F64 => body
            .chunks_exact(8)
            .map(|c| {
                T::lit(f64::from_le_bytes([
                    c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7],
                ]))
            })
            .collect(),
    };
    Tensor::matrix(rows, cols, data)
}

/// Writes a single-precision feature matrix.
pub fn write_matrix<T: Scalar>(path: &Path, m: &Tensor<T>) -> Result<()> {
    write_with(path, m, Payload::F32)
}

pub fn write_with<T: Scalar>(path: &Path, m: &Tensor<T>, payload: Payload) -> Result<()> {
    let bytes = encode(m, payload)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_matrix<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn minimal_round_trip() {
        let m = Tensor::<f64>::matrix(1, 1, vec![42.0]).unwrap();
        let bytes = encode(&m, Payload::F32).unwrap();
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[..4], b"CEF1");
        assert_eq!(&bytes[12..16], &[0, 0, 0, 0]);
        assert_eq!(decode::<f64>(&bytes, Path::new("x")).unwrap(), m);
    }

    #[test]
    fn zero_rows_is_valid() {
        let m = Tensor::<f64>::zeros(&[0, 5]);
        let bytes = encode(&m, Payload::F32).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        let back = decode::<f64>(&bytes, Path::new("x")).unwrap();
        assert_eq!(back.shape(), &[0, 5]);
    }

    #[test]
    fn random_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let data: Vec<f64> = (0..7 * 13).map(|_| rng.random::<f32>() as f64 * 8.0 - 4.0).collect();
        let m = Tensor::matrix(7, 13, data).unwrap();
        let back: Tensor<f64> = decode(&encode(&m, Payload::F32).unwrap(), Path::new("x")).unwrap();
        for (a, b) in m.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let wide = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let back: Tensor<f64> = decode(&encode(&wide, Payload::F64).unwrap(), Path::new("x")).unwrap();
        assert_eq!(back, wide);
    }

    #[test]
    fn format_errors_carry_offsets() {
        let p = Path::new("f.cef");
        let good = encode(&Tensor::<f64>::zeros(&[2, 2]), Payload::F32).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode::<f64>(&bad, p), Err(Error::Format { offset: 0, .. })));

        let short = &good[..good.len() - 3];
        assert!(matches!(decode::<f64>(short, p), Err(Error::Format { offset: 29, .. })));

        let mut huge = good.clone();
        huge[4..8].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        let err = decode::<f64>(&huge, p).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");

        let mut kind = good;
        kind[12] = 9;
        assert!(matches!(decode::<f64>(&kind, p), Err(Error::Format { offset: 12, .. })));
    }

    #[test]
    fn non_finite_rejected_on_write() {
        let m = Tensor::<f64>::vector(vec![1.0, f64::NAN]);
        assert!(encode(&m, Payload::F32).is_err());
    }
}
