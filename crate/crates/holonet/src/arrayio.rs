//! Raw array container used for dataset artifacts.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic "HOLOARR1" (8 bytes)
//! dtype: u32        0 = f32, 1 = u16 (quantized), 2 = c64 (interleaved f32)
//! ndim:  u32
//! dims:  u32 x ndim (row-major)
//! scale: f32        only for dtype 1; value = raw / 65535 * scale
//! payload           raw little-endian values
//! ```

use num_complex::Complex32;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"HOLOARR1";

#[derive(Debug, Error)]
pub enum ArrayIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic (not a HOLOARR1 file)")]
    BadMagic { path: String },
    #[error("{path}: unknown dtype code {code}")]
    BadDtype { path: String, code: u32 },
    #[error("{path}: payload truncated")]
    Truncated { path: String },
    #[error("{path}: dims {dims:?} do not match expected {expected:?}")]
    DimsMismatch {
        path: String,
        dims: Vec<usize>,
        expected: Vec<usize>,
    },
}

/// Typed payload of an array file.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    /// 16-bit quantization: value = raw / 65535 * scale.
    U16 { raw: Vec<u16>, scale: f32 },
    C64(Vec<Complex32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dequantized f32 view regardless of dtype (c64 yields magnitudes).
    pub fn to_f32(&self) -> Vec<f32> {
        match &self.data {
            ArrayData::F32(v) => v.clone(),
            ArrayData::U16 { raw, scale } => raw
                .iter()
                .map(|&r| r as f32 / 65535.0 * scale)
                .collect(),
            ArrayData::C64(v) => v.iter().map(|c| c.norm()).collect(),
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> ArrayIoError {
    ArrayIoError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_array(path: &Path, array: &Array) -> Result<(), ArrayIoError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_err(path, e));
    emit(MAGIC)?;
    let dtype: u32 = match &array.data {
        ArrayData::F32(_) => 0,
        ArrayData::U16 { .. } => 1,
        ArrayData::C64(_) => 2,
    };
    emit(&dtype.to_le_bytes())?;
    emit(&(array.dims.len() as u32).to_le_bytes())?;
    for &d in &array.dims {
        emit(&(d as u32).to_le_bytes())?;
    }
    match &array.data {
        ArrayData::F32(v) => {
            debug_assert_eq!(v.len(), array.len());
            for x in v {
                emit(&x.to_le_bytes())?;
            }
        }
        ArrayData::U16 { raw, scale } => {
            debug_assert_eq!(raw.len(), array.len());
            emit(&scale.to_le_bytes())?;
            for x in raw {
                emit(&x.to_le_bytes())?;
            }
        }
        ArrayData::C64(v) => {
            debug_assert_eq!(v.len(), array.len());
            for c in v {
                emit(&c.re.to_le_bytes())?;
                emit(&c.im.to_le_bytes())?;
            }
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_array(path: &Path) -> Result<Array, ArrayIoError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(ArrayIoError::BadMagic {
            path: path.display().to_string(),
        });
    }
    let dtype = read_u32(&mut r, path)?;
    let ndim = read_u32(&mut r, path)? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(read_u32(&mut r, path)? as usize);
    }
    let n: usize = dims.iter().product();
    let truncated = |_| ArrayIoError::Truncated {
        path: path.display().to_string(),
    };
    let data = match dtype {
        0 => {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf).map_err(truncated)?;
            ArrayData::F32(
                buf.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        1 => {
            let mut sb = [0u8; 4];
            r.read_exact(&mut sb).map_err(truncated)?;
            let scale = f32::from_le_bytes(sb);
            let mut buf = vec![0u8; n * 2];
            r.read_exact(&mut buf).map_err(truncated)?;
            ArrayData::U16 {
                raw: buf
                    .chunks_exact(2)
                    .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
                scale,
            }
        }
        2 => {
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf).map_err(truncated)?;
            ArrayData::C64(
                buf.chunks_exact(8)
                    .map(|c| {
                        Complex32::new(
                            f32::from_le_bytes(c[0..4].try_into().unwrap()),
                            f32::from_le_bytes(c[4..8].try_into().unwrap()),
                        )
                    })
                    .collect(),
            )
        }
        code => {
            return Err(ArrayIoError::BadDtype {
                path: path.display().to_string(),
                code,
            })
        }
    };
    Ok(Array { dims, data })
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32, ArrayIoError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

/// Write f32 values as a 16-bit quantized array; values must lie in
/// [0, scale]. Round trip error is at most scale / 131070.
pub fn quantize_u16(values: &[f32], scale: f32) -> Vec<u16> {
    values
        .iter()
        .map(|&v| ((v / scale * 65535.0).round().clamp(0.0, 65535.0)) as u16)
        .collect()
}

/// Read an array and check its dimensions.
pub fn read_array_expecting(path: &Path, expected: &[usize]) -> Result<Array, ArrayIoError> {
    let a = read_array(path)?;
    if a.dims != expected {
        return Err(ArrayIoError::DimsMismatch {
            path: path.display().to_string(),
            dims: a.dims,
            expected: expected.to_vec(),
        });
    }
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.arr");
        let a = Array {
            dims: vec![2, 3],
            data: ArrayData::F32(vec![0.0, -1.5, 3.25, f32::MIN_POSITIVE, 1e30, -0.0]),
        };
        write_array(&path, &a).unwrap();
        assert_eq!(read_array(&path).unwrap(), a);
    }

    #[test]
    fn u16_round_trip_carries_scale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("q.arr");
        let values = vec![0.0f32, 0.25, 0.5, 1.0];
        let a = Array {
            dims: vec![4],
            data: ArrayData::U16 {
                raw: quantize_u16(&values, 1.0),
                scale: 1.0,
            },
        };
        write_array(&path, &a).unwrap();
        let back = read_array(&path).unwrap();
        for (got, want) in back.to_f32().iter().zip(&values) {
            assert!((got - want).abs() <= 1.0 / 131070.0);
        }
    }

    #[test]
    fn c64_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.arr");
        let a = Array {
            dims: vec![2, 1],
            data: ArrayData::C64(vec![Complex32::new(1.0, -2.0), Complex32::new(0.5, 0.0)]),
        };
        write_array(&path, &a).unwrap();
        assert_eq!(read_array(&path).unwrap(), a);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.arr");
        std::fs::write(&path, b"NOTANARR00000000").unwrap();
        assert!(matches!(
            read_array(&path),
            Err(ArrayIoError::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.arr");
        let a = Array {
            dims: vec![8],
            data: ArrayData::F32(vec![1.0; 8]),
        };
        write_array(&path, &a).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            read_array(&path),
            Err(ArrayIoError::Truncated { .. })
        ));
    }

    #[test]
    fn dims_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.arr");
        let a = Array {
            dims: vec![2, 2],
            data: ArrayData::F32(vec![0.0; 4]),
        };
        write_array(&path, &a).unwrap();
        assert!(read_array_expecting(&path, &[2, 2]).is_ok());
        assert!(matches!(
            read_array_expecting(&path, &[4]),
            Err(ArrayIoError::DimsMismatch { .. })
        ));
    }
}
