//! On-disk tensor formats: the native PCTN container and binary PPM (P6)
//! for 8-bit images.
//!
//! PCTN layout: magic `PCTN`, little-endian u32 rank, rank little-endian
//! u32 dims, then the row-major little-endian f32 payload.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("bad magic: expected PCTN")]
    BadMagic,
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("payload length {got} does not match shape {shape:?}")]
    LengthMismatch { got: usize, shape: Vec<usize> },
    #[error("unsupported PPM: {0}")]
    BadPpm(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<(), IoError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(b"PCTN")?;
    f.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        f.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor, IoError> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| IoError::Truncated("magic".into()))?;
    if &magic != b"PCTN" {
        return Err(IoError::BadMagic);
    }
    let mut u32buf = [0u8; 4];
    f.read_exact(&mut u32buf)
        .map_err(|_| IoError::Truncated("rank".into()))?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        f.read_exact(&mut u32buf)
            .map_err(|_| IoError::Truncated("dims".into()))?;
        shape.push(u32::from_le_bytes(u32buf) as usize);
    }
    let n: usize = shape.iter().product();
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;
    if payload.len() != 4 * n {
        return Err(IoError::LengthMismatch {
            got: payload.len() / 4,
            shape,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::new(shape, data).expect("validated length"))
}

/// Reads a binary PPM (P6, maxval 255) into a `[3, H, W]` tensor with
/// values in [0, 255].
pub fn read_ppm(path: &Path) -> Result<Tensor, IoError> {
    let bytes = std::fs::read(path)?;
    let mut pos = 0usize;
    let mut token = || -> Result<String, IoError> {
        // Skip whitespace and comments.
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(IoError::Truncated("header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(IoError::BadPpm("not P6".into()));
    }
    let parse = |s: String| {
        s.parse::<usize>()
            .map_err(|_| IoError::BadPpm(format!("bad header number '{s}'")))
    };
    let w = parse(token()?)?;
    let h = parse(token()?)?;
    let maxval = parse(token()?)?;
    if maxval != 255 {
        return Err(IoError::BadPpm(format!("maxval {maxval} unsupported")));
    }
    let data_start = pos + 1; // single whitespace after maxval
    let needed = 3 * w * h;
    if bytes.len() < data_start + needed {
        return Err(IoError::Truncated("pixel data".into()));
    }
    // Interleaved RGB rows -> planar [3, H, W].
    let mut data = vec![0.0f32; needed];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = bytes[data_start + (y * w + x) * 3 + c] as f32;
            }
        }
    }
    Ok(Tensor::new(vec![3, h, w], data).expect("validated length"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pctn");
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.5, 0.0, 4.25, 1e-7, 9.0]).unwrap();
        write_tensor(&p, &t).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.pctn");
        std::fs::write(&p, b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x80\x3f").unwrap();
        assert!(matches!(read_tensor(&p), Err(IoError::BadMagic)));
    }

    #[test]
    fn short_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("short.pctn");
        let mut bytes = b"PCTN".to_vec();
        bytes.extend(1u32.to_le_bytes());
        bytes.extend(4u32.to_le_bytes());
        bytes.extend(1.0f32.to_le_bytes()); // only 1 of 4 values
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_tensor(&p), Err(IoError::LengthMismatch { .. })));
    }

    #[test]
    fn ppm_roundtrip_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.ppm");
        // 2x1 image: red then blue.
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend([255, 0, 0, 0, 0, 255]);
        std::fs::write(&p, bytes).unwrap();
        let t = read_ppm(&p).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[255.0, 0.0, 0.0, 0.0, 0.0, 255.0, 0.0, 0.0]
            [..0] // placeholder, replaced below
        );
    }
}
