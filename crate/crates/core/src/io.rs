//! Binary tensor files and PGM images.
//!
//! Tensor layout (all integers little-endian):
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `DQT1`                  |
//! | 4      | 4    | channels (u32)                |
//! | 8      | 4    | height (u32)                  |
//! | 12     | 4    | width (u32)                   |
//! | 16     | 1    | dtype: 0 = f32, 1 = f64       |
//! | 17     | ...  | raw little-endian samples     |

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"DQT1";
pub const TENSOR_HEADER_LEN: usize = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
    F64,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

pub fn encode_tensor(t: &Tensor, dtype: DType) -> Vec<u8> {
    let s = t.shape();
    let mut out = Vec::with_capacity(TENSOR_HEADER_LEN + dtype.size() * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    for dim in [s.channels, s.height, s.width] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.push(dtype.code());
    match dtype {
        DType::F32 => t.data().iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Decodes a tensor and reports the dtype it was stored with.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Tensor, DType)> {
    if bytes.len() < TENSOR_HEADER_LEN {
        return Err(Error::Format(format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let dims = [read_u32(bytes, 4), read_u32(bytes, 8), read_u32(bytes, 12)];
    let dtype = match bytes[16] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(Error::Format(format!("unknown dtype code {other}"))),
    };
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .and_then(|n| n.checked_mul(dtype.size()).map(|b| (n, b)));
    let Some((count, payload)) = count else {
        return Err(Error::Format(format!("shape {dims:?} overflows")));
    };
    let body = &bytes[TENSOR_HEADER_LEN..];
    if body.len() != payload {
        return Err(Error::Format(format!(
            "payload is {} bytes, header implies {payload}",
            body.len()
        )));
    }
    let data: Vec<f64> = match dtype {
        DType::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    debug_assert_eq!(data.len(), count);
    let shape = Shape::new(dims[0] as usize, dims[1] as usize, dims[2] as usize);
    Ok((Tensor::new(shape, data)?, dtype))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor, dtype: DType) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_tensor(t, dtype))?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(decode_tensor(&bytes)?.0)
}

/// Binary PGM (P5, maxval 255) of a single-channel image; values are
/// clamped to `[0, 1]` and rounded.
pub fn encode_pgm(t: &Tensor) -> Result<Vec<u8>> {
    let s = t.shape();
    if s.channels != 1 {
        return Err(Error::invalid(format!("PGM needs one channel, got {}", s.channels)));
    }
    let mut out = format!("P5\n{} {}\n255\n", s.width, s.height).into_bytes();
    out.extend(t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

fn pgm_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format("malformed PGM header".into()))
}

/// Decodes P5 with maxval up to 65535 into `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format("not a binary PGM (P5)".into()));
    }
    let mut pos = 2;
    let width = pgm_token(bytes, &mut pos)?;
    let height = pgm_token(bytes, &mut pos)?;
    let maxval = pgm_token(bytes, &mut pos)?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("PGM maxval {maxval} out of range")));
    }
    pos += 1;
    let wide = maxval > 255;
    let n = width * height;
    let need = if wide { 2 * n } else { n };
    let body = bytes.get(pos..pos + need).ok_or_else(|| Error::Format("truncated PGM".into()))?;
    let scale = 1.0 / maxval as f64;
    let data = if wide {
        body.chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * scale)
            .collect()
    } else {
        body.iter().map(|&b| b as f64 * scale).collect()
    };
    Tensor::new(Shape::new(1, height, width), data)
}

pub fn write_pgm(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_pgm(t)?)?;
    Ok(())
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_pgm(&fs::read(path)?)
}
