//! `DQW1` network checkpoints.
//!
//! All integers are little-endian `u32`, all arrays little-endian `f32`:
//!
//! ```text
//! magic "DQW1" | version | layer count L | flags (bit 0: residual) | spectral size S
//! L x (c_in, c_out, k)
//! L x (weight[c_out*c_in*k*k], bias[c_out], u[c_in*S*S], v[c_out*S*S])
//! ```

use std::path::Path;

use super::{ConvLayer, RegNet};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DQW1";
const VERSION: u32 = 1;

pub fn encode_checkpoint(net: &RegNet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let put = |out: &mut Vec<u8>, v: u32| out.extend_from_slice(&v.to_le_bytes());
    put(&mut out, VERSION);
    put(&mut out, net.layers.len() as u32);
    put(&mut out, net.residual as u32);
    put(&mut out, net.spectral_size as u32);
    for l in &net.layers {
        put(&mut out, l.c_in as u32);
        put(&mut out, l.c_out as u32);
        put(&mut out, l.k as u32);
    }
    for l in &net.layers {
        for v in l.weight.iter().chain(&l.bias).chain(&l.u).chain(&l.v) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(4).ok_or_else(|| Error::Format("array size overflows".into()))?;
        let raw = self.take(bytes)?;
        let out: Vec<f64> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite weight in checkpoint".into()));
        }
        Ok(out)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<RegNet> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()?;
    let residual = (r.u32()? & 1) == 1;
    let size = r.u32()?;
    if count == 0 || count > 1024 {
        return Err(Error::Format(format!("implausible layer count {count}")));
    }
    let table = (0..count).map(|_| Ok((r.u32()?, r.u32()?, r.u32()?))).collect::<Result<Vec<_>>>()?;
    let plane = size.checked_mul(size).ok_or_else(|| Error::Format("spectral size overflows".into()))?;
    let mut layers = Vec::with_capacity(count);
    for (c_in, c_out, k) in table {
        let wlen = c_out
            .checked_mul(c_in)
            .and_then(|v| v.checked_mul(k))
            .and_then(|v| v.checked_mul(k))
            .ok_or_else(|| Error::Format("layer shape overflows".into()))?;
        let weight = r.f32s(wlen)?;
        let bias = r.f32s(c_out)?;
        let mut layer = ConvLayer::new(c_in, c_out, k, weight, bias).map_err(|e| Error::Format(e.to_string()))?;
        layer.u = r.f32s(c_in * plane)?;
        layer.v = r.f32s(c_out * plane)?;
        layers.push(layer);
    }
    if r.at != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.at)));
    }
    RegNet::from_layers(layers, residual, size, 0).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_checkpoint(path: impl AsRef<Path>, net: &RegNet) -> Result<()> {
    std::fs::write(path, encode_checkpoint(net))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<RegNet> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    decode_checkpoint(&std::fs::read(path)?)
}
