//! Probe checkpoint container.
//!
//! Layout (little-endian): magic `STEPCKPT`, u16 version, u32 config length,
//! TOML config text, u32 tensor count, then per tensor: u16 name length, name,
//! u8 dtype (0 = f32), u8 rank, u32 per dim, f32 payload. A CRC-32 of every
//! preceding byte closes the file.

use std::fs;
use std::path::Path;

use super::config::ProbeConfig;
use super::model::ProbeModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STEPCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

pub fn encode_checkpoint(model: &ProbeModel<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = model.config().to_toml();
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, tensor) in model.params() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(tensor.rank() as u8);
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated { path: self.path.into(), needed: end + 4, found: self.bytes.len() + 4 });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn text(&mut self, n: usize) -> Result<&'a str> {
        let path = self.path;
        std::str::from_utf8(self.take(n)?)
            .map_err(|e| Error::Parse { path: path.into(), line: 0, msg: format!("invalid UTF-8: {e}") })
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<ProbeModel<f32>> {
    if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { path: path.into(), expected: "STEPCKPT" });
    }
    if bytes.len() < 14 {
        return Err(Error::Truncated { path: path.into(), needed: 14, found: bytes.len() });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let mut cur = Cursor { bytes: body, pos: 8, path };
    let version = cur.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { path: path.into(), found: version, expected: CHECKPOINT_VERSION });
    }
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { path: path.into(), stored, computed });
    }
    let config_len = cur.u32()? as usize;
    let config = ProbeConfig::from_toml(cur.text(config_len)?)?;
    let count = cur.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = cur.text(name_len)?.to_string();
        let dtype = cur.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Parse { path: path.into(), line: 0, msg: format!("tensor {name}: unknown dtype {dtype}") });
        }
        let rank = cur.u8()? as usize;
        let shape = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = cur
            .take(4 * numel)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((name, Tensor::new(shape, data)?));
    }
    if cur.pos != body.len() {
        return Err(Error::TrailingData { path: path.into(), extra: body.len() - cur.pos });
    }
    ProbeModel::from_params(config, params)
}

pub fn save_checkpoint(path: &Path, model: &ProbeModel<f32>) -> Result<()> {
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ProbeModel<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FeatureDims;
    use crate::probe::ProbeVariant;

    fn model(v: ProbeVariant) -> ProbeModel<f32> {
        let dims = FeatureDims { frames: 3, tokens: 2, dim: 8 };
        ProbeModel::init(&ProbeConfig::preset(v, dims, 2, 4)).unwrap()
    }

    #[test]
    fn round_trip_every_variant() {
        for v in ProbeVariant::ALL {
            let m = model(v);
            let back = decode_checkpoint(&encode_checkpoint(&m), Path::new("m.ckpt")).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_checkpoint(&model(ProbeVariant::Step));
        let p = Path::new("m.ckpt");
        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(decode_checkpoint(&flipped, p), Err(Error::Checksum { .. })));
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(decode_checkpoint(&magic, p), Err(Error::BadMagic { .. })));
        let mut version = bytes.clone();
        version[8] = 9;
        assert!(matches!(decode_checkpoint(&version, p), Err(Error::VersionMismatch { found: 9, .. })));
    }
}
