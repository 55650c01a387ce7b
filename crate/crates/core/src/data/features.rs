//! Per-clip frozen backbone features and their on-disk container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic "STEPFEAT"
//! 8       2     u16 version (= 1)
//! 10      1     u8 flags, bit 0: frame CLS block present
//! 11      4     u32 T (frames)
//! 15      4     u32 n (patch tokens per frame)
//! 19      4     u32 d (feature dim)
//! 23      4·T·n·d   f32 patch tokens, row-major [T][n][d]
//! ..      4·T·d     f32 frame CLS tokens [T][d] (only if flagged)
//! ..      4     u32 CRC-32 (IEEE) of the float payload bytes
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 8] = b"STEPFEAT";
pub const FEATURE_VERSION: u16 = 1;
pub const FEATURE_EXTENSION: &str = "stepf";
const HEADER_LEN: usize = 23;
const FLAG_FRAME_CLS: u8 = 0b1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureDims {
    pub frames: usize,
    pub tokens: usize,
    pub dim: usize,
}

/// One clip's backbone output: `T` frames of `n` patch tokens, plus an
/// optional per-frame CLS token, all of width `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub clip_id: String,
    patch_tokens: Tensor<f32>,
    frame_cls: Option<Tensor<f32>>,
}

impl FeatureSequence {
    pub fn new(
        clip_id: impl Into<String>,
        dims: FeatureDims,
        patch_tokens: Vec<f32>,
        frame_cls: Option<Vec<f32>>,
    ) -> Result<Self> {
        let FeatureDims { frames, tokens, dim } = dims;
        if frames == 0 || tokens == 0 || dim == 0 {
            return Err(Error::Contract(format!("feature dims must be positive, got {dims:?}")));
        }
        let patch_tokens = Tensor::new(vec![frames, tokens, dim], patch_tokens)?;
        let frame_cls = frame_cls.map(|c| Tensor::new(vec![frames, dim], c)).transpose()?;
        let finite = patch_tokens.is_finite() && frame_cls.as_ref().is_none_or(|c| c.is_finite());
        if !finite {
            return Err(Error::Numeric("feature values must be finite".into()));
        }
        Ok(Self { clip_id: clip_id.into(), patch_tokens, frame_cls })
    }

    pub fn dims(&self) -> FeatureDims {
        let s = self.patch_tokens.shape();
        FeatureDims { frames: s[0], tokens: s[1], dim: s[2] }
    }

    pub fn patch_tokens(&self) -> &Tensor<f32> {
        &self.patch_tokens
    }

    pub fn frame_cls(&self) -> Option<&Tensor<f32>> {
        self.frame_cls.as_ref()
    }

    /// Patch tokens of frame `t`, `n·d` values.
    pub fn patch_frame(&self, t: usize) -> &[f32] {
        let FeatureDims { tokens, dim, .. } = self.dims();
        &self.patch_tokens.data()[t * tokens * dim..(t + 1) * tokens * dim]
    }

    pub fn cls_frame(&self, t: usize) -> Option<&[f32]> {
        let dim = self.dims().dim;
        self.frame_cls.as_ref().map(|c| &c.data()[t * dim..(t + 1) * dim])
    }

    /// Reorders frames so that output frame `i` is input frame `order[i]`.
    pub fn permute_frames(&self, order: &[usize]) -> Self {
        let dims = self.dims();
        assert_eq!(order.len(), dims.frames, "permutation length");
        let patches = order.iter().flat_map(|&t| self.patch_frame(t).iter().copied()).collect();
        let cls = self
            .frame_cls
            .as_ref()
            .map(|_| order.iter().flat_map(|&t| self.cls_frame(t).unwrap().iter().copied()).collect());
        Self {
            clip_id: self.clip_id.clone(),
            patch_tokens: Tensor::new(vec![dims.frames, dims.tokens, dims.dim], patches)
                .expect("same size"),
            frame_cls: cls.map(|c| Tensor::new(vec![dims.frames, dims.dim], c).expect("same size")),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let FeatureDims { frames, tokens, dim } = self.dims();
        let payload_len = 4 * (self.patch_tokens.numel() + self.frame_cls.as_ref().map_or(0, |c| c.numel()));
        let mut out = Vec::with_capacity(HEADER_LEN + payload_len + 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.push(if self.frame_cls.is_some() { FLAG_FRAME_CLS } else { 0 });
        for v in [frames, tokens, dim] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let floats = self
            .patch_tokens
            .data()
            .iter()
            .chain(self.frame_cls.iter().flat_map(|c| c.data()));
        for v in floats {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[HEADER_LEN..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Decodes a container; `path` is used for diagnostics and, through its
    /// file stem, as the clip id.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |needed: usize| Error::Truncated { path: path.into(), needed, found: bytes.len() };
        if bytes.len() < FEATURE_MAGIC.len() {
            return Err(truncated(HEADER_LEN));
        }
        if &bytes[..8] != FEATURE_MAGIC {
            return Err(Error::BadMagic { path: path.into(), expected: "STEPFEAT" });
        }
        if bytes.len() < HEADER_LEN {
            return Err(truncated(HEADER_LEN));
        }
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != FEATURE_VERSION {
            return Err(Error::VersionMismatch { path: path.into(), found: version, expected: FEATURE_VERSION });
        }
        let flags = bytes[10];
        if flags & !FLAG_FRAME_CLS != 0 {
            return Err(Error::Parse { path: path.into(), line: 0, msg: format!("unknown flag bits {flags:#04x}") });
        }
        let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let dims = FeatureDims { frames: read_u32(11), tokens: read_u32(15), dim: read_u32(19) };
        let cls_rows = if flags & FLAG_FRAME_CLS != 0 { dims.frames } else { 0 };
        // Saturates so absurd headers report as truncation instead of overflowing.
        let patch_len = dims.frames.saturating_mul(dims.tokens).saturating_mul(dims.dim);
        let cls_len = cls_rows.saturating_mul(dims.dim);
        let payload_bytes = patch_len.saturating_add(cls_len).saturating_mul(4);
        let needed = payload_bytes.saturating_add(HEADER_LEN + 4);
        if bytes.len() < needed {
            return Err(truncated(needed));
        }
        if bytes.len() > needed {
            return Err(Error::TrailingData { path: path.into(), extra: bytes.len() - needed });
        }
        let payload = &bytes[HEADER_LEN..HEADER_LEN + payload_bytes];
        let stored = u32::from_le_bytes(bytes[needed - 4..].try_into().unwrap());
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Checksum { path: path.into(), stored, computed });
        }
        let mut floats = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let patches: Vec<f32> = floats.by_ref().take(patch_len).collect();
        let cls = (cls_len > 0).then(|| floats.collect::<Vec<f32>>());
        let clip_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::new(clip_id, dims, patches, cls)
    }
}

pub fn write_features(path: &Path, features: &FeatureSequence) -> Result<()> {
    fs::write(path, features.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureSequence::decode(&bytes, path)
}
