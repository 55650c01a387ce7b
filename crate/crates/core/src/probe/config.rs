use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::FeatureDims;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeVariant {
    /// Mean of frame CLS tokens into a linear classifier.
    Linear,
    /// One learned query cross-attending over all tokens.
    Attentive,
    /// Self-attention over frame tokens, mean-pooled.
    SelfAttn,
    /// Self-attention with a global CLS token and temporal embeddings.
    Step,
}

impl ProbeVariant {
    pub const ALL: [ProbeVariant; 4] =
        [ProbeVariant::Linear, ProbeVariant::Attentive, ProbeVariant::SelfAttn, ProbeVariant::Step];

    pub fn name(self) -> &'static str {
        match self {
            ProbeVariant::Linear => "linear",
            ProbeVariant::Attentive => "attentive",
            ProbeVariant::SelfAttn => "self-attn",
            ProbeVariant::Step => "step",
        }
    }

    pub fn is_self_attention(self) -> bool {
        matches!(self, ProbeVariant::SelfAttn | ProbeVariant::Step)
    }
}

impl fmt::Display for ProbeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProbeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let valid: Vec<_> = Self::ALL.iter().map(|v| v.name()).collect();
            Error::Config(format!("unknown probe {s:?}; valid probes: {}", valid.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeScheme {
    None,
    FixedSinusoidal,
    Learnable,
    /// Fixed sinusoid plus a learnable offset that starts at zero.
    Hybrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PeGranularity {
    /// One row per frame, shared by every token of that frame.
    FrameWise,
    /// One row per patch position across the clip (`T·n` rows).
    TokenWise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockStyle {
    /// Bare multi-head self-attention.
    AttnOnly,
    /// Pre-norm attention with a residual connection.
    AttnLnSkip,
    /// Pre-norm attention and 4× GELU feed-forward, both residual.
    FullBlock,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// CLS-type tokens only: the global CLS (if any) plus frame CLS tokens.
    GlobalClsOnly,
    PatchOnly,
    Combined,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClsMode {
    PerFrameCls,
    GlobalCls,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub variant: ProbeVariant,
    pub d_model: usize,
    pub num_heads: usize,
    pub num_classes: usize,
    pub num_frames: usize,
    pub tokens_per_frame: usize,
    pub pe_scheme: PeScheme,
    pub pe_granularity: PeGranularity,
    pub block_style: BlockStyle,
    pub aggregation: Aggregation,
    pub cls_mode: ClsMode,
    pub seed: u64,
}

impl ProbeConfig {
    /// Canonical configuration of `variant` for the given feature shape.
    pub fn preset(variant: ProbeVariant, dims: FeatureDims, num_heads: usize, num_classes: usize) -> Self {
        let (pe_scheme, cls_mode) = match variant {
            ProbeVariant::Step => (PeScheme::Learnable, ClsMode::GlobalCls),
            _ => (PeScheme::None, ClsMode::PerFrameCls),
        };
        Self {
            variant,
            d_model: dims.dim,
            num_heads,
            num_classes,
            num_frames: dims.frames,
            tokens_per_frame: dims.tokens,
            pe_scheme,
            pe_granularity: PeGranularity::FrameWise,
            block_style: if variant == ProbeVariant::Attentive {
                BlockStyle::FullBlock
            } else {
                BlockStyle::AttnOnly
            },
            aggregation: Aggregation::Combined,
            cls_mode,
            seed: 42,
        }
    }

    pub fn dims(&self) -> FeatureDims {
        FeatureDims { frames: self.num_frames, tokens: self.tokens_per_frame, dim: self.d_model }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.seed > crate::MAX_SEED {
            return Err(Error::Config(format!("seed {} exceeds {}", self.seed, crate::MAX_SEED)));
        }
        if self.d_model == 0 || self.num_classes == 0 || self.num_frames == 0 || self.tokens_per_frame == 0 {
            return bad(format!(
                "d_model, num_classes, num_frames and tokens_per_frame must be positive: {self:?}"
            ));
        }
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return bad(format!(
                "num_heads ({}) must be positive and divide d_model ({})",
                self.num_heads, self.d_model
            ));
        }
        if self.variant == ProbeVariant::Step && self.cls_mode != ClsMode::GlobalCls {
            return bad("the step probe requires cls_mode = global-cls".into());
        }
        if !self.variant.is_self_attention() && self.pe_scheme != PeScheme::None {
            return bad(format!("{} probes take no positional encoding", self.variant));
        }
        if self.variant.is_self_attention()
            && self.aggregation == Aggregation::GlobalClsOnly
            && self.pe_granularity == PeGranularity::TokenWise
            && self.pe_scheme != PeScheme::None
        {
            return bad("token-wise PE needs patch tokens; not valid with global-cls-only".into());
        }
        Ok(())
    }

    pub fn uses_global_cls(&self) -> bool {
        self.variant.is_self_attention()
            && self.cls_mode == ClsMode::GlobalCls
            && self.aggregation != Aggregation::PatchOnly
    }

    /// Rows in the positional-encoding table, zero when no PE is used.
    pub fn pe_rows(&self) -> usize {
        if !self.variant.is_self_attention() || self.pe_scheme == PeScheme::None {
            return 0;
        }
        match self.pe_granularity {
            PeGranularity::FrameWise => self.num_frames,
            PeGranularity::TokenWise => self.num_frames * self.tokens_per_frame,
        }
    }

    /// Number of tokens the attention layer sees.
    pub fn sequence_len(&self) -> usize {
        let (t, n) = (self.num_frames, self.tokens_per_frame);
        match self.variant {
            ProbeVariant::Linear => t,
            ProbeVariant::Attentive => t * (n + 1),
            ProbeVariant::SelfAttn | ProbeVariant::Step => {
                let global = usize::from(self.uses_global_cls());
                let frame_cls = self.cls_mode == ClsMode::PerFrameCls
                    || self.aggregation == Aggregation::GlobalClsOnly;
                match self.aggregation {
                    Aggregation::PatchOnly => t * n,
                    Aggregation::GlobalClsOnly => global + t,
                    Aggregation::Combined => global + t * n + if frame_cls { t } else { 0 },
                }
            }
        }
    }

    pub fn layer_norm_count(&self) -> usize {
        match self.block_style {
            BlockStyle::AttnOnly => 0,
            BlockStyle::AttnLnSkip => 1,
            BlockStyle::FullBlock => 2,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
