//! Closed-form multiply-add estimate of the probe head's cost per clip.
//! Backbone cost is excluded.

use super::config::{BlockStyle, ProbeConfig, ProbeVariant};

/// Head-only multiply-add count for one clip.
pub fn estimate_probe_flops(config: &ProbeConfig) -> u64 {
    let d = config.d_model as u64;
    let c = config.num_classes as u64;
    let l = config.sequence_len() as u64;
    let classifier = 2 * d * c;
    let head = match config.variant {
        ProbeVariant::Linear => 0,
        ProbeVariant::Attentive => {
            // one query row; keys and values over the full sequence
            let q = 2 * d * d;
            let kv = 2 * l * d * 2 * d;
            let attn = 2 * l * d;
            let out = 2 * d * d;
            let ff = 2 * 2 * d * 4 * d;
            q + kv + attn + out + ff
        }
        ProbeVariant::SelfAttn | ProbeVariant::Step => {
            let qkv = 2 * l * d * 3 * d;
            let attn = 2 * l * l * d;
            let out = 2 * l * d * d;
            let ff = match config.block_style {
                BlockStyle::FullBlock => 2 * 2 * l * d * 4 * d,
                _ => 0,
            };
            qkv + attn + out + ff
        }
    };
    head + classifier
}

pub fn estimate_probe_gflops(config: &ProbeConfig) -> f64 {
    estimate_probe_flops(config) as f64 / 1e9
}
