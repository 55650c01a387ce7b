use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::FeatureSequence;
use crate::error::Error;

/// Test-time frame-order corruption.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum OrderCorruption {
    Reverse,
    Shuffle { seed: u64 },
}

impl OrderCorruption {
    pub fn permutation(self, frames: usize) -> Vec<usize> {
        match self {
            OrderCorruption::Reverse => (0..frames).rev().collect(),
            OrderCorruption::Shuffle { seed } => {
                let mut order: Vec<usize> = (0..frames).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                order
            }
        }
    }

    /// Same mode with its shuffle seed mixed with `salt`, so every clip of a
    /// dataset gets its own permutation.
    pub fn salted(self, salt: u64) -> Self {
        match self {
            OrderCorruption::Reverse => self,
            OrderCorruption::Shuffle { seed } => OrderCorruption::Shuffle {
                seed: seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            },
        }
    }
}

impl fmt::Display for OrderCorruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OrderCorruption::Reverse => f.write_str("reverse"),
            OrderCorruption::Shuffle { seed } => write!(f, "shuffle:{seed}"),
        }
    }
}

impl FromStr for OrderCorruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reverse" => Ok(OrderCorruption::Reverse),
            "shuffle" => Ok(OrderCorruption::Shuffle { seed: 0 }),
            _ => s
                .strip_prefix("shuffle:")
                .and_then(|seed| seed.parse().ok())
                .map(|seed| OrderCorruption::Shuffle { seed })
                .ok_or_else(|| {
                    Error::Config(format!(
                        "unknown corruption mode {s:?} (expected reverse, shuffle or shuffle:<seed>)"
                    ))
                }),
        }
    }
}

impl From<OrderCorruption> for String {
    fn from(m: OrderCorruption) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for OrderCorruption {
    type Error = Error;

    fn try_from(s: String) -> Result<Self, Error> {
        s.parse()
    }
}

/// Applies `mode` to the frame axis of patch tokens and frame CLS jointly.
pub fn corrupt_order(features: &FeatureSequence, mode: OrderCorruption) -> FeatureSequence {
    features.permute_frames(&mode.permutation(features.dims().frames))
}
