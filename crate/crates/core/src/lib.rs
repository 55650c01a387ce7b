pub mod autograd;
pub mod data;
pub mod error;
pub mod probe;
pub mod tensor;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

/// Largest accepted seed; configs round-trip through TOML's signed integers.
pub const MAX_SEED: u64 = i64::MAX as u64;
