mod checkpoint;
mod config;
mod flops;
mod model;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Aggregation, BlockStyle, ClsMode, PeGranularity, PeScheme, ProbeConfig, ProbeVariant};
pub use flops::{estimate_probe_flops, estimate_probe_gflops};
pub use model::{
    count_params, sinusoidal_table, ParamVars, ProbeModel, TokenSequence, PARAM_GLOBAL_CLS, PARAM_TEMPORAL_PE,
};
