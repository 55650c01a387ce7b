//! Feature containers, manifests, symmetric-pair splits, frame-order
//! corruption and the synthetic dataset generator.

mod corrupt;
mod features;
mod manifest;
mod split;
pub mod synth;

pub use corrupt::{corrupt_order, OrderCorruption};
pub use features::{
    read_features, write_features, FeatureDims, FeatureSequence, FEATURE_EXTENSION, FEATURE_MAGIC,
    FEATURE_VERSION,
};
pub use manifest::{
    load_manifest, write_manifest, Clip, ClipRecord, Dataset, DatasetManifest, Split, MANIFEST_HEADER,
};
pub use split::{define_pairs, SymmetricSplit};
pub use synth::{generate_synthetic, SynthConfig, SyntheticDataset};
