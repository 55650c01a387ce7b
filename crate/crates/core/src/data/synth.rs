//! Synthetic nearly-symmetric action dataset.
//!
//! Each symmetric pair `k` owns a smooth trajectory `g_k(t)`; class `2k`
//! plays it forward and class `2k+1` plays it backward, so both classes see
//! exactly the same multiset of noiseless frames. A classifier that ignores
//! frame order cannot beat chance within a pair. Non-symmetric classes get
//! their own trajectory plus a class-specific offset, which keeps them
//! separable from frame statistics alone.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::features::{write_features, FeatureDims, FeatureSequence, FEATURE_EXTENSION};
use super::manifest::{write_manifest, Clip, ClipRecord, Dataset, DatasetManifest, Split};
use super::split::SymmetricSplit;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PAIRS_FILE: &str = "pairs.txt";
pub const FEATURE_DIR: &str = "features";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_pairs: usize,
    pub num_nsym: usize,
    pub clips_per_class: usize,
    pub frames: usize,
    pub tokens: usize,
    pub dim: usize,
    /// Number of random sinusoids per trajectory.
    pub basis: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_pairs: 5,
            num_nsym: 4,
            clips_per_class: 60,
            frames: 16,
            tokens: 8,
            dim: 64,
            basis: 3,
            noise_std: 0.1,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("clips_per_class", self.clips_per_class),
            ("frames", self.frames),
            ("tokens", self.tokens),
            ("dim", self.dim),
            ("basis", self.basis),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("synthetic {name} must be positive")));
        }
        if self.num_pairs + self.num_nsym == 0 {
            return Err(Error::Config("synthetic dataset needs at least one class".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if self.seed > crate::MAX_SEED {
            return Err(Error::Config(format!("seed {} exceeds {}", self.seed, crate::MAX_SEED)));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        2 * self.num_pairs + self.num_nsym
    }

    pub fn dims(&self) -> FeatureDims {
        FeatureDims { frames: self.frames, tokens: self.tokens, dim: self.dim }
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.num_classes());
        for k in 0..self.num_pairs {
            names.push(format!("pair{k:02}_fwd"));
            names.push(format!("pair{k:02}_rev"));
        }
        names.extend((0..self.num_nsym).map(|c| format!("nsym{c:02}")));
        names
    }

    /// Per-class split sizes (train, val, test) at 60/20/20.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.clips_per_class;
        let train = (n as f64 * 0.6).round() as usize;
        let val = (n as f64 * 0.2).round() as usize;
        (train, val, n - train - val)
    }
}

pub struct SyntheticDataset {
    pub config: SynthConfig,
    pub manifest: DatasetManifest,
    pub pairs: SymmetricSplit,
    /// Features in manifest order.
    pub features: Vec<FeatureSequence>,
}

impl SyntheticDataset {
    pub fn to_dataset(&self) -> Dataset {
        let mut ds = Dataset {
            classes: self.manifest.classes.clone(),
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (record, features) in self.manifest.clips.iter().zip(&self.features) {
            let clip = Clip { features: features.clone(), label: record.label };
            match record.split {
                Split::Train => ds.train.push(clip),
                Split::Val => ds.val.push(clip),
                Split::Test => ds.test.push(clip),
            }
        }
        ds
    }

    /// Writes manifest, pair file and feature containers under `dir`.
    /// Returns the number of bytes written.
    pub fn write(&self, dir: &Path) -> Result<u64> {
        let feat_dir = dir.join(FEATURE_DIR);
        fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
        let mut bytes = 0u64;
        for (record, features) in self.manifest.clips.iter().zip(&self.features) {
            let path = dir.join(&record.feature_path);
            write_features(&path, features)?;
            bytes += fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
        }
        let manifest_path = dir.join(MANIFEST_FILE);
        write_manifest(&manifest_path, &self.manifest)?;
        let pairs_path = dir.join(PAIRS_FILE);
        let pairs_text = self.pairs.to_text(&self.manifest.classes);
        fs::write(&pairs_path, &pairs_text).map_err(|e| Error::io(&pairs_path, e))?;
        bytes += self.manifest.to_text().len() as u64 + pairs_text.len() as u64;
        Ok(bytes)
    }
}

/// Smooth curve `offset + Σ_b amp_b · sin(2π·freq_b·τ + phase_b)` sampled at
/// `τ = t/(T−1)`.
struct Trajectory {
    frames: Vec<Vec<f64>>,
}

impl Trajectory {
    fn sample(rng: &mut ChaCha8Rng, cfg: &SynthConfig, extra_offset: f64) -> Self {
        let d = cfg.dim;
        let mut normal = || -> f64 { StandardNormal.sample(rng) };
        let offset: Vec<f64> = (0..d).map(|_| normal() * (1.0 + extra_offset)).collect();
        let amps: Vec<Vec<f64>> = (0..cfg.basis).map(|_| (0..d).map(|_| normal()).collect()).collect();
        let freqs: Vec<f64> = (0..cfg.basis).map(|_| rng.gen_range(0.3..1.0)).collect();
        let phases: Vec<f64> = (0..cfg.basis).map(|_| rng.gen_range(0.0..TAU)).collect();
        let span = (cfg.frames.max(2) - 1) as f64;
        let frames = (0..cfg.frames)
            .map(|t| {
                let tau = t as f64 / span;
                let mut v = offset.clone();
                for b in 0..cfg.basis {
                    let s = (TAU * freqs[b] * tau + phases[b]).sin();
                    for (x, a) in v.iter_mut().zip(&amps[b]) {
                        *x += a * s;
                    }
                }
                v
            })
            .collect();
        Self { frames }
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pair_traj: Vec<Trajectory> =
        (0..cfg.num_pairs).map(|_| Trajectory::sample(&mut rng, cfg, 0.0)).collect();
    let nsym_traj: Vec<Trajectory> =
        (0..cfg.num_nsym).map(|_| Trajectory::sample(&mut rng, cfg, 1.0)).collect();

    let classes = cfg.class_names();
    let (n_train, n_val, _) = cfg.split_sizes();
    let noise = Normal::new(0.0, cfg.noise_std).expect("validated noise_std");
    let FeatureDims { frames, tokens, dim } = cfg.dims();

    let mut records = Vec::new();
    let mut features = Vec::new();
    for (label, name) in classes.iter().enumerate() {
        // frame order for this class: forward, or reversed for the second
        // member of a pair
        let (traj, reversed) = if label < 2 * cfg.num_pairs {
            (&pair_traj[label / 2], label % 2 == 1)
        } else {
            (&nsym_traj[label - 2 * cfg.num_pairs], false)
        };
        for i in 0..cfg.clips_per_class {
            let clip_id = format!("{name}_{i:03}");
            let mut patches = Vec::with_capacity(frames * tokens * dim);
            let mut cls = Vec::with_capacity(frames * dim);
            for t in 0..frames {
                let src = if reversed { frames - 1 - t } else { t };
                let base = &traj.frames[src];
                let start = patches.len();
                for _ in 0..tokens {
                    for &b in base {
                        let eta = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        patches.push((b + eta) as f32);
                    }
                }
                for c in 0..dim {
                    let sum: f32 = (0..tokens).map(|j| patches[start + j * dim + c]).sum();
                    cls.push(sum / tokens as f32);
                }
            }
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            records.push(ClipRecord {
                clip_id: clip_id.clone(),
                feature_path: PathBuf::from(FEATURE_DIR).join(format!("{clip_id}.{FEATURE_EXTENSION}")),
                label,
                split,
            });
            features.push(FeatureSequence::new(clip_id, cfg.dims(), patches, Some(cls))?);
        }
    }
    let pairs = SymmetricSplit::new(
        classes.len(),
        (0..cfg.num_pairs).map(|k| (2 * k, 2 * k + 1)).collect(),
    )?;
    let manifest = DatasetManifest { classes, dims: Some(cfg.dims()), clips: records, root: PathBuf::new() };
    Ok(SyntheticDataset { config: cfg.clone(), manifest, pairs, features })
}
