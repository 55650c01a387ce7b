//! Experiment file: one TOML document whose sections feed every subcommand.
//! Command-line flags override file fields; the resolved result is what gets
//! echoed into run directories.

use std::fs;
use std::path::{Path, PathBuf};

use probekit::data::{FeatureDims, SynthConfig};
use probekit::probe::{Aggregation, BlockStyle, ClsMode, PeGranularity, PeScheme, ProbeConfig, ProbeVariant};
use probekit::train::TrainConfig;
use probekit::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Experiment {
    /// Overrides `probe.seed`, `train.seed` and `synth.seed` when set.
    pub seed: Option<u64>,
    pub data: DataSection,
    pub probe: ProbeSection,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub sensitivity: SensitivitySection,
    pub ablation: AblationSection,
    pub multitask: MultiTaskSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    /// Symmetric pair file; without one every class counts as non-symmetric.
    pub pairs: Option<PathBuf>,
}

/// Variant preset plus optional field overrides; dimensions and class count
/// come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub variant: ProbeVariant,
    pub num_heads: usize,
    pub pe_scheme: Option<PeScheme>,
    pub pe_granularity: Option<PeGranularity>,
    pub block_style: Option<BlockStyle>,
    pub aggregation: Option<Aggregation>,
    pub cls_mode: Option<ClsMode>,
    pub seed: u64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            variant: ProbeVariant::Step,
            num_heads: 4,
            pe_scheme: None,
            pe_granularity: None,
            block_style: None,
            aggregation: None,
            cls_mode: None,
            seed: 42,
        }
    }
}

impl ProbeSection {
    pub fn resolve(&self, dims: FeatureDims, num_classes: usize) -> Result<ProbeConfig> {
        let mut cfg = ProbeConfig::preset(self.variant, dims, self.num_heads, num_classes);
        cfg.pe_scheme = self.pe_scheme.unwrap_or(cfg.pe_scheme);
        cfg.pe_granularity = self.pe_granularity.unwrap_or(cfg.pe_granularity);
        cfg.block_style = self.block_style.unwrap_or(cfg.block_style);
        cfg.aggregation = self.aggregation.unwrap_or(cfg.aggregation);
        cfg.cls_mode = self.cls_mode.unwrap_or(cfg.cls_mode);
        cfg.seed = self.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensitivitySection {
    /// `reverse` or `shuffle:<seed>`.
    pub modes: Vec<String>,
}

impl Default for SensitivitySection {
    fn default() -> Self {
        Self { modes: vec!["reverse".into(), "shuffle:0".into()] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub preset: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultiTaskSection {
    pub shared_gflops_per_clip: f64,
    pub tasks: Vec<TaskEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub name: String,
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub pairs: Option<PathBuf>,
}

impl Experiment {
    /// Parses `path`; relative data paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut exp: Experiment =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        exp.data.manifest.as_mut().map(rebase);
        exp.data.pairs.as_mut().map(rebase);
        for t in &mut exp.multitask.tasks {
            rebase(&mut t.checkpoint);
            rebase(&mut t.manifest);
            t.pairs.as_mut().map(rebase);
        }
        Ok(exp)
    }

    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.probe.seed = s;
            self.train.seed = s;
            self.synth.seed = s;
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment serializes")
    }
}
