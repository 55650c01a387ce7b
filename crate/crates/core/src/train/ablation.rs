//! Controlled ablations: every variant trained with the same schedule and seed.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::eval::{evaluate, EvalReport};
use super::fit::{train, TrainHistory};
use crate::data::{Dataset, FeatureDims, SymmetricSplit};
use crate::error::{Error, Result};
use crate::probe::{
    Aggregation, BlockStyle, ClsMode, PeGranularity, PeScheme, ProbeConfig, ProbeModel, ProbeVariant,
};

pub const ABLATION_PRESETS: [&str; 5] = ["table4", "table5", "table6", "table7", "table8"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub config: ProbeConfig,
    pub overall_acc: f64,
    pub sym_acc: Option<f64>,
    pub nsym_acc: Option<f64>,
    pub param_count: usize,
    pub probe_gflops_estimate: f64,
}

impl AblationRow {
    pub fn from_report(label: &str, config: &ProbeConfig, report: &EvalReport) -> Self {
        Self {
            label: label.to_string(),
            config: config.clone(),
            overall_acc: report.overall_acc,
            sym_acc: report.sym_acc,
            nsym_acc: report.nsym_acc,
            param_count: report.param_count,
            probe_gflops_estimate: report.probe_gflops_estimate,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub row: AblationRow,
    pub report: EvalReport,
    pub model: ProbeModel<f32>,
    pub history: TrainHistory,
}

/// Built-in grids. `table8` is the component ladder: self-attention baseline,
/// then the global CLS token alone, then temporal PE alone, then both.
pub fn ablation_preset(
    name: &str,
    dims: FeatureDims,
    heads: usize,
    classes: usize,
) -> Result<Vec<(String, ProbeConfig)>> {
    let step = ProbeConfig::preset(ProbeVariant::Step, dims, heads, classes);
    let with = |label: &str, f: &dyn Fn(&mut ProbeConfig)| {
        let mut c = step.clone();
        f(&mut c);
        (label.to_string(), c)
    };
    let grid = match name {
        "table4" => vec![
            with("attn-only", &|c| c.block_style = BlockStyle::AttnOnly),
            with("attn+ln+skip", &|c| c.block_style = BlockStyle::AttnLnSkip),
            with("full-block", &|c| c.block_style = BlockStyle::FullBlock),
        ],
        "table5" => vec![
            with("global-cls-only", &|c| c.aggregation = Aggregation::GlobalClsOnly),
            with("patch-only", &|c| c.aggregation = Aggregation::PatchOnly),
            with("combined", &|c| c.aggregation = Aggregation::Combined),
        ],
        "table6" => vec![
            with("no-pe", &|c| c.pe_scheme = PeScheme::None),
            with("fixed-sinusoidal", &|c| c.pe_scheme = PeScheme::FixedSinusoidal),
            with("learnable", &|c| c.pe_scheme = PeScheme::Learnable),
            with("hybrid", &|c| c.pe_scheme = PeScheme::Hybrid),
        ],
        "table7" => vec![
            with("token-wise", &|c| c.pe_granularity = PeGranularity::TokenWise),
            with("frame-wise", &|c| c.pe_granularity = PeGranularity::FrameWise),
        ],
        "table8" => {
            let base = ProbeConfig::preset(ProbeVariant::SelfAttn, dims, heads, classes);
            let global = ProbeConfig { cls_mode: ClsMode::GlobalCls, ..base.clone() };
            let pe = ProbeConfig { pe_scheme: PeScheme::Learnable, ..base.clone() };
            vec![
                ("self-attn".to_string(), base),
                ("+global-cls".to_string(), global),
                ("+temporal-pe".to_string(), pe),
                ("step".to_string(), step.clone()),
            ]
        }
        other => {
            return Err(Error::Config(format!(
                "unknown ablation preset {other:?}; valid presets: {}",
                ABLATION_PRESETS.join(", ")
            )))
        }
    };
    for (_, c) in &grid {
        c.validate()?;
    }
    Ok(grid)
}

/// Trains and evaluates (on the test split) every grid entry in order.
pub fn run_ablation(
    grid: &[(String, ProbeConfig)],
    dataset: &Dataset,
    split: &SymmetricSplit,
    cfg: &TrainConfig,
) -> Result<Vec<AblationOutcome>> {
    grid.iter()
        .map(|(label, config)| {
            let init = ProbeModel::init(config)?;
            let (model, history) = train(&init, dataset, cfg)?;
            let report = evaluate(&model, &dataset.test, &dataset.classes, split)?;
            Ok(AblationOutcome { row: AblationRow::from_report(label, config, &report), report, model, history })
        })
        .collect()
}

pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v));
    let mut out = String::new();
    writeln!(out, "{:<20} {:>8} {:>8} {:>8} {:>10} {:>10}", "variant", "sym", "n-sym", "overall", "params", "head GF")
        .unwrap();
    for r in rows {
        writeln!(
            out,
            "{:<20} {:>8} {:>8} {:>8} {:>10} {:>10.4}",
            r.label,
            pct(r.sym_acc),
            pct(r.nsym_acc),
            pct(Some(r.overall_acc)),
            r.param_count,
            r.probe_gflops_estimate
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIMS: FeatureDims = FeatureDims { frames: 4, tokens: 2, dim: 8 };

    #[test]
    fn presets_are_valid() {
        for name in ABLATION_PRESETS {
            assert!(!ablation_preset(name, DIMS, 2, 4).unwrap().is_empty());
        }
        assert!(ablation_preset("table9", DIMS, 2, 4).is_err());
    }

    #[test]
    fn ladder_order() {
        let grid = ablation_preset("table8", DIMS, 2, 4).unwrap();
        let labels: Vec<&str> = grid.iter().map(|(l, _)| l.as_str()).collect();
        assert_eq!(labels, ["self-attn", "+global-cls", "+temporal-pe", "step"]);
        assert!(!grid[0].1.uses_global_cls() && grid[0].1.pe_rows() == 0);
        assert!(grid[1].1.uses_global_cls() && grid[1].1.pe_rows() == 0);
        assert!(!grid[2].1.uses_global_cls() && grid[2].1.pe_rows() == 4);
        assert_eq!(grid[3].1.variant, ProbeVariant::Step);
    }
}
