//! Accuracy metrics with the symmetric / non-symmetric breakdown.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{corrupt_order, Clip, OrderCorruption, SymmetricSplit};
use crate::error::{Error, Result};
use crate::probe::{count_params, estimate_probe_gflops, ProbeModel};
use crate::tensor::Scalar;

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Rate at which a class is predicted as another one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub class: String,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionResult {
    pub overall_acc: f64,
    pub sym_acc: Option<f64>,
    pub nsym_acc: Option<f64>,
    /// Clean minus corrupted overall accuracy.
    pub delta: f64,
    /// Fraction of symmetric-class clips predicted as their mirror class.
    pub mirror_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub num_clips: usize,
    pub overall_acc: f64,
    pub sym_acc: Option<f64>,
    pub nsym_acc: Option<f64>,
    /// Accuracy per class with at least one clip.
    pub per_class_acc: BTreeMap<String, f64>,
    /// `confusion[true][predicted]` clip counts.
    pub confusion: Vec<Vec<u64>>,
    /// Symmetric classes: rate of predicting the paired class.
    pub mirror_confusion: BTreeMap<String, Confusion>,
    /// Non-symmetric classes: most frequent wrong prediction.
    pub top_confusion: BTreeMap<String, Confusion>,
    /// Clean mirror-prediction rate over all symmetric-class clips.
    pub mirror_rate: Option<f64>,
    pub corruption: BTreeMap<String, CorruptionResult>,
    pub param_count: usize,
    pub probe_gflops_estimate: f64,
}

fn rate(hit: u64, total: u64) -> Option<f64> {
    (total > 0).then(|| hit as f64 / total as f64)
}

impl EvalReport {
    /// Builds every metric from predicted and true labels.
    pub fn from_predictions(
        predictions: &[usize],
        labels: &[usize],
        classes: &[String],
        split: &SymmetricSplit,
    ) -> Result<Self> {
        let c = classes.len();
        if predictions.is_empty() {
            return Err(Error::EmptySplit("evaluation set has no clips".into()));
        }
        if predictions.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        if split.num_classes() != c {
            return Err(Error::Contract(format!(
                "pair split covers {} classes, dataset has {c}",
                split.num_classes()
            )));
        }
        let mut confusion = vec![vec![0u64; c]; c];
        for (&p, &y) in predictions.iter().zip(labels) {
            for (idx, what) in [(y, "label"), (p, "prediction")] {
                if idx >= c {
                    return Err(Error::Index { what, index: idx, len: c });
                }
            }
            confusion[y][p] += 1;
        }
        let support: Vec<u64> = confusion.iter().map(|r| r.iter().sum()).collect();
        let correct: Vec<u64> = (0..c).map(|k| confusion[k][k]).collect();
        let subset = |pick: &dyn Fn(usize) -> bool| {
            let (hit, total) = (0..c)
                .filter(|&k| pick(k))
                .fold((0, 0), |(h, t), k| (h + correct[k], t + support[k]));
            rate(hit, total)
        };
        let mut per_class_acc = BTreeMap::new();
        let mut mirror_confusion = BTreeMap::new();
        let mut top_confusion = BTreeMap::new();
        let (mut mirror_hits, mut sym_total) = (0, 0);
        for k in 0..c {
            let Some(acc) = rate(correct[k], support[k]) else { continue };
            per_class_acc.insert(classes[k].clone(), acc);
            if let Some(m) = split.mirror(k) {
                mirror_hits += confusion[k][m];
                sym_total += support[k];
                mirror_confusion.insert(
                    classes[k].clone(),
                    Confusion { class: classes[m].clone(), rate: confusion[k][m] as f64 / support[k] as f64 },
                );
            } else if let Some(j) = (0..c).filter(|&j| j != k && confusion[k][j] > 0).fold(None, |best, j| {
                match best {
                    Some(b) if confusion[k][b] >= confusion[k][j] => Some(b),
                    _ => Some(j),
                }
            }) {
                top_confusion.insert(
                    classes[k].clone(),
                    Confusion { class: classes[j].clone(), rate: confusion[k][j] as f64 / support[k] as f64 },
                );
            }
        }
        Ok(Self {
            classes: classes.to_vec(),
            num_clips: predictions.len(),
            overall_acc: subset(&|_| true).expect("non-empty"),
            sym_acc: subset(&|k| split.is_symmetric(k)),
            nsym_acc: subset(&|k| !split.is_symmetric(k)),
            per_class_acc,
            confusion,
            mirror_confusion,
            top_confusion,
            mirror_rate: rate(mirror_hits, sym_total),
            corruption: BTreeMap::new(),
            param_count: 0,
            probe_gflops_estimate: 0.0,
        })
    }
}

/// Predicted class per clip, evaluated in parallel and returned in clip order.
pub fn predict(model: &ProbeModel<f32>, clips: &[Clip]) -> Result<Vec<usize>> {
    clips.par_iter().map(|c| model.forward(&c.features).map(|l| argmax(&l))).collect()
}

fn predict_corrupted(model: &ProbeModel<f32>, clips: &[Clip], mode: OrderCorruption) -> Result<Vec<usize>> {
    clips
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let x = corrupt_order(&c.features, mode.salted(i as u64));
            model.forward(&x).map(|l| argmax(&l))
        })
        .collect()
}

pub fn evaluate(model: &ProbeModel<f32>, clips: &[Clip], classes: &[String], split: &SymmetricSplit) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::EmptySplit("test split is empty".into()));
    }
    if model.config().num_classes != classes.len() {
        return Err(Error::Config(format!(
            "probe predicts {} classes, dataset has {}",
            model.config().num_classes,
            classes.len()
        )));
    }
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    let mut report = EvalReport::from_predictions(&predict(model, clips)?, &labels, classes, split)?;
    report.param_count = count_params(model.config());
    report.probe_gflops_estimate = estimate_probe_gflops(model.config());
    Ok(report)
}

/// Re-evaluates under each frame-order corruption and records the results in
/// `report.corruption`. Shuffle seeds are salted per clip.
pub fn sensitivity_analysis(
    model: &ProbeModel<f32>,
    clips: &[Clip],
    split: &SymmetricSplit,
    report: &mut EvalReport,
    modes: &[OrderCorruption],
) -> Result<()> {
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    for &mode in modes {
        let preds = predict_corrupted(model, clips, mode)?;
        let r = EvalReport::from_predictions(&preds, &labels, &report.classes, split)?;
        report.corruption.insert(
            mode.to_string(),
            CorruptionResult {
                overall_acc: r.overall_acc,
                sym_acc: r.sym_acc,
                nsym_acc: r.nsym_acc,
                delta: report.overall_acc - r.overall_acc,
                mirror_rate: r.mirror_rate,
            },
        );
    }
    Ok(())
}

/// Renders a clean → corrupted accuracy pair, in percent, with its drop.
pub fn format_drop(clean_pct: f64, corrupted_pct: f64) -> String {
    let delta = clean_pct - corrupted_pct;
    let arrow = if delta < 0.0 { '↑' } else { '↓' };
    format!("{clean_pct:.2} → {corrupted_pct:.2} ({arrow} {:.2})", delta.abs())
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.2}", 100.0 * v))
}

impl EvalReport {
    /// Human-readable summary: accuracy columns, confusions, corruptions.
    pub fn render(&self, label: &str) -> String {
        let mut out = String::new();
        writeln!(out, "{:<24} {:>8} {:>8} {:>8} {:>10} {:>10}", "probe", "sym", "n-sym", "overall", "params", "head GF").unwrap();
        writeln!(
            out,
            "{:<24} {:>8} {:>8} {:>8} {:>10} {:>10.4}",
            label,
            pct(self.sym_acc),
            pct(self.nsym_acc),
            pct(Some(self.overall_acc)),
            self.param_count,
            self.probe_gflops_estimate
        )
        .unwrap();
        if !self.mirror_confusion.is_empty() || !self.top_confusion.is_empty() {
            writeln!(out, "\n{:<24} {:>8}  {:<24} {:>8}", "class", "acc", "most common confusion", "rate").unwrap();
            for name in &self.classes {
                let Some(acc) = self.per_class_acc.get(name) else { continue };
                let conf = self.mirror_confusion.get(name).or_else(|| self.top_confusion.get(name));
                let (cname, crate_) = conf.map_or(("-".to_string(), "-".to_string()), |c| {
                    (c.class.clone(), format!("{:.2}", 100.0 * c.rate))
                });
                let mark = if self.mirror_confusion.contains_key(name) { " (pair)" } else { "" };
                writeln!(out, "{:<24} {:>8.2}  {:<24} {:>8}", name, 100.0 * acc, format!("{cname}{mark}"), crate_).unwrap();
            }
        }
        if !self.corruption.is_empty() {
            writeln!(out, "\n{:<16} {:<28} {:<28} {:>8}", "corruption", "overall", "sym", "mirror").unwrap();
            for (mode, r) in &self.corruption {
                let sym = match (self.sym_acc, r.sym_acc) {
                    (Some(a), Some(b)) => format_drop(100.0 * a, 100.0 * b),
                    _ => "-".into(),
                };
                writeln!(
                    out,
                    "{:<16} {:<28} {:<28} {:>8}",
                    mode,
                    format_drop(100.0 * self.overall_acc, 100.0 * r.overall_acc),
                    sym,
                    pct(r.mirror_rate)
                )
                .unwrap();
            }
        }
        out
    }
}
