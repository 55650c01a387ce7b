//! Several probes evaluated over one shared pass of feature loads.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{argmax, EvalReport};
use crate::data::{read_features, DatasetManifest, FeatureSequence, Split, SymmetricSplit};
use crate::error::{Error, Result};
use crate::probe::{count_params, estimate_probe_gflops, ProbeModel};

/// Where clip features come from.
pub trait FeatureSource: Sync {
    fn load(&self, path: &Path) -> Result<FeatureSequence>;
}

/// Reads containers from disk.
pub struct DiskFeatures;

impl FeatureSource for DiskFeatures {
    fn load(&self, path: &Path) -> Result<FeatureSequence> {
        read_features(path)
    }
}

pub struct TaskSpec {
    pub name: String,
    /// Task label space and clip list; feature paths are shared across tasks.
    pub manifest: DatasetManifest,
    pub pairs: SymmetricSplit,
    pub model: ProbeModel<f32>,
}

pub struct MultiTaskSpec {
    pub tasks: Vec<TaskSpec>,
    /// Cost of producing one clip's features, paid once per pass.
    pub shared_gflops_per_clip: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostAccounting {
    pub clips: usize,
    pub tasks: usize,
    pub feature_loads: usize,
    pub shared_gflops: f64,
    pub head_gflops: BTreeMap<String, f64>,
    /// `shared + Σ head` for the single shared pass.
    pub total_gflops: f64,
    /// What one pass per task would cost instead.
    pub separate_passes_gflops: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskReport {
    pub reports: BTreeMap<String, EvalReport>,
    pub accounting: CostAccounting,
}

/// Evaluates every task on `split`, loading each distinct feature file once
/// and feeding the same in-memory sequence to every probe that uses it.
pub fn multi_task_evaluate(spec: &MultiTaskSpec, split: Split, source: &dyn FeatureSource) -> Result<MultiTaskReport> {
    let Some(first) = spec.tasks.first() else {
        return Err(Error::Contract("multi-task evaluation needs at least one task".into()));
    };
    let dims = first.model.config().dims();
    for t in &spec.tasks {
        if t.model.config().dims() != dims {
            return Err(Error::Config(format!(
                "task {} probe expects dims {:?}, task {} expects {:?}",
                t.name,
                t.model.config().dims(),
                first.name,
                dims
            )));
        }
        if t.model.config().num_classes != t.manifest.num_classes() {
            return Err(Error::Config(format!("task {}: probe and manifest class counts differ", t.name)));
        }
    }

    // distinct feature files in first-seen order, and each task's clip → file map
    let mut files: Vec<PathBuf> = Vec::new();
    let mut file_index: HashMap<PathBuf, usize> = HashMap::new();
    let mut task_clips: Vec<Vec<(usize, usize)>> = Vec::new();
    for t in &spec.tasks {
        let mut clips = Vec::new();
        for r in t.manifest.records(split) {
            let path = t.manifest.resolve(r);
            let idx = *file_index.entry(path.clone()).or_insert_with(|| {
                files.push(path);
                files.len() - 1
            });
            clips.push((idx, r.label));
        }
        if clips.is_empty() {
            return Err(Error::EmptySplit(format!("task {} has no {split} clips", t.name)));
        }
        task_clips.push(clips);
    }
    let users: Vec<Vec<usize>> = (0..files.len())
        .map(|f| (0..spec.tasks.len()).filter(|&t| task_clips[t].iter().any(|&(i, _)| i == f)).collect())
        .collect();

    let loads = AtomicUsize::new(0);
    let per_file: Vec<Vec<(usize, usize)>> = files
        .par_iter()
        .zip(&users)
        .map(|(path, tasks)| {
            loads.fetch_add(1, Ordering::Relaxed);
            let features = source.load(path)?;
            tasks
                .iter()
                .map(|&t| spec.tasks[t].model.forward(&features).map(|l| (t, argmax(&l))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let prediction = |t: usize, f: usize| per_file[f].iter().find(|(task, _)| *task == t).expect("user").1;

    let mut reports = BTreeMap::new();
    let mut head_gflops = BTreeMap::new();
    for (t, task) in spec.tasks.iter().enumerate() {
        let preds: Vec<usize> = task_clips[t].iter().map(|&(f, _)| prediction(t, f)).collect();
        let labels: Vec<usize> = task_clips[t].iter().map(|&(_, y)| y).collect();
        let mut report = EvalReport::from_predictions(&preds, &labels, &task.manifest.classes, &task.pairs)?;
        report.param_count = count_params(task.model.config());
        report.probe_gflops_estimate = estimate_probe_gflops(task.model.config());
        head_gflops.insert(task.name.clone(), report.probe_gflops_estimate * preds.len() as f64);
        if reports.insert(task.name.clone(), report).is_some() {
            return Err(Error::Config(format!("duplicate task name {}", task.name)));
        }
    }
    let shared = spec.shared_gflops_per_clip * files.len() as f64;
    let heads: f64 = head_gflops.values().sum();
    let accounting = CostAccounting {
        clips: files.len(),
        tasks: spec.tasks.len(),
        feature_loads: loads.into_inner(),
        shared_gflops: shared,
        head_gflops,
        total_gflops: shared + heads,
        separate_passes_gflops: shared * spec.tasks.len() as f64 + heads,
    };
    Ok(MultiTaskReport { reports, accounting })
}
