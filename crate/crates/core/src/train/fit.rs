//! Mini-batch training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::eval::predict;
use super::optim::{clip_grad_norm, optimizer_step, OptimState};
use crate::data::{Clip, Dataset};
use crate::error::{Error, Result};
use crate::probe::ProbeModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_acc: Option<f64>,
}

fn accuracy(model: &ProbeModel<f32>, clips: &[Clip]) -> Result<f64> {
    let preds = predict(model, clips)?;
    let hits = preds.iter().zip(clips).filter(|(p, c)| **p == c.label).count();
    Ok(hits as f64 / clips.len() as f64)
}

/// Mean loss over `batch` and the summed gradient, reduced in clip order.
fn batch_gradient(model: &ProbeModel<f32>, batch: &[&Clip]) -> Result<(f64, Vec<Vec<f32>>)> {
    let per_clip: Vec<(f64, Vec<Vec<f32>>)> =
        batch.par_iter().map(|c| model.loss_and_grads(&c.features, c.label)).collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f32;
    let mut iter = per_clip.into_iter();
    let (mut loss, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        for (acc, part) in grads.iter_mut().zip(&g) {
            acc.iter_mut().zip(part).for_each(|(a, b)| *a += b);
        }
    }
    grads.iter_mut().flatten().for_each(|g| *g *= scale);
    Ok((loss / batch.len() as f64, grads))
}

/// Trains `model` on `dataset.train`. When a validation split exists the
/// parameters with the best validation accuracy (earliest on ties) are
/// returned; otherwise the final ones.
pub fn train(model: &ProbeModel<f32>, dataset: &Dataset, cfg: &TrainConfig) -> Result<(ProbeModel<f32>, TrainHistory)> {
    cfg.validate()?;
    let clips = &dataset.train;
    if clips.is_empty() {
        return Err(Error::EmptySplit("train split is empty".into()));
    }
    let classes = model.config().num_classes;
    if dataset.num_classes() != classes {
        return Err(Error::Config(format!(
            "probe predicts {classes} classes, dataset has {}",
            dataset.num_classes()
        )));
    }
    if let Some(c) = dataset.train.iter().chain(&dataset.val).find(|c| c.label >= classes) {
        return Err(Error::Index { what: "label", index: c.label, len: classes });
    }

    let mut model = model.clone();
    let mut state = OptimState::<f32>::zeros(model.params().iter().map(|(_, t)| t.numel()));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let steps_per_epoch = clips.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ProbeModel<f32>)> = None;
    let mut step = 0;
    let mut last_loss = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut lr) = (0.0, cfg.learning_rate);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            lr = cfg.lr_at(step, total_steps, steps_per_epoch);
            let batch: Vec<&Clip> = chunk.iter().map(|&i| &clips[i]).collect();
            let nan = || Error::NanLoss { epoch, batch: b + 1, lr, last_loss };
            let (loss, mut grads) = match batch_gradient(&model, &batch) {
                Err(Error::Numeric(_)) => return Err(nan()),
                other => other?,
            };
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(nan());
            }
            if let Some(max) = cfg.grad_clip_norm {
                clip_grad_norm(&mut grads, max);
            }
            let mut params: Vec<&mut [f32]> = model.params_mut().map(|t| t.data_mut()).collect();
            optimizer_step(&mut params, &grads, &mut state, cfg.optimizer, lr, cfg.weight_decay);
            loss_sum += loss * batch.len() as f64;
            last_loss = Some(loss);
            step += 1;
        }
        let evaluate_now = !dataset.val.is_empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let val_acc = if evaluate_now { Some(accuracy(&model, &dataset.val)?) } else { None };
        if let Some(acc) = val_acc {
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, model.clone()));
                history.best_epoch = epoch;
                history.best_val_acc = Some(acc);
            }
        }
        history.epochs.push(EpochRecord { epoch, train_loss: loss_sum / clips.len() as f64, val_acc, lr });
    }
    match best {
        Some((_, m)) => Ok((m, history)),
        None => {
            history.best_epoch = cfg.epochs;
            Ok((model, history))
        }
    }
}
