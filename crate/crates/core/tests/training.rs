mod common;

use probekit::data::{generate_synthetic, Clip, Dataset, OrderCorruption, SynthConfig, SyntheticDataset};
use probekit::probe::{ProbeConfig, ProbeModel, ProbeVariant};
use probekit::train::{
    ablation_preset, evaluate, format_ablation_table, run_ablation, sensitivity_analysis, train, EvalReport,
    LrSchedule, TrainConfig,
};
use probekit::Error;
use proptest::prelude::*;

fn small() -> SyntheticDataset {
    let cfg = SynthConfig { num_pairs: 2, num_nsym: 1, clips_per_class: 10, frames: 4, tokens: 2, dim: 8, ..SynthConfig::default() };
    generate_synthetic(&cfg).unwrap()
}

fn probe(s: &SyntheticDataset, v: ProbeVariant) -> ProbeModel<f32> {
    ProbeModel::init(&ProbeConfig::preset(v, s.config.dims(), 2, s.config.num_classes())).unwrap()
}

fn quick() -> TrainConfig {
    TrainConfig { epochs: 3, batch_size: 8, ..TrainConfig::default() }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let s = small();
    let init = probe(&s, ProbeVariant::Step);
    let cfg = TrainConfig { learning_rate: 0.0, ..quick() };
    let (trained, _) = train(&init, &s.to_dataset(), &cfg).unwrap();
    assert_eq!(trained, init);
}

#[test]
fn single_clip_is_memorized() {
    let s = small();
    let mut ds = s.to_dataset();
    ds.train.truncate(1);
    ds.val.clear();
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 1,
        lr_schedule: LrSchedule::Constant,
        grad_clip_norm: None,
        ..TrainConfig::default()
    };
    let (_, history) = train(&probe(&s, ProbeVariant::Step), &ds, &cfg).unwrap();
    let last = history.epochs.last().unwrap().train_loss;
    assert!(last < 1e-2, "final loss {last}");
}

#[test]
fn training_is_deterministic() {
    let s = small();
    let ds = s.to_dataset();
    let a = train(&probe(&s, ProbeVariant::Step), &ds, &quick()).unwrap();
    let b = train(&probe(&s, ProbeVariant::Step), &ds, &quick()).unwrap();
    assert_eq!(a.1, b.1);
    assert_eq!(a.0, b.0);
    let ra = evaluate(&a.0, &ds.test, &ds.classes, &s.pairs).unwrap();
    let rb = evaluate(&b.0, &ds.test, &ds.classes, &s.pairs).unwrap();
    assert_eq!(serde_json::to_string(&ra).unwrap(), serde_json::to_string(&rb).unwrap());
}

#[test]
fn every_step_parameter_receives_gradient() {
    let s = small();
    let m = probe(&s, ProbeVariant::Step);
    let clip = &s.to_dataset().train[3];
    let (_, grads) = m.loss_and_grads(&clip.features, clip.label).unwrap();
    for ((name, _), g) in m.params().iter().zip(&grads) {
        let norm: f32 = g.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!(norm > 0.0, "{name} has zero gradient");
    }
    let cfg = TrainConfig { epochs: 1, ..quick() };
    let (trained, _) = train(&m, &s.to_dataset(), &cfg).unwrap();
    for ((name, before), (_, after)) in m.params().iter().zip(trained.params()) {
        assert!(before.max_abs_diff(after) > 0.0, "{name} did not move");
    }
}

#[test]
fn non_finite_loss_aborts_with_diagnostics() {
    let s = small();
    let mut ds = s.to_dataset();
    let dims = s.config.dims();
    let huge = vec![3.0e38f32; dims.frames * dims.tokens * dims.dim];
    let features = probekit::data::FeatureSequence::new("x", dims, huge, Some(vec![3.0e38; dims.frames * dims.dim])).unwrap();
    ds.train = vec![Clip { features, label: 0 }];
    match train(&probe(&s, ProbeVariant::Linear), &ds, &quick()) {
        Err(Error::NanLoss { epoch: 1, batch: 1, lr, last_loss: None }) => assert!(lr > 0.0),
        other => panic!("expected NaN abort, got {other:?}"),
    }
}

#[test]
fn empty_train_split_is_rejected() {
    let s = small();
    let mut ds = s.to_dataset();
    ds.train.clear();
    assert!(matches!(train(&probe(&s, ProbeVariant::Linear), &ds, &quick()), Err(Error::EmptySplit(_))));
    assert!(matches!(
        evaluate(&probe(&s, ProbeVariant::Linear), &[], &ds.classes, &s.pairs),
        Err(Error::EmptySplit(_))
    ));
}

#[test]
fn best_validation_epoch_is_kept() {
    let s = small();
    let ds = s.to_dataset();
    let cfg = TrainConfig { epochs: 6, ..quick() };
    let (_, h) = train(&probe(&s, ProbeVariant::Attentive), &ds, &cfg).unwrap();
    let best = h.epochs.iter().filter_map(|e| e.val_acc).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(h.best_val_acc, Some(best));
    assert_eq!(h.epochs[h.best_epoch - 1].val_acc, Some(best));
    assert!(h.epochs[..h.best_epoch - 1].iter().all(|e| e.val_acc.unwrap() < best));
}

#[test]
fn order_blind_probe_has_zero_sensitivity() {
    let s = small();
    let ds = s.to_dataset();
    for v in [ProbeVariant::Linear, ProbeVariant::Attentive, ProbeVariant::SelfAttn] {
        let (m, _) = train(&probe(&s, v), &ds, &quick()).unwrap();
        let mut report = evaluate(&m, &ds.test, &ds.classes, &s.pairs).unwrap();
        let modes = [OrderCorruption::Reverse, OrderCorruption::Shuffle { seed: 3 }];
        sensitivity_analysis(&m, &ds.test, &s.pairs, &mut report, &modes).unwrap();
        for (mode, r) in &report.corruption {
            assert_eq!(r.delta, 0.0, "{v} {mode}");
        }
    }
}

#[test]
fn one_row_ablation_equals_evaluate() {
    let s = small();
    let ds = s.to_dataset();
    let cfg = ProbeConfig::preset(ProbeVariant::Step, s.config.dims(), 2, s.config.num_classes());
    let out = run_ablation(&[("step".into(), cfg.clone())], &ds, &s.pairs, &quick()).unwrap();
    assert_eq!(out.len(), 1);
    let (m, _) = train(&ProbeModel::init(&cfg).unwrap(), &ds, &quick()).unwrap();
    let direct = evaluate(&m, &ds.test, &ds.classes, &s.pairs).unwrap();
    assert_eq!(out[0].report, direct);
    assert_eq!(out[0].row.overall_acc, direct.overall_acc);
    assert_eq!(out[0].row.sym_acc, direct.sym_acc);
    let table = format_ablation_table(&[out[0].row.clone()]);
    assert_eq!(table.lines().count(), 2);
}

#[test]
fn ladder_preset_has_four_rows_in_order() {
    let s = small();
    let grid = ablation_preset("table8", s.config.dims(), 2, s.config.num_classes()).unwrap();
    let labels: Vec<_> = grid.iter().map(|(l, _)| l.as_str()).collect();
    assert_eq!(labels, ["self-attn", "+global-cls", "+temporal-pe", "step"]);
}

#[test]
fn report_serializes_round_trip() {
    let s = small();
    let ds: Dataset = s.to_dataset();
    let m = probe(&s, ProbeVariant::Step);
    let r = evaluate(&m, &ds.test, &ds.classes, &s.pairs).unwrap();
    let back: EvalReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
    assert_eq!(r.param_count, m.count_params());
}

proptest! {
    #[test]
    fn report_invariants(labels in prop::collection::vec(0usize..6, 1..80), seed: u64) {
        let classes: Vec<String> = (0..6).map(|i| format!("c{i}")).collect();
        let preds: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| {
            if (seed >> (i % 64)) & 1 == 1 { y } else { (y + i) % 6 }
        }).collect();
        let split = probekit::data::SymmetricSplit::new(6, vec![(0, 1), (4, 2)]).unwrap();
        let r = EvalReport::from_predictions(&preds, &labels, &classes, &split).unwrap();
        let trace: u64 = (0..6).map(|k| r.confusion[k][k]).sum();
        prop_assert_eq!(r.overall_acc, trace as f64 / labels.len() as f64);
        for k in 0..6 {
            let support = labels.iter().filter(|&&y| y == k).count() as u64;
            prop_assert_eq!(r.confusion[k].iter().sum::<u64>(), support);
        }
        let weighted: f64 = r.per_class_acc.iter().map(|(name, acc)| {
            let k: usize = name[1..].parse().unwrap();
            acc * r.confusion[k].iter().sum::<u64>() as f64
        }).sum::<f64>() / labels.len() as f64;
        prop_assert!((weighted - r.overall_acc).abs() < 1e-12);
        for acc in r.per_class_acc.values().chain(r.sym_acc.iter()).chain(r.nsym_acc.iter()) {
            prop_assert!((0.0..=1.0).contains(acc));
        }
    }
}
