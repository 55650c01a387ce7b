//! Helpers shared by the integration tests: random inputs, finite-difference
//! gradient checks and the differentiable op catalogue.
#![allow(dead_code)]

use probekit::data::{FeatureDims, FeatureSequence};
use probekit::probe::{ProbeConfig, ProbeModel};
use probekit::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_EPS: f64 = 1e-3;
pub const FD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

/// Normal samples pushed at least `gap` away from zero, for kinked ops.
pub fn normal_away_from_zero(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let t = normal(shape, rng);
    let data = t.data().iter().map(|&v| if v.abs() < gap { v.signum() * gap + v } else { v }).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn random_clip(dims: FeatureDims, with_cls: bool, rng: &mut ChaCha8Rng) -> FeatureSequence {
    let mut g = |n: usize| (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect::<Vec<f32>>();
    let patches = g(dims.frames * dims.tokens * dims.dim);
    let cls = with_cls.then(|| g(dims.frames * dims.dim));
    FeatureSequence::new("clip", dims, patches, cls).unwrap()
}

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

pub type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

/// Compares tape gradients of `Σ w ⊙ build(inputs)` (fixed random `w`) with
/// central differences; returns the relative error per input.
pub fn grad_check(inputs: &[Tensor<f64>], build: &Build, seed: u64) -> Vec<f64> {
    let loss = |xs: &[Tensor<f64>], grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), grads)).collect();
        let out = build(&mut tape, &vars).unwrap();
        let shape = tape.shape(out).to_vec();
        let w = tape.constant(normal(&shape, &mut rng(seed ^ 0x5eed)));
        let prod = tape.mul(out, w).unwrap();
        let l = tape.sum(prod);
        let value = tape.value(l).data()[0];
        if !grads {
            return (value, Vec::new());
        }
        tape.backward(l).unwrap();
        (value, vars.iter().map(|&v| tape.grad(v).unwrap().to_vec()).collect())
    };
    let (_, analytic) = loss(inputs, true);
    let mut errors = Vec::new();
    for (i, x) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; x.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut shifted = inputs.to_vec();
            shifted[i].data_mut()[j] = x.data()[j] + FD_EPS;
            let up = loss(&shifted, false).0;
            shifted[i].data_mut()[j] = x.data()[j] - FD_EPS;
            let down = loss(&shifted, false).0;
            *slot = (up - down) / (2.0 * FD_EPS);
        }
        errors.push(relative_error(&analytic[i], &numeric));
    }
    errors
}

/// Every differentiable op with random inputs for `seed`.
pub fn op_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor<f64>>, Build)> {
    let mut r = rng(seed);
    let mut n = |shape: &[usize]| normal(shape, &mut r);
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, Build)> = vec![
        ("matmul", vec![n(&[3, 4]), n(&[4, 2])], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_batched", vec![n(&[2, 3, 4]), n(&[2, 4, 2])], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_shared_rhs", vec![n(&[2, 3, 4]), n(&[4, 2])], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("add", vec![n(&[3, 4]), n(&[3, 4])], Box::new(|t, v| t.add(v[0], v[1]))),
        ("add_rows", vec![n(&[6, 4]), n(&[3, 4])], Box::new(|t, v| t.add_rows(v[0], v[1], 2))),
        ("add_rows_broadcast", vec![n(&[5, 4]), n(&[4])], Box::new(|t, v| t.add_rows(v[0], v[1], 5))),
        (
            "add_gathered_rows",
            vec![n(&[5, 3]), n(&[3, 3])],
            Box::new(|t, v| t.add_gathered_rows(v[0], v[1], &[None, Some(0), Some(2), Some(0), Some(1)])),
        ),
        ("mul", vec![n(&[3, 4]), n(&[3, 4])], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![n(&[3, 4])], Box::new(|t, v| Ok(t.scale(v[0], -0.7)))),
        ("sum", vec![n(&[3, 4])], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean_rows", vec![n(&[5, 4])], Box::new(|t, v| t.mean_rows(v[0]))),
        ("softmax_rows", vec![n(&[3, 5])], Box::new(|t, v| t.softmax(v[0], 1))),
        ("softmax_cols", vec![n(&[3, 5])], Box::new(|t, v| t.softmax(v[0], 0))),
        ("softmax_3d_mid", vec![n(&[2, 3, 4])], Box::new(|t, v| t.softmax(v[0], 1))),
        ("layer_norm", vec![n(&[3, 6]), n(&[6]), n(&[6])], Box::new(|t, v| t.layer_norm(v[0], v[1], v[2]))),
        ("linear_vector", vec![n(&[4]), n(&[4, 3]), n(&[3])], Box::new(|t, v| t.linear(v[0], v[1], v[2]))),
        ("linear_matrix", vec![n(&[5, 4]), n(&[4, 3]), n(&[3])], Box::new(|t, v| t.linear(v[0], v[1], v[2]))),
        ("gelu", vec![n(&[3, 4])], Box::new(|t, v| Ok(t.gelu(v[0])))),
        (
            "attention_self",
            vec![n(&[2, 4, 3]), n(&[2, 4, 3]), n(&[2, 4, 3])],
            Box::new(|t, v| t.attention(v[0], v[1], v[2])),
        ),
        (
            "attention_cross",
            vec![n(&[2, 1, 3]), n(&[2, 5, 3]), n(&[2, 5, 3])],
            Box::new(|t, v| t.attention(v[0], v[1], v[2])),
        ),
        ("split_heads", vec![n(&[4, 6])], Box::new(|t, v| t.split_heads(v[0], 3))),
        ("merge_heads", vec![n(&[3, 4, 2])], Box::new(|t, v| t.merge_heads(v[0]))),
        ("concat_rows", vec![n(&[4]), n(&[3, 4]), n(&[2, 4])], Box::new(|t, v| t.concat_rows(&[v[0], v[1], v[2]]))),
        (
            "cross_entropy",
            vec![n(&[5])],
            Box::new(move |t, v| t.cross_entropy(v[0], (seed % 5) as usize)),
        ),
    ];
    cases.push(("relu", vec![normal_away_from_zero(&[3, 4], 0.05, &mut r)], Box::new(|t, v| Ok(t.relu(v[0])))));
    cases
}

/// Relative error of every parameter gradient of the probe's cross-entropy
/// loss, checked against central differences at 64-bit.
pub fn model_grad_check(config: &ProbeConfig, seed: u64) -> Vec<(String, f64)> {
    let model = ProbeModel::<f64>::init_with_seed(config, seed).unwrap();
    let mut r = rng(seed.wrapping_add(1000));
    let clip = random_clip(config.dims(), true, &mut r);
    let label = (seed as usize) % config.num_classes;
    let (_, analytic) = model.loss_and_grads(&clip, label).unwrap();
    let loss_of = |m: &ProbeModel<f64>| {
        let logits = m.forward(&clip).unwrap();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        lse - logits[label]
    };
    let mut out = Vec::new();
    for (p, (name, tensor)) in model.params().iter().enumerate() {
        let mut numeric = vec![0.0; tensor.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut m = model.clone();
            let x = tensor.data()[j];
            m.param_mut(name).unwrap().data_mut()[j] = x + FD_EPS;
            let up = loss_of(&m);
            m.param_mut(name).unwrap().data_mut()[j] = x - FD_EPS;
            let down = loss_of(&m);
            *slot = (up - down) / (2.0 * FD_EPS);
        }
        out.push((name.clone(), relative_error(&analytic[p], &numeric)));
    }
    out
}

pub fn linf(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}
