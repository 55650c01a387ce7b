//! Forward passes checked against plain-loop re-implementations.

mod common;

use common::{normal, random_clip, rng};
use probekit::data::{FeatureDims, FeatureSequence};
use probekit::probe::{ProbeConfig, ProbeModel, ProbeVariant};
use probekit::{Tape, Tensor};

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor<f64>) -> Mat {
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(|r| r.to_vec()).collect()
}

fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter()
        .map(|row| (0..b.len()).map(|o| b[o] + (0..row.len()).map(|i| row[i] * w[i][o]).sum::<f64>()).collect())
        .collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Multi-head attention with contiguous head slices, one (i, j) pair at a time.
fn attention(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..q.len() {
            let scores: Vec<f64> = (0..k.len())
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let p = softmax(&scores);
            for c in cols.clone() {
                out[i][c] = (0..k.len()).map(|j| p[j] * v[j][c]).sum();
            }
        }
    }
    out
}

fn param(m: &ProbeModel<f64>, name: &str) -> Tensor<f64> {
    m.param(name).unwrap().clone()
}

fn step_oracle(m: &ProbeModel<f64>, x: &FeatureSequence) -> Vec<f64> {
    let d = x.dims();
    let pe = mat(&param(m, "temporal_pe"));
    let mut tokens: Mat = vec![param(m, "global_cls").data().to_vec()];
    for (t, pe_t) in pe.iter().enumerate().take(d.frames) {
        for j in 0..d.tokens {
            let patch = &x.patch_frame(t)[j * d.dim..(j + 1) * d.dim];
            tokens.push((0..d.dim).map(|c| patch[c] as f64 + pe_t[c]).collect());
        }
    }
    let proj = |w: &str, b: &str, x: &Mat| affine(x, &mat(&param(m, w)), param(m, b).data());
    let q = proj("attn.wq", "attn.bq", &tokens);
    let k = proj("attn.wk", "attn.bk", &tokens);
    let v = proj("attn.wv", "attn.bv", &tokens);
    let z = proj("attn.wo", "attn.bo", &attention(&q, &k, &v, m.config().num_heads));
    let pooled: Vec<f64> = (0..d.dim).map(|c| z.iter().map(|r| r[c]).sum::<f64>() / z.len() as f64).collect();
    proj("classifier.w", "classifier.b", &vec![pooled]).remove(0)
}

#[test]
fn step_forward_matches_loop_oracle() {
    let dims = FeatureDims { frames: 3, tokens: 2, dim: 8 };
    for seed in 0..10 {
        let mut m = ProbeModel::<f64>::init_with_seed(&ProbeConfig::preset(ProbeVariant::Step, dims, 2, 2), seed).unwrap();
        // larger weights so every term of the forward pass matters
        let mut r = rng(seed + 50);
        for t in m.params_mut() {
            let noise = normal(t.shape(), &mut r);
            t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v = 0.5 * n);
        }
        let clip = random_clip(dims, false, &mut r);
        let got = m.forward(&clip).unwrap();
        let want = step_oracle(&m, &clip);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-6, "seed {seed}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn attention_matches_loop_oracle() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let (heads, lq, lk, dh) = (3, 4, 6, 2);
        let q = normal(&[lq, heads * dh], &mut r);
        let k = normal(&[lk, heads * dh], &mut r);
        let v = normal(&[lk, heads * dh], &mut r);
        let mut tape = Tape::new();
        let vars: Vec<_> = [&q, &k, &v].iter().map(|t| tape.constant((*t).clone())).collect();
        let split: Vec<_> = vars.iter().map(|&x| tape.split_heads(x, heads).unwrap()).collect();
        let z = tape.attention(split[0], split[1], split[2]).unwrap();
        let merged = tape.merge_heads(z).unwrap();
        let want = attention(&mat(&q), &mat(&k), &mat(&v), heads);
        for (g, w) in tape.value(merged).data().iter().zip(want.concat()) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_model_gives_zero_logits() {
    let dims = FeatureDims { frames: 2, tokens: 3, dim: 4 };
    let clip = FeatureSequence::new("z", dims, vec![0.0; 24], Some(vec![0.0; 8])).unwrap();
    for v in ProbeVariant::ALL {
        let mut m = ProbeModel::<f64>::init(&ProbeConfig::preset(v, dims, 2, 5)).unwrap();
        m.params_mut().for_each(|t| t.data_mut().iter_mut().for_each(|x| *x = 0.0));
        assert_eq!(m.forward(&clip).unwrap(), vec![0.0; 5], "{v}");
    }
}

#[test]
fn linear_probe_logits_are_bit_identical_under_permutation() {
    let dims = FeatureDims { frames: 7, tokens: 2, dim: 6 };
    let m = ProbeModel::<f32>::init(&ProbeConfig::preset(ProbeVariant::Linear, dims, 2, 4)).unwrap();
    let clip = random_clip(dims, true, &mut rng(11));
    let base = m.forward(&clip).unwrap();
    for seed in 0..5 {
        let moved = probekit::data::corrupt_order(&clip, probekit::data::OrderCorruption::Shuffle { seed });
        assert_eq!(m.forward(&moved).unwrap(), base);
    }
}

#[test]
fn init_is_seeded() {
    let dims = FeatureDims { frames: 3, tokens: 2, dim: 8 };
    let cfg = ProbeConfig::preset(ProbeVariant::Step, dims, 2, 4);
    let a = ProbeModel::<f32>::init_with_seed(&cfg, 1).unwrap();
    assert_eq!(a, ProbeModel::init_with_seed(&cfg, 1).unwrap());
    let b = ProbeModel::<f32>::init_with_seed(&cfg, 2).unwrap();
    for ((name, x), (_, y)) in a.params().iter().zip(b.params()) {
        let random = !(name.ends_with(".b") || name.contains(".b") || name.contains("ln"));
        if random {
            assert!(x.max_abs_diff(y) > 0.0, "{name}");
        }
    }
    let trunc = a.params().iter().filter(|(n, _)| n.contains(".w")).flat_map(|(_, t)| t.data().to_vec());
    assert!(trunc.into_iter().all(|v| v.abs() <= 0.04));
}
