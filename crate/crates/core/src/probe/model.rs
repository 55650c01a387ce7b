//! Probe heads: parameters, initialization and forward passes.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::{Aggregation, BlockStyle, ClsMode, PeGranularity, PeScheme, ProbeConfig, ProbeVariant};
use crate::autograd::{Tape, Var};
use crate::data::{FeatureDims, FeatureSequence};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const INIT_STD: f64 = 0.02;
const FF_MULT: usize = 4;

pub const PARAM_TEMPORAL_PE: &str = "temporal_pe";
pub const PARAM_GLOBAL_CLS: &str = "global_cls";

/// Tokens entering the attention layer, with the frame each came from
/// (`-1` for the global CLS slot).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Tensor<T>,
    pub frame_index: Vec<i64>,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.frame_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_index.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TokenSource {
    Patch { frame: usize, index: usize },
    FrameCls { frame: usize },
}

impl TokenSource {
    fn frame(self) -> usize {
        match self {
            TokenSource::Patch { frame, .. } | TokenSource::FrameCls { frame } => frame,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ParamInit {
    Normal,
    TruncatedNormal,
    Zeros,
    Ones,
}

/// Trainable parameters of one probe head plus its fixed buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeModel<T> {
    config: ProbeConfig,
    params: Vec<(String, Tensor<T>)>,
    fixed_pe: Option<Tensor<T>>,
}

/// Tape handles for a model's parameters.
pub struct ParamVars {
    vars: HashMap<String, Var>,
    order: Vec<Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter {name:?} not registered"))
    }

    /// Handles in parameter order.
    pub fn in_order(&self) -> &[Var] {
        &self.order
    }
}

fn param_layout(cfg: &ProbeConfig) -> Vec<(String, Vec<usize>, ParamInit)> {
    use ParamInit::*;
    let d = cfg.d_model;
    let mut out: Vec<(String, Vec<usize>, ParamInit)> = Vec::new();
    let mut push = |name: &str, shape: Vec<usize>, init: ParamInit| out.push((name.to_string(), shape, init));
    let attention = |push: &mut dyn FnMut(&str, Vec<usize>, ParamInit)| {
        for w in ["wq", "wk", "wv", "wo"] {
            push(&format!("attn.{w}"), vec![d, d], TruncatedNormal);
            push(&format!("attn.b{}", &w[1..]), vec![d], Zeros);
        }
    };
    let layer_norm = |push: &mut dyn FnMut(&str, Vec<usize>, ParamInit), name: &str| {
        push(&format!("{name}.gamma"), vec![d], Ones);
        push(&format!("{name}.beta"), vec![d], Zeros);
    };
    let feed_forward = |push: &mut dyn FnMut(&str, Vec<usize>, ParamInit)| {
        push("ff.w1", vec![d, FF_MULT * d], TruncatedNormal);
        push("ff.b1", vec![FF_MULT * d], Zeros);
        push("ff.w2", vec![FF_MULT * d, d], TruncatedNormal);
        push("ff.b2", vec![d], Zeros);
    };
    match cfg.variant {
        ProbeVariant::Linear => {}
        ProbeVariant::Attentive => {
            push("query", vec![1, d], Normal);
            attention(&mut push);
            layer_norm(&mut push, "ln");
            feed_forward(&mut push);
        }
        ProbeVariant::SelfAttn | ProbeVariant::Step => {
            if cfg.uses_global_cls() {
                push(PARAM_GLOBAL_CLS, vec![d], Normal);
            }
            match cfg.pe_scheme {
                PeScheme::Learnable => push(PARAM_TEMPORAL_PE, vec![cfg.pe_rows(), d], Normal),
                PeScheme::Hybrid => push(PARAM_TEMPORAL_PE, vec![cfg.pe_rows(), d], Zeros),
                PeScheme::None | PeScheme::FixedSinusoidal => {}
            }
            attention(&mut push);
            if cfg.block_style != BlockStyle::AttnOnly {
                layer_norm(&mut push, "ln1");
            }
            if cfg.block_style == BlockStyle::FullBlock {
                layer_norm(&mut push, "ln2");
                feed_forward(&mut push);
            }
        }
    }
    push("classifier.w", vec![d, cfg.num_classes], TruncatedNormal);
    push("classifier.b", vec![cfg.num_classes], Zeros);
    out
}

/// Standard transformer sinusoid table: `sin` on even columns, `cos` on odd.
pub fn sinusoidal_table<T: Scalar>(rows: usize, dim: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(rows * dim);
    for pos in 0..rows {
        for c in 0..dim {
            let pair = (c / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
            let v = if c % 2 == 0 { angle.sin() } else { angle.cos() };
            data.push(T::from_f64_lossy(v));
        }
    }
    Tensor::new(vec![rows, dim], data).expect("rows·dim values")
}

impl<T: Scalar> ProbeModel<T> {
    /// Initializes parameters from `config.seed`.
    pub fn init(config: &ProbeConfig) -> Result<Self> {
        Self::init_with_seed(config, config.seed)
    }

    pub fn init_with_seed(config: &ProbeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let params = param_layout(config)
            .into_iter()
            .map(|(name, shape, init)| {
                let numel: usize = shape.iter().product();
                let data = (0..numel)
                    .map(|_| {
                        let v = match init {
                            ParamInit::Zeros => 0.0,
                            ParamInit::Ones => 1.0,
                            ParamInit::Normal => normal() * INIT_STD,
                            ParamInit::TruncatedNormal => loop {
                                let z = normal();
                                if z.abs() <= 2.0 {
                                    break z * INIT_STD;
                                }
                            },
                        };
                        T::from_f64_lossy(v)
                    })
                    .collect();
                (name, Tensor::new(shape, data).expect("layout shape"))
            })
            .collect();
        Ok(Self { config: config.clone(), params, fixed_pe: fixed_pe_for(config) })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_params(config: ProbeConfig, params: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors for this config, found {}",
                layout.len(),
                params.len()
            )));
        }
        for ((name, shape, _), (pname, tensor)) in layout.iter().zip(&params) {
            if name != pname || shape.as_slice() != tensor.shape() {
                return Err(Error::Config(format!(
                    "parameter mismatch: expected {name} {shape:?}, found {pname} {:?}",
                    tensor.shape()
                )));
            }
        }
        let fixed_pe = fixed_pe_for(&config);
        Ok(Self { config, params, fixed_pe })
    }

    pub fn config(&self) -> &ProbeConfig {
        &self.config
    }

    pub fn params(&self) -> &[(String, Tensor<T>)] {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn count_params(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ProbeModel<U> {
        ProbeModel {
            config: self.config.clone(),
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
            fixed_pe: self.fixed_pe.as_ref().map(Tensor::cast),
        }
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> ParamVars {
        let mut vars = HashMap::with_capacity(self.params.len());
        let mut order = Vec::with_capacity(self.params.len());
        for (name, tensor) in &self.params {
            let v = tape.leaf(tensor.clone(), requires_grad);
            vars.insert(name.clone(), v);
            order.push(v);
        }
        ParamVars { vars, order }
    }

    fn check_dims(&self, features: &FeatureSequence) -> Result<()> {
        let want = self.config.dims();
        let got = features.dims();
        if want != got {
            return Err(Error::Config(format!(
                "features {} have dims (T={}, n={}, d={}) but the probe expects (T={}, n={}, d={})",
                features.clip_id, got.frames, got.tokens, got.dim, want.frames, want.tokens, want.dim
            )));
        }
        Ok(())
    }

    fn token_sources(&self, features: &FeatureSequence) -> Result<Vec<TokenSource>> {
        let cfg = &self.config;
        let FeatureDims { frames, tokens, .. } = cfg.dims();
        let has_cls = features.frame_cls().is_some();
        let patches = |t: usize| (0..tokens).map(move |j| TokenSource::Patch { frame: t, index: j });
        let need_cls = || {
            if has_cls {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{} probe with {:?} aggregation needs frame CLS tokens, clip {} has none",
                    cfg.variant, cfg.aggregation, features.clip_id
                )))
            }
        };
        let with_frame_cls = |out: &mut Vec<TokenSource>| {
            for t in 0..frames {
                out.push(TokenSource::FrameCls { frame: t });
                out.extend(patches(t));
            }
        };
        let mut out = Vec::new();
        match cfg.variant {
            ProbeVariant::Linear => {
                if has_cls {
                    out.extend((0..frames).map(|t| TokenSource::FrameCls { frame: t }));
                } else {
                    (0..frames).for_each(|t| out.extend(patches(t)));
                }
            }
            ProbeVariant::Attentive => {
                if has_cls {
                    with_frame_cls(&mut out);
                } else {
                    (0..frames).for_each(|t| out.extend(patches(t)));
                }
            }
            ProbeVariant::SelfAttn | ProbeVariant::Step => match (cfg.aggregation, cfg.cls_mode) {
                (Aggregation::PatchOnly, _) | (Aggregation::Combined, ClsMode::GlobalCls) => {
                    (0..frames).for_each(|t| out.extend(patches(t)));
                }
                (Aggregation::Combined, ClsMode::PerFrameCls) => {
                    need_cls()?;
                    with_frame_cls(&mut out);
                }
                (Aggregation::GlobalClsOnly, _) => {
                    need_cls()?;
                    out.extend((0..frames).map(|t| TokenSource::FrameCls { frame: t }));
                }
            },
        }
        Ok(out)
    }

    fn gather_tokens(&self, features: &FeatureSequence, sources: &[TokenSource]) -> Tensor<T> {
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(sources.len() * d);
        for s in sources {
            let row = match *s {
                TokenSource::Patch { frame, index } => &features.patch_frame(frame)[index * d..(index + 1) * d],
                TokenSource::FrameCls { frame } => features.cls_frame(frame).expect("checked"),
            };
            data.extend(row.iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        Tensor::new(vec![sources.len(), d], data).expect("rows·d values")
    }

    fn pe_rows_for(&self, sources: &[TokenSource]) -> Vec<Option<usize>> {
        let n = self.config.tokens_per_frame;
        sources
            .iter()
            .map(|s| match (self.config.pe_granularity, *s) {
                (PeGranularity::FrameWise, s) => Some(s.frame()),
                (PeGranularity::TokenWise, TokenSource::Patch { frame, index }) => Some(frame * n + index),
                (PeGranularity::TokenWise, TokenSource::FrameCls { .. }) => None,
            })
            .collect()
    }

    /// Builds the token sequence on `tape`: gathers frame tokens, injects the
    /// temporal embedding and prepends the global CLS slot.
    fn assemble_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &ParamVars,
        features: &FeatureSequence,
    ) -> Result<(Var, Vec<i64>)> {
        self.check_dims(features)?;
        let cfg = &self.config;
        let sources = self.token_sources(features)?;
        let mut frame_index: Vec<i64> = sources.iter().map(|s| s.frame() as i64).collect();
        let mut tokens = tape.constant(self.gather_tokens(features, &sources));
        if cfg.variant.is_self_attention() && cfg.pe_scheme != PeScheme::None {
            let table = match cfg.pe_scheme {
                PeScheme::Learnable => vars.get(PARAM_TEMPORAL_PE),
                PeScheme::FixedSinusoidal => tape.constant(self.fixed_pe.clone().expect("fixed table")),
                PeScheme::Hybrid => {
                    let base = tape.constant(self.fixed_pe.clone().expect("fixed table"));
                    tape.add(base, vars.get(PARAM_TEMPORAL_PE))?
                }
                PeScheme::None => unreachable!(),
            };
            tokens = tape.add_gathered_rows(tokens, table, &self.pe_rows_for(&sources))?;
        }
        if cfg.uses_global_cls() {
            tokens = tape.concat_rows(&[vars.get(PARAM_GLOBAL_CLS), tokens])?;
            frame_index.insert(0, -1);
        }
        Ok((tokens, frame_index))
    }

    /// Token sequence the probe's attention layer sees for `features`.
    pub fn assemble_tokens(&self, features: &FeatureSequence) -> Result<TokenSequence<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let (tokens, frame_index) = self.assemble_on_tape(&mut tape, &vars, features)?;
        Ok(TokenSequence { tokens: tape.value(tokens).clone(), frame_index })
    }

    fn mhsa(&self, tape: &mut Tape<T>, vars: &ParamVars, queries: Var, context: Var) -> Result<Var> {
        let heads = self.config.num_heads;
        let q = tape.linear(queries, vars.get("attn.wq"), vars.get("attn.bq"))?;
        let k = tape.linear(context, vars.get("attn.wk"), vars.get("attn.bk"))?;
        let v = tape.linear(context, vars.get("attn.wv"), vars.get("attn.bv"))?;
        let (q, k, v) = (tape.split_heads(q, heads)?, tape.split_heads(k, heads)?, tape.split_heads(v, heads)?);
        let z = tape.attention(q, k, v)?;
        let z = tape.merge_heads(z)?;
        tape.linear(z, vars.get("attn.wo"), vars.get("attn.bo"))
    }

    fn layer_norm(&self, tape: &mut Tape<T>, vars: &ParamVars, x: Var, name: &str) -> Result<Var> {
        tape.layer_norm(x, vars.get(&format!("{name}.gamma")), vars.get(&format!("{name}.beta")))
    }

    fn feed_forward(&self, tape: &mut Tape<T>, vars: &ParamVars, x: Var) -> Result<Var> {
        let h = tape.linear(x, vars.get("ff.w1"), vars.get("ff.b1"))?;
        let h = tape.gelu(h);
        tape.linear(h, vars.get("ff.w2"), vars.get("ff.b2"))
    }

    /// Self-attention block in the configured style.
    fn attention_block(&self, tape: &mut Tape<T>, vars: &ParamVars, x: Var) -> Result<Var> {
        match self.config.block_style {
            BlockStyle::AttnOnly => self.mhsa(tape, vars, x, x),
            BlockStyle::AttnLnSkip => {
                let n = self.layer_norm(tape, vars, x, "ln1")?;
                let a = self.mhsa(tape, vars, n, n)?;
                tape.add(x, a)
            }
            BlockStyle::FullBlock => {
                let n = self.layer_norm(tape, vars, x, "ln1")?;
                let a = self.mhsa(tape, vars, n, n)?;
                let h = tape.add(x, a)?;
                let n = self.layer_norm(tape, vars, h, "ln2")?;
                let f = self.feed_forward(tape, vars, n)?;
                tape.add(h, f)
            }
        }
    }

    /// Records the forward pass and returns the `[C]` logits.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, vars: &ParamVars, features: &FeatureSequence) -> Result<Var> {
        let (tokens, _) = self.assemble_on_tape(tape, vars, features)?;
        let pooled = match self.config.variant {
            ProbeVariant::Linear => tape.mean_rows(tokens)?,
            ProbeVariant::Attentive => {
                let query = vars.get("query");
                let a = self.mhsa(tape, vars, query, tokens)?;
                let h = tape.add(query, a)?;
                let n = self.layer_norm(tape, vars, h, "ln")?;
                let f = self.feed_forward(tape, vars, n)?;
                let out = tape.add(h, f)?;
                tape.mean_rows(out)?
            }
            ProbeVariant::SelfAttn | ProbeVariant::Step => {
                let y = self.attention_block(tape, vars, tokens)?;
                tape.mean_rows(y)?
            }
        };
        tape.linear(pooled, vars.get("classifier.w"), vars.get("classifier.b"))
    }

    pub fn forward(&self, features: &FeatureSequence) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let logits = self.forward_on_tape(&mut tape, &vars, features)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Cross-entropy loss for one clip and the gradient of every parameter,
    /// in parameter order.
    pub fn loss_and_grads(&self, features: &FeatureSequence, label: usize) -> Result<(f64, Vec<Vec<T>>)> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, true);
        let logits = self.forward_on_tape(&mut tape, &vars, features)?;
        let loss = tape.cross_entropy(logits, label)?;
        tape.backward(loss)?;
        let grads = vars
            .in_order()
            .iter()
            .map(|&v| tape.grad(v).expect("parameter leaf").to_vec())
            .collect();
        Ok((tape.value(loss).data()[0].as_f64(), grads))
    }
}

fn fixed_pe_for<T: Scalar>(config: &ProbeConfig) -> Option<Tensor<T>> {
    matches!(config.pe_scheme, PeScheme::FixedSinusoidal | PeScheme::Hybrid)
        .then(|| sinusoidal_table(config.pe_rows(), config.d_model))
        .filter(|t| t.numel() > 0)
}

/// Closed-form parameter count, independent of any instantiated model.
pub fn count_params(config: &ProbeConfig) -> usize {
    param_layout(config).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(frames: usize, tokens: usize, dim: usize) -> FeatureDims {
        FeatureDims { frames, tokens, dim }
    }

    fn clip(d: FeatureDims, seed: u64) -> FeatureSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = || -> f32 { StandardNormal.sample(&mut rng) };
        let p = (0..d.frames * d.tokens * d.dim).map(|_| g()).collect();
        let c = (0..d.frames * d.dim).map(|_| g()).collect();
        FeatureSequence::new("c", d, p, Some(c)).unwrap()
    }

    #[test]
    fn seeds_change_every_random_tensor() {
        let d = dims(4, 2, 8);
        for variant in ProbeVariant::ALL {
            let mut cfg = ProbeConfig::preset(variant, d, 2, 3);
            cfg.block_style = BlockStyle::FullBlock;
            let a = ProbeModel::<f64>::init_with_seed(&cfg, 1).unwrap();
            let b = ProbeModel::<f64>::init_with_seed(&cfg, 2).unwrap();
            for ((name, _, init), ((_, ta), (_, tb))) in param_layout(&cfg).iter().zip(a.params().iter().zip(b.params())) {
                let random = matches!(init, ParamInit::Normal | ParamInit::TruncatedNormal);
                assert_eq!(ta != tb, random, "{variant:?} {name}");
            }
        }
    }

    #[test]
    fn step_token_layout() {
        let d = dims(2, 2, 4);
        let cfg = ProbeConfig::preset(ProbeVariant::Step, d, 2, 3);
        let m = ProbeModel::<f64>::init(&cfg).unwrap();
        let seq = m.assemble_tokens(&clip(d, 1)).unwrap();
        assert_eq!(seq.len(), 5);
        assert_eq!(seq.frame_index, vec![-1, 0, 0, 1, 1]);
        // no PE on the CLS slot
        assert_eq!(&seq.tokens.data()[..4], m.param(PARAM_GLOBAL_CLS).unwrap().data());
    }

    #[test]
    fn self_attn_baseline_layout() {
        let d = dims(3, 2, 4);
        let cfg = ProbeConfig::preset(ProbeVariant::SelfAttn, d, 2, 3);
        let m = ProbeModel::<f64>::init(&cfg).unwrap();
        let seq = m.assemble_tokens(&clip(d, 1)).unwrap();
        assert_eq!(seq.len(), 3 * 3);
        assert_eq!(seq.frame_index, vec![0, 0, 0, 1, 1, 1, 2, 2, 2]);
    }

    #[test]
    fn sinusoid_position_zero() {
        let t = sinusoidal_table::<f64>(3, 6);
        assert_eq!(&t.data()[..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        // position 1, first pair: sin(1), cos(1)
        assert!((t.data()[6] - 1f64.sin()).abs() < 1e-15);
        assert!((t.data()[7] - 1f64.cos()).abs() < 1e-15);
    }

    #[test]
    fn missing_frame_cls_is_config_error() {
        let d = dims(2, 2, 4);
        let cfg = ProbeConfig::preset(ProbeVariant::SelfAttn, d, 2, 3);
        let m = ProbeModel::<f32>::init(&cfg).unwrap();
        let f = FeatureSequence::new("x", d, vec![0.0; 16], None).unwrap();
        assert!(matches!(m.forward(&f), Err(Error::Config(_))));
    }

    #[test]
    fn dim_mismatch_is_config_error() {
        let cfg = ProbeConfig::preset(ProbeVariant::Step, dims(2, 2, 4), 2, 3);
        let m = ProbeModel::<f32>::init(&cfg).unwrap();
        assert!(matches!(m.forward(&clip(dims(3, 2, 4), 0)), Err(Error::Config(_))));
    }

    #[test]
    fn from_params_checks_layout() {
        let cfg = ProbeConfig::preset(ProbeVariant::Linear, dims(2, 2, 4), 2, 3);
        let m = ProbeModel::<f32>::init(&cfg).unwrap();
        let ok = ProbeModel::from_params(cfg.clone(), m.params().to_vec()).unwrap();
        assert_eq!(ok, m);
        let mut bad = m.params().to_vec();
        bad.swap(0, 1);
        assert!(ProbeModel::from_params(cfg, bad).is_err());
    }

    #[test]
    fn count_matches_instantiated_model() {
        for v in ProbeVariant::ALL {
            for style in [BlockStyle::AttnOnly, BlockStyle::AttnLnSkip, BlockStyle::FullBlock] {
                let mut cfg = ProbeConfig::preset(v, dims(3, 2, 8), 2, 5);
                if v.is_self_attention() {
                    cfg.block_style = style;
                }
                let m = ProbeModel::<f32>::init(&cfg).unwrap();
                assert_eq!(m.count_params(), count_params(&cfg));
            }
        }
    }
}
