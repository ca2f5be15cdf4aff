use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Activation, ModelConfig, NormKind, NormPlacement, Positional};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Role of a parameter; decides initialization and weight-decay membership.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    NormGain,
    NormBias,
    Weight,
    Bias,
}

impl ParamKind {
    pub fn of(name: &str) -> ParamKind {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        if name.starts_with("embed.") {
            ParamKind::Embedding
        } else if name.contains("norm.") {
            if leaf == "gain" {
                ParamKind::NormGain
            } else {
                ParamKind::NormBias
            }
        } else if leaf.starts_with('b') {
            ParamKind::Bias
        } else {
            ParamKind::Weight
        }
    }

    /// Norm parameters and embeddings are never weight-decayed.
    pub fn decays(self) -> bool {
        !matches!(
            self,
            ParamKind::Embedding | ParamKind::NormGain | ParamKind::NormBias
        )
    }
}

/// Names and shapes of every tensor the configuration needs, in registry order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let h = cfg.ffn_width();
    let mut out: Vec<(String, Vec<usize>)> = vec![("embed.tokens".into(), vec![cfg.vocab_size, d])];
    if cfg.positional == Positional::AbsoluteLearned {
        out.push(("embed.positions".into(), vec![cfg.max_positions, d]));
    }
    let norm = |out: &mut Vec<(String, Vec<usize>)>, prefix: &str| {
        out.push((format!("{prefix}.gain"), vec![d]));
        if cfg.norm == NormKind::LayerNorm && cfg.use_bias {
            out.push((format!("{prefix}.bias"), vec![d]));
        }
    };
    for l in 0..cfg.n_layers {
        let p = format!("layers.{l}");
        norm(&mut out, &format!("{p}.attn_norm"));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{p}.attn.{w}"), vec![d, d]));
        }
        if cfg.use_bias {
            for b in ["bq", "bk", "bv", "bo"] {
                out.push((format!("{p}.attn.{b}"), vec![d]));
            }
        }
        norm(&mut out, &format!("{p}.ffn_norm"));
        out.push((format!("{p}.ffn.w1"), vec![d, h]));
        out.push((format!("{p}.ffn.w2"), vec![h, d]));
        if cfg.activation == Activation::Swiglu {
            out.push((format!("{p}.ffn.w3"), vec![d, h]));
        }
        if cfg.use_bias {
            out.push((format!("{p}.ffn.b1"), vec![h]));
            out.push((format!("{p}.ffn.b2"), vec![d]));
            if cfg.activation == Activation::Swiglu {
                out.push((format!("{p}.ffn.b3"), vec![h]));
            }
        }
    }
    if cfg.norm_placement == NormPlacement::Pre {
        norm(&mut out, "final_norm");
    }
    if !cfg.tie_mlm_head {
        out.push(("mlm.weight".into(), vec![d, cfg.vocab_size]));
    }
    out.push(("mlm.bias".into(), vec![cfg.vocab_size]));
    out
}

/// Closed-form parameter total for a configuration.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.d_model;
    let h = cfg.ffn_width();
    let v = cfg.vocab_size;
    let norm = d * if cfg.norm == NormKind::LayerNorm && cfg.use_bias { 2 } else { 1 };
    let ffn_mats = if cfg.activation == Activation::Swiglu { 3 } else { 2 };
    let mut per_layer = 2 * norm + 4 * d * d + ffn_mats * d * h;
    if cfg.use_bias {
        per_layer += 4 * d + h + d;
        if cfg.activation == Activation::Swiglu {
            per_layer += h;
        }
    }
    let mut total = v * d + cfg.n_layers * per_layer + v;
    if cfg.positional == Positional::AbsoluteLearned {
        total += cfg.max_positions * d;
    }
    if cfg.norm_placement == NormPlacement::Pre {
        total += norm;
    }
    if !cfg.tie_mlm_head {
        total += d * v;
    }
    total
}

/// Named parameter registry of an encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    tensors: IndexMap<String, Tensor>,
}

impl EncoderParams {
    /// Normal(0, init_std) matrices and embeddings, unit norm gains, zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = IndexMap::new();
        for (name, shape) in param_layout(cfg) {
            let t = match ParamKind::of(&name) {
                ParamKind::Embedding | ParamKind::Weight => Tensor::randn(&shape, cfg.init_std, &mut rng),
                ParamKind::NormGain => Tensor::full(&shape, 1.0),
                ParamKind::NormBias | ParamKind::Bias => Tensor::zeros(&shape),
            };
            tensors.insert(name, t.with_grad(true));
        }
        Ok(EncoderParams { tensors })
    }

    /// Builds a registry from loaded tensors, checking it matches `cfg`.
    pub fn from_tensors(cfg: &ModelConfig, mut source: IndexMap<String, Tensor>) -> Result<Self> {
        let mut tensors = IndexMap::new();
        for (name, shape) in param_layout(cfg) {
            let t = source
                .shift_remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "load",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
            tensors.insert(name, t.with_grad(true));
        }
        Ok(EncoderParams { tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub(crate) fn index_of(&self, name: &str) -> Result<usize> {
        self.tensors
            .get_index_of(name)
            .ok_or_else(|| Error::invalid(format!("no parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        let mut c = ModelConfig::toy(100);
        c.n_layers = 2;
        c
    }

    #[test]
    fn toy_count_matches_registry_walk() {
        let cfg = toy();
        assert_eq!(cfg.ffn_width(), 192);
        let p = EncoderParams::init(&cfg, 0).unwrap();
        assert_eq!(p.total_elements(), param_count(&cfg));
        // hand enumeration: embedding, 2 × (2 gains, 4 attn, 3 ffn), final gain, bias
        let hand = 100 * 64 + 2 * (2 * 64 + 4 * 64 * 64 + 3 * 64 * 192) + 64 + 100;
        assert_eq!(param_count(&cfg), hand);
    }

    #[test]
    fn every_toggle_matches_registry_walk() {
        for positional in [Positional::Rope, Positional::AbsoluteLearned] {
            for norm in [NormKind::RmsNorm, NormKind::LayerNorm] {
                for placement in [NormPlacement::Pre, NormPlacement::Post] {
                    for act in [Activation::Gelu, Activation::Swiglu] {
                        for use_bias in [false, true] {
                            for tie in [false, true] {
                                let cfg = ModelConfig {
                                    positional,
                                    norm,
                                    norm_placement: placement,
                                    activation: act,
                                    use_bias,
                                    tie_mlm_head: tie,
                                    max_positions: 32,
                                    ..toy()
                                };
                                let p = EncoderParams::init(&cfg, 1).unwrap();
                                assert_eq!(p.total_elements(), param_count(&cfg), "{cfg:?}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn depth_is_linear() {
        let cfg = toy();
        let mut deeper = cfg.clone();
        deeper.n_layers *= 2;
        let mut one = cfg.clone();
        one.n_layers = 1;
        let mut zero_layer_delta = cfg.clone();
        zero_layer_delta.n_layers = 3;
        let per_layer = param_count(&zero_layer_delta) - param_count(&cfg);
        assert_eq!(param_count(&one) + per_layer, param_count(&cfg));
        assert_eq!(param_count(&deeper) - param_count(&cfg), cfg.n_layers * per_layer);
    }

    #[test]
    fn neobert_preset_in_band() {
        let n = param_count(&ModelConfig::neobert());
        assert!((200_000_000..=280_000_000).contains(&n), "{n}");
    }

    #[test]
    fn gelu_and_swiglu_budgets_match_at_768() {
        let mut g = ModelConfig::neobert();
        g.activation = Activation::Gelu;
        let s = ModelConfig::neobert();
        let ffn = |c: &ModelConfig| {
            let m = if c.activation == Activation::Swiglu { 3 } else { 2 };
            m * c.d_model * c.ffn_width()
        };
        let (a, b) = (ffn(&g) as f64, ffn(&s) as f64);
        assert!((a - b).abs() / a < 0.01, "{a} vs {b}");
        let (pa, pb) = (param_count(&g) as f64, param_count(&s) as f64);
        assert!((pa - pb).abs() / pa < 0.01);
    }

    #[test]
    fn bias_free_by_default() {
        let p = EncoderParams::init(&toy(), 0).unwrap();
        let biases: Vec<_> = p
            .iter()
            .filter(|(n, _)| ParamKind::of(n) == ParamKind::Bias)
            .map(|(n, _)| n.to_string())
            .collect();
        assert_eq!(biases, vec!["mlm.bias".to_string()]);
    }

    #[test]
    fn decay_set_is_norms_and_embeddings() {
        let mut cfg = toy();
        cfg.positional = Positional::AbsoluteLearned;
        cfg.norm = NormKind::LayerNorm;
        cfg.use_bias = true;
        let p = EncoderParams::init(&cfg, 0).unwrap();
        for (name, _) in p.iter() {
            let excluded = name.starts_with("embed.") || name.contains("norm.");
            assert_eq!(!ParamKind::of(name).decays(), excluded, "{name}");
        }
    }
}
