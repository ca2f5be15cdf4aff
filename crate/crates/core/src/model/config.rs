use crate::config::{Section, SectionWriter};
use crate::error::{Error, Result};

macro_rules! keyword_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name { $($variant),+ }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self { $($name::$variant => $text),+ })
            }
        }

        impl std::str::FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(format!(
                        "expected one of [{}], got `{other}`",
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}
pub(crate) use keyword_enum;

keyword_enum!(Positional { AbsoluteLearned => "absolute", Rope => "rope" });
keyword_enum!(NormKind { LayerNorm => "layernorm", RmsNorm => "rmsnorm" });
keyword_enum!(NormPlacement { Pre => "pre", Post => "post" });
keyword_enum!(Activation { Gelu => "gelu", Swiglu => "swiglu" });

/// Context-extension parameters for rotary embeddings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RopeScaling {
    /// Ratio between the target and the original context length.
    pub factor: f64,
    /// Context length the model was trained at.
    pub original_max: usize,
}

/// Every architectural switch of the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub positional: Positional,
    pub rope_theta: f64,
    pub rope_scaling: Option<RopeScaling>,
    pub norm: NormKind,
    pub norm_placement: NormPlacement,
    pub activation: Activation,
    /// `None` derives the width from `d_model` and the activation.
    pub ffn_hidden: Option<usize>,
    pub use_bias: bool,
    pub tie_mlm_head: bool,
    pub norm_eps: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::neobert()
    }
}

impl ModelConfig {
    /// 28 layers × 768, 12 heads, SwiGLU, Pre-RMSNorm, RoPE, 30K vocabulary.
    pub fn neobert() -> Self {
        ModelConfig {
            n_layers: 28,
            d_model: 768,
            n_heads: 12,
            vocab_size: 30_000,
            max_positions: 4096,
            positional: Positional::Rope,
            rope_theta: 10_000.0,
            rope_scaling: None,
            norm: NormKind::RmsNorm,
            norm_placement: NormPlacement::Pre,
            activation: Activation::Swiglu,
            ffn_hidden: None,
            use_bias: false,
            tie_mlm_head: true,
            norm_eps: 1e-5,
            init_std: 0.02,
        }
    }

    /// BERT-base geometry with learned absolute positions, GELU and Pre-LayerNorm.
    pub fn bert_base_pre_ln() -> Self {
        ModelConfig {
            n_layers: 12,
            max_positions: 512,
            positional: Positional::AbsoluteLearned,
            norm: NormKind::LayerNorm,
            activation: Activation::Gelu,
            ..Self::neobert()
        }
    }

    /// Small NeoBERT-style model for tests and desk experiments.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            vocab_size,
            max_positions: 1024,
            ..Self::neobert()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_hidden.unwrap_or(match self.activation {
            Activation::Gelu => 4 * self.d_model,
            Activation::Swiglu => ffn_hidden_size(self.d_model),
        })
    }

    /// Longest sequence the position scheme can address.
    pub fn position_limit(&self) -> usize {
        match (self.positional, self.rope_scaling) {
            (Positional::Rope, Some(s)) => self.max_positions.max((s.factor * s.original_max as f64) as usize),
            _ => self.max_positions,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.vocab_size == 0 || self.max_positions == 0 {
            return fail("n_layers, n_heads, vocab_size and max_positions must be positive".into());
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(64) {
            return fail(format!("d_model {} must be a positive multiple of 64", self.d_model));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.positional == Positional::Rope && !self.head_dim().is_multiple_of(2) {
            return fail(format!("rotary embeddings need an even head_dim, got {}", self.head_dim()));
        }
        let h = self.ffn_width();
        if h == 0 || !h.is_multiple_of(64) {
            return fail(format!("ffn_hidden {h} must be a positive multiple of 64"));
        }
        if !(self.rope_theta > 0.0) || !(self.norm_eps > 0.0) || !(self.init_std >= 0.0) {
            return fail("rope_theta and norm_eps must be positive, init_std nonnegative".into());
        }
        if let Some(s) = self.rope_scaling {
            if !(s.factor >= 1.0) || s.original_max == 0 {
                return fail("rope scaling needs factor >= 1 and original_max > 0".into());
            }
        }
        Ok(())
    }

    pub fn from_section(sec: &mut Section) -> Result<Self> {
        let d = Self::neobert();
        let ffn: String = sec.take("ffn_hidden", "auto".to_string())?;
        let scaling_factor: Option<f64> = sec.take_opt("rope_scaling_factor")?;
        let original_max: Option<usize> = sec.take_opt("rope_original_max")?;
        let cfg = ModelConfig {
            n_layers: sec.take("n_layers", d.n_layers)?,
            d_model: sec.take("d_model", d.d_model)?,
            n_heads: sec.take("n_heads", d.n_heads)?,
            vocab_size: sec.take("vocab_size", d.vocab_size)?,
            max_positions: sec.take("max_positions", d.max_positions)?,
            positional: sec.take("positional", d.positional)?,
            rope_theta: sec.take("rope_theta", d.rope_theta)?,
            rope_scaling: match (scaling_factor, original_max) {
                (None, None) => None,
                (Some(factor), Some(original_max)) => Some(RopeScaling { factor, original_max }),
                _ => {
                    return Err(Error::config(
                        "rope_scaling_factor and rope_original_max must be set together",
                    ))
                }
            },
            norm: sec.take("norm", d.norm)?,
            norm_placement: sec.take("norm_placement", d.norm_placement)?,
            activation: sec.take("activation", d.activation)?,
            ffn_hidden: if ffn == "auto" {
                None
            } else {
                Some(ffn.parse().map_err(|_| Error::config(format!("model.ffn_hidden = `{ffn}`")))?)
            },
            use_bias: sec.take("use_bias", d.use_bias)?,
            tie_mlm_head: sec.take("tie_mlm_head", d.tie_mlm_head)?,
            norm_eps: sec.take("norm_eps", d.norm_eps)?,
            init_std: sec.take("init_std", d.init_std)?,
        };
        Ok(cfg)
    }

    pub fn to_rows(&self) -> Vec<(String, String)> {
        let mut w = SectionWriter::new()
            .put("n_layers", self.n_layers)
            .put("d_model", self.d_model)
            .put("n_heads", self.n_heads)
            .put("vocab_size", self.vocab_size)
            .put("max_positions", self.max_positions)
            .put("positional", self.positional)
            .put("rope_theta", self.rope_theta);
        if let Some(s) = self.rope_scaling {
            w = w
                .put("rope_scaling_factor", s.factor)
                .put("rope_original_max", s.original_max);
        }
        w.put("norm", self.norm)
            .put("norm_placement", self.norm_placement)
            .put("activation", self.activation)
            .put(
                "ffn_hidden",
                self.ffn_hidden.map_or("auto".to_string(), |h| h.to_string()),
            )
            .put("use_bias", self.use_bias)
            .put("tie_mlm_head", self.tie_mlm_head)
            .put("norm_eps", self.norm_eps)
            .put("init_std", self.init_std)
            .into_rows()
    }
}

/// SwiGLU hidden width: two thirds of the usual 4·d, rounded to the nearest
/// multiple of 64 and never below 64.
pub fn ffn_hidden_size(d_model: usize) -> usize {
    // round(8d/3 / 64) = round(d / 24); d is a multiple of 64 so no ties.
    (((d_model + 12) / 24) * 64).max(64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::KvDoc;

    #[test]
    fn ffn_hidden_examples() {
        assert_eq!(ffn_hidden_size(768), 2048);
        assert_eq!(ffn_hidden_size(1056), 2816);
        assert_eq!(ffn_hidden_size(64), 192);
        for d in (64..4096).step_by(64) {
            let exact = 8.0 * d as f64 / 3.0;
            let got = ffn_hidden_size(d) as f64;
            assert!((got - exact).abs() <= 32.0, "{d}");
        }
    }

    #[test]
    fn presets_validate() {
        ModelConfig::neobert().validate().unwrap();
        ModelConfig::bert_base_pre_ln().validate().unwrap();
        ModelConfig::toy(100).validate().unwrap();
        let c = ModelConfig::neobert();
        assert_eq!((c.n_layers, c.d_model, c.n_heads, c.vocab_size), (28, 768, 12, 30_000));
        assert_eq!(c.ffn_width(), 2048);
    }

    #[test]
    fn invalid_geometry_rejected() {
        let mut c = ModelConfig::toy(10);
        c.d_model = 96;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(10);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(10);
        c.n_heads = 64; // head_dim 1 is odd
        assert!(c.validate().is_err());
        c.positional = Positional::AbsoluteLearned;
        assert!(c.validate().is_ok());
        let mut c = ModelConfig::toy(10);
        c.ffn_hidden = Some(100);
        assert!(c.validate().is_err());
    }

    #[test]
    fn section_round_trip() {
        let mut c = ModelConfig::toy(77);
        c.rope_scaling = Some(RopeScaling { factor: 4.0, original_max: 64 });
        c.ffn_hidden = Some(256);
        let mut doc = KvDoc::new();
        doc.push_section("model", c.to_rows());
        let mut sec = doc.take_section("model");
        let back = ModelConfig::from_section(&mut sec).unwrap();
        sec.finish().unwrap();
        assert_eq!(back, c);
    }
}
