use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The three independently tunable parts of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Vit,
    Jtm,
    Dec,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Vit, Component::Jtm, Component::Dec];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Vit => "vit",
            Component::Jtm => "jtm",
            Component::Dec => "dec",
        }
    }

    /// Component owning a parameter name, including `peft/<component>/...`
    /// adapter tensors.
    pub fn of_param(name: &str) -> Option<Component> {
        let mut parts = name.split('/');
        let first = parts.next()?;
        let key = if first == "peft" { parts.next()? } else { first };
        key.parse().ok()
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vit" => Ok(Component::Vit),
            "jtm" => Ok(Component::Jtm),
            "dec" | "decoder" => Ok(Component::Dec),
            other => Err(Error::Input(format!("unknown component `{other}`"))),
        }
    }
}

fn default_prefix_len() -> usize {
    16
}

fn default_prefix_hidden() -> usize {
    512
}

fn default_true() -> bool {
    true
}

fn default_seed() -> u64 {
    0
}

/// Architecture description. Field names double as the `[model]` section
/// keys of run config files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vit_layers: usize,
    pub jtm_layers: usize,
    pub dec_layers: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    #[serde(default)]
    pub tie_lm_head: bool,
    #[serde(default)]
    pub use_cls_token: bool,
    /// Upper bound on prefix length plus text length at any attention site.
    pub attention_budget: usize,
    /// Prefix length used when a plan says `Prefix` without a number.
    #[serde(default = "default_prefix_len")]
    pub prefix_len: usize,
    /// Hidden width of the prefix reparameterization network.
    #[serde(default = "default_prefix_hidden")]
    pub prefix_hidden: usize,
    /// Whether IA3 scales the keys and values of cross-attention layers
    /// as well as self-attention layers.
    #[serde(default = "default_true")]
    pub ia3_cross_attn: bool,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

/// Prefix length and reparameterization width solved so that a
/// decoder-only prefix on the paper-scale model trains 3.926% of all
/// parameters. See `crate::tuning::solve_prefix_hidden`.
pub const PAPER_PREFIX_LEN: usize = 16;
pub const PAPER_PREFIX_HIDDEN: usize = 766;

impl ModelConfig {
    /// ViT-base image encoder, BERT-base JTM encoder and text decoder.
    pub fn paper() -> Self {
        Self {
            hidden_dim: 768,
            num_heads: 12,
            ffn_dim: 3072,
            vit_layers: 12,
            jtm_layers: 12,
            dec_layers: 12,
            image_size: 480,
            patch_size: 16,
            vocab_size: 30522,
            max_text_len: 512,
            tie_lm_head: false,
            use_cls_token: true,
            attention_budget: 640,
            prefix_len: PAPER_PREFIX_LEN,
            prefix_hidden: PAPER_PREFIX_HIDDEN,
            ia3_cross_attn: true,
            seed: 0,
        }
    }

    /// Desk-scale model that trains end to end in seconds.
    pub fn toy() -> Self {
        Self {
            hidden_dim: 48,
            num_heads: 4,
            ffn_dim: 96,
            vit_layers: 2,
            jtm_layers: 2,
            dec_layers: 2,
            image_size: 32,
            patch_size: 8,
            vocab_size: crate::model::tokenizer::VOCAB_SIZE,
            max_text_len: 192,
            tie_lm_head: false,
            use_cls_token: false,
            attention_budget: 224,
            prefix_len: 4,
            prefix_hidden: 32,
            ia3_cross_attn: true,
            seed: 0,
        }
    }

    /// Smallest model that still exercises every code path; used by the
    /// finite-difference gradient check.
    pub fn micro() -> Self {
        Self {
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            vit_layers: 1,
            jtm_layers: 1,
            dec_layers: 1,
            image_size: 8,
            patch_size: 4,
            vocab_size: 32,
            max_text_len: 8,
            tie_lm_head: false,
            use_cls_token: true,
            attention_budget: 16,
            prefix_len: 2,
            prefix_hidden: 8,
            ia3_cross_attn: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.attention_budget < self.max_text_len {
            return Err(Error::Config(format!(
                "attention_budget {} is smaller than max_text_len {}",
                self.attention_budget, self.max_text_len
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    /// Length of the visual token sequence, including the class token.
    pub fn num_visual_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.use_cls_token)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn layers(&self, c: Component) -> usize {
        match c {
            Component::Vit => self.vit_layers,
            Component::Jtm => self.jtm_layers,
            Component::Dec => self.dec_layers,
        }
    }

    /// Names of fields whose values differ from `other`.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let a = toml::Value::try_from(self).expect("config serializes");
        let b = toml::Value::try_from(other).expect("config serializes");
        match (a, b) {
            (toml::Value::Table(a), toml::Value::Table(b)) => {
                let mut fields: Vec<String> = a
                    .iter()
                    .filter(|(k, v)| b.get(*k) != Some(*v))
                    .map(|(k, v)| {
                        let theirs = b.get(k).map(|x| x.to_string()).unwrap_or_default();
                        format!("{k} (checkpoint {theirs}, model {v})")
                    })
                    .collect();
                fields.sort();
                fields
            }
            _ => unreachable!("configs serialize to tables"),
        }
    }
}
