//! Image encoder, joint text-multimodal (JTM) encoder and causal text
//! decoder.
//!
//! Every parameter is registered in one [`ParamStore`] under a name whose
//! first path segment is the owning component (`vit/`, `jtm/`, `dec/`).
//! Adapter tensors live under `peft/<component>/...`. The decoder reads its
//! input embeddings from the JTM embedding tables.

pub mod config;
pub mod layers;
pub mod tokenizer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{Component, ModelConfig};
pub use layers::{Attention, AttentionKind, Block, FeedForward, LayerNorm, Linear, PrefixKv};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::peft::PrefixSource;
use crate::tensor::init::{Init, INIT_STD};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use crate::tuning::TuningPlan;
use layers::Builder;

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch_embed: Linear,
    pub cls_token: Option<ParamId>,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct JtmEncoder {
    pub word_embed: ParamId,
    pub pos_embed: ParamId,
    pub embed_norm: LayerNorm,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub prefix: Option<PrefixSource>,
}

#[derive(Clone, Debug)]
pub struct TextDecoder {
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    /// `None` when the head is tied to the JTM word embeddings.
    pub lm_head: Option<ParamId>,
    pub lm_bias: ParamId,
    pub prefix: Option<PrefixSource>,
}

/// The instantiated three-component model and its parameters.
#[derive(Clone, Debug)]
pub struct MileModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub vit: ImageEncoder,
    pub jtm: JtmEncoder,
    pub dec: TextDecoder,
    pub(crate) plan: Option<TuningPlan>,
}

impl<T: Scalar> MileModel<T> {
    /// Builds and initializes a model from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        Self::build(config, ParamStore::new())
    }

    /// Builds a shape-only model: every parameter is enumerable but nothing
    /// is allocated. Forward passes fail with [`Error::MetaTensor`].
    pub fn meta(config: ModelConfig) -> Result<Self> {
        Self::build(config, ParamStore::new_meta())
    }

    fn build(config: ModelConfig, mut store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let (d, h, f) = (config.hidden_dim, config.num_heads, config.ffn_dim);

        let vit = ImageEncoder {
            patch_embed: b.linear("vit/patch_embed", config.patch_dim(), d)?,
            cls_token: if config.use_cls_token {
                Some(b.param("vit/cls_token", &[1, d], Init::TruncNormal(INIT_STD))?)
            } else {
                None
            },
            pos_embed: b.param("vit/pos_embed", &[config.num_visual_tokens(), d], Init::TruncNormal(INIT_STD))?,
            blocks: (0..config.vit_layers)
                .map(|l| Block::build(&mut b, &format!("vit/layers/{l}"), AttentionKind::BiSelf, false, d, h, f))
                .collect::<Result<_>>()?,
            norm: b.layer_norm("vit/norm", d)?,
        };

        let jtm = JtmEncoder {
            word_embed: b.param("jtm/word_embed", &[config.vocab_size, d], Init::TruncNormal(INIT_STD))?,
            pos_embed: b.param("jtm/pos_embed", &[config.max_text_len, d], Init::TruncNormal(INIT_STD))?,
            embed_norm: b.layer_norm("jtm/embed_norm", d)?,
            blocks: (0..config.jtm_layers)
                .map(|l| Block::build(&mut b, &format!("jtm/layers/{l}"), AttentionKind::BiSelf, true, d, h, f))
                .collect::<Result<_>>()?,
            norm: b.layer_norm("jtm/norm", d)?,
            prefix: None,
        };

        let dec = TextDecoder {
            blocks: (0..config.dec_layers)
                .map(|l| {
                    Block::build(&mut b, &format!("dec/layers/{l}"), AttentionKind::CausalSelf, true, d, h, f)
                })
                .collect::<Result<_>>()?,
            norm: b.layer_norm("dec/norm", d)?,
            lm_head: if config.tie_lm_head {
                None
            } else {
                Some(b.param("dec/lm_head/weight", &[d, config.vocab_size], Init::TruncNormal(INIT_STD))?)
            },
            lm_bias: b.param("dec/lm_head/bias", &[config.vocab_size], Init::Zeros)?,
            prefix: None,
        };

        Ok(Self {
            config,
            params: store,
            vit,
            jtm,
            dec,
            plan: None,
        })
    }

    pub fn plan(&self) -> Option<&TuningPlan> {
        self.plan.as_ref()
    }

    pub fn blocks(&self, c: Component) -> &[Block] {
        match c {
            Component::Vit => &self.vit.blocks,
            Component::Jtm => &self.jtm.blocks,
            Component::Dec => &self.dec.blocks,
        }
    }

    pub fn blocks_mut(&mut self, c: Component) -> &mut Vec<Block> {
        match c {
            Component::Vit => &mut self.vit.blocks,
            Component::Jtm => &mut self.jtm.blocks,
            Component::Dec => &mut self.dec.blocks,
        }
    }

    pub(crate) fn prefix_slot(&mut self, c: Component) -> Option<&mut Option<PrefixSource>> {
        match c {
            Component::Vit => None,
            Component::Jtm => Some(&mut self.jtm.prefix),
            Component::Dec => Some(&mut self.dec.prefix),
        }
    }

    pub fn prefix(&self, c: Component) -> Option<&PrefixSource> {
        match c {
            Component::Vit => None,
            Component::Jtm => self.jtm.prefix.as_ref(),
            Component::Dec => self.dec.prefix.as_ref(),
        }
    }

    /// Names of parameters owned by `c`, adapters included.
    pub fn component_params(&self, c: Component) -> Vec<&str> {
        self.params
            .iter()
            .filter(|(_, n, _)| Component::of_param(n) == Some(c))
            .map(|(_, n, _)| n)
            .collect()
    }

    fn prefix_kv(&self, g: &mut Graph<T>, c: Component, text_len: usize) -> Result<Option<Vec<PrefixKv>>> {
        let Some(src) = self.prefix(c) else {
            return Ok(None);
        };
        if src.len() + text_len > self.config.attention_budget {
            return Err(Error::Config(format!(
                "prefix length {} plus text length {text_len} exceeds attention budget {}",
                src.len(),
                self.config.attention_budget
            )));
        }
        src.key_values(g, &self.params, self.config.hidden_dim)
    }

    /// Splits `pixels[H×W×3]` into non-overlapping patches, one row each,
    /// features ordered (row, column, channel) within the patch.
    pub fn patchify(&self, pixels: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.config.image_size;
        if pixels.shape() != [s, s, 3] {
            return Err(Error::Shape {
                op: "encode_image",
                lhs: pixels.shape().to_vec(),
                rhs: vec![s, s, 3],
            });
        }
        let p = self.config.patch_size;
        let per_side = s / p;
        let px = pixels.data();
        let mut rows = Vec::with_capacity(s * s * 3);
        for py in 0..per_side {
            for pxi in 0..per_side {
                for y in 0..p {
                    let start = ((py * p + y) * s + pxi * p) * 3;
                    rows.extend_from_slice(&px[start..start + p * 3]);
                }
            }
        }
        Tensor::new(vec![per_side * per_side, p * p * 3], rows)
    }

    /// Visual tokens `[N×d]` for one image.
    pub fn encode_image(&self, g: &mut Graph<T>, pixels: &Tensor<T>) -> Result<Var> {
        let patches = self.patchify(pixels)?;
        let ps = &self.params;
        let x = g.input(&patches);
        let mut x = self.vit.patch_embed.forward(g, ps, x)?;
        if let Some(cls) = self.vit.cls_token {
            let cls = g.param(ps, cls)?;
            x = g.concat_rows(&[cls, x])?;
        }
        let pos = g.param(ps, self.vit.pos_embed)?;
        let mut x = g.add(x, pos)?;
        for block in &self.vit.blocks {
            x = block.forward(g, ps, x, None, None, false)?;
        }
        self.vit.norm.forward(g, ps, x)
    }

    fn embed_text(&self, g: &mut Graph<T>, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_text_len {
            return Err(Error::Input(format!(
                "{} tokens exceed max_text_len {}",
                tokens.len(),
                self.config.max_text_len
            )));
        }
        let ps = &self.params;
        let word = g.param(ps, self.jtm.word_embed)?;
        let pos = g.param(ps, self.jtm.pos_embed)?;
        let x = g.embedding(word, tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let p = g.embedding(pos, &positions)?;
        let x = g.add(x, p)?;
        self.jtm.embed_norm.forward(g, ps, x)
    }

    fn run_jtm(&self, g: &mut Graph<T>, tokens: &[usize], visual: Option<Var>) -> Result<Var> {
        let mut x = self.embed_text(g, tokens)?;
        let prefix = self.prefix_kv(g, Component::Jtm, tokens.len())?;
        for (l, block) in self.jtm.blocks.iter().enumerate() {
            let pk = prefix.as_ref().map(|p| p[l]);
            x = block.forward(g, &self.params, x, visual, pk, visual.is_none())?;
        }
        self.jtm.norm.forward(g, &self.params, x)
    }

    /// Fused text-image features `[L×d]`.
    pub fn encode_jtm(&self, g: &mut Graph<T>, tokens: &[usize], visual: Var) -> Result<Var> {
        self.run_jtm(g, tokens, Some(visual))
    }

    /// The JTM encoder with every cross-attention layer skipped.
    pub fn encode_text_only(&self, g: &mut Graph<T>, tokens: &[usize]) -> Result<Var> {
        self.run_jtm(g, tokens, None)
    }

    /// Next-token logits `[T×V]` for decoder inputs `tokens`; row `t`
    /// depends only on `tokens[..=t]`.
    pub fn decode_text(&self, g: &mut Graph<T>, fused: Var, tokens: &[usize]) -> Result<Var> {
        let ps = &self.params;
        let mut x = self.embed_text(g, tokens)?;
        let prefix = self.prefix_kv(g, Component::Dec, tokens.len())?;
        for (l, block) in self.dec.blocks.iter().enumerate() {
            let pk = prefix.as_ref().map(|p| p[l]);
            x = block.forward(g, ps, x, Some(fused), pk, false)?;
        }
        let x = self.dec.norm.forward(g, ps, x)?;
        let logits = match self.dec.lm_head {
            Some(w) => {
                let w = g.param(ps, w)?;
                g.matmul(x, w)?
            }
            None => {
                let emb = g.param(ps, self.jtm.word_embed)?;
                g.matmul_t(x, emb)?
            }
        };
        let bias = g.param(ps, self.dec.lm_bias)?;
        g.add_row(logits, bias)
    }

    /// Language-modeling loss of `answer` given the image and question.
    /// The decoder sees `[BOS, answer..]` and is scored on `[answer.., EOS]`.
    pub fn forward_lm_loss(
        &self,
        g: &mut Graph<T>,
        pixels: &Tensor<T>,
        question: &[usize],
        answer: &[usize],
    ) -> Result<Var> {
        let visual = self.encode_image(g, pixels)?;
        let fused = self.encode_jtm(g, question, visual)?;
        let mut inputs = Vec::with_capacity(answer.len() + 1);
        inputs.push(tokenizer::BOS);
        inputs.extend_from_slice(answer);
        let mut targets = answer.to_vec();
        targets.push(tokenizer::EOS);
        let logits = self.decode_text(g, fused, &inputs)?;
        let scored = vec![true; targets.len()];
        g.cross_entropy(logits, &targets, &scored)
    }

    /// Greedy decoding from `BOS`. Returns at most `max_len` tokens and
    /// stops after emitting `EOS`.
    pub fn generate(&self, pixels: &Tensor<T>, question: &[usize], max_len: usize) -> Result<Vec<usize>> {
        if max_len == 0 {
            return Err(Error::Input("max_len must be at least 1".into()));
        }
        let mut out = Vec::new();
        let mut inputs = vec![tokenizer::BOS];
        let budget = self.config.max_text_len;
        for _ in 0..max_len {
            let mut g = Graph::new();
            let visual = self.encode_image(&mut g, pixels)?;
            let fused = self.encode_jtm(&mut g, question, visual)?;
            let logits = self.decode_text(&mut g, fused, &inputs)?;
            let v = self.config.vocab_size;
            let last = &g.value(logits)[(inputs.len() - 1) * v..];
            let next = argmax(last);
            out.push(next);
            if next == tokenizer::EOS || inputs.len() >= budget {
                break;
            }
            inputs.push(next);
        }
        Ok(out)
    }
}

/// First index of the maximum; NaNs never win.
fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] || xs[best].is_nan() {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_image_encoding_shape() {
        let m = MileModel::<f32>::new(ModelConfig::toy()).unwrap();
        let img = Tensor::zeros(vec![32, 32, 3]);
        let mut g = Graph::new();
        let v = m.encode_image(&mut g, &img).unwrap();
        assert_eq!(g.shape(v), &[16, m.config.hidden_dim]);
    }

    #[test]
    fn wrong_image_size_is_a_shape_error() {
        let m = MileModel::<f32>::new(ModelConfig::toy()).unwrap();
        let mut g = Graph::new();
        let err = m.encode_image(&mut g, &Tensor::zeros(vec![16, 16, 3]));
        assert!(matches!(err, Err(Error::Shape { .. })));
    }

    #[test]
    fn empty_question_is_rejected() {
        let m = MileModel::<f32>::new(ModelConfig::toy()).unwrap();
        let mut g = Graph::new();
        let v = m.encode_image(&mut g, &Tensor::zeros(vec![32, 32, 3])).unwrap();
        assert!(matches!(m.encode_jtm(&mut g, &[], v), Err(Error::Input(_))));
    }

    #[test]
    fn meta_model_refuses_forward() {
        let m = MileModel::<f32>::meta(ModelConfig::toy()).unwrap();
        let mut g = Graph::new();
        assert!(matches!(
            m.encode_image(&mut g, &Tensor::zeros(vec![32, 32, 3])),
            Err(Error::MetaTensor(_))
        ));
    }

    #[test]
    fn components_partition_parameters() {
        let m = MileModel::<f32>::meta(ModelConfig::paper()).unwrap();
        let total: usize = Component::ALL.iter().map(|&c| m.component_params(c).len()).sum();
        assert_eq!(total, m.params.len());
    }

    #[test]
    fn patchify_orders_patches_row_major() {
        let mut cfg = ModelConfig::micro();
        cfg.image_size = 4;
        cfg.patch_size = 2;
        let m = MileModel::<f64>::new(cfg).unwrap();
        let px: Vec<f64> = (0..48).map(f64::from).collect();
        let p = m.patchify(&Tensor::from_f64(vec![4, 4, 3], &px).unwrap()).unwrap();
        assert_eq!(p.shape(), &[4, 12]);
        // second patch starts at pixel (0, 2)
        assert_eq!(p.data()[12], 6.0);
        // its second row starts at pixel (1, 2)
        assert_eq!(p.data()[18], 18.0);
    }
}
