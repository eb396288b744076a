use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::peft::{Ia3Attention, LoraUnit};
use crate::tensor::init::{Init, INIT_STD};
use crate::tensor::{CausalMask, Graph, Scalar, Var};

/// Registers parameters under a name prefix.
pub(crate) struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        self.store.create(name, shape, init, self.rng)
    }

    pub fn linear(&mut self, name: &str, in_dim: usize, out_dim: usize) -> Result<Linear> {
        Ok(Linear {
            weight: self.param(&format!("{name}/weight"), &[in_dim, out_dim], Init::TruncNormal(INIT_STD))?,
            bias: self.param(&format!("{name}/bias"), &[out_dim], Init::Zeros)?,
        })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gain: self.param(&format!("{name}/gain"), &[dim], Init::Ones)?,
            bias: self.param(&format!("{name}/bias"), &[dim], Init::Zeros)?,
        })
    }
}

/// `y = x · W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight)?;
        let b = g.param(ps, self.bias)?;
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(ps, self.gain)?;
        let bias = g.param(ps, self.bias)?;
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    BiSelf,
    CausalSelf,
    Cross,
}

impl AttentionKind {
    pub fn site_name(self) -> &'static str {
        match self {
            AttentionKind::BiSelf | AttentionKind::CausalSelf => "self_attn",
            AttentionKind::Cross => "cross_attn",
        }
    }
}

/// Key/value rows prepended at a self-attention site.
#[derive(Clone, Copy, Debug)]
pub struct PrefixKv {
    pub keys: Var,
    pub values: Var,
}

/// Pre-norm multi-head attention sub-block with its residual connection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub kind: AttentionKind,
    pub norm: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub num_heads: usize,
    pub lora_q: Option<LoraUnit>,
    pub lora_k: Option<LoraUnit>,
    pub ia3: Option<Ia3Attention>,
}

impl Attention {
    pub(crate) fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        kind: AttentionKind,
        dim: usize,
        num_heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            kind,
            norm: b.layer_norm(&format!("{name}/norm"), dim)?,
            q: b.linear(&format!("{name}/q"), dim, dim)?,
            k: b.linear(&format!("{name}/k"), dim, dim)?,
            v: b.linear(&format!("{name}/v"), dim, dim)?,
            o: b.linear(&format!("{name}/o"), dim, dim)?,
            num_heads,
            lora_q: None,
            lora_k: None,
            ia3: None,
        })
    }

    fn project<T: Scalar>(
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        lin: &Linear,
        lora: Option<&LoraUnit>,
        x: Var,
    ) -> Result<Var> {
        let base = lin.forward(g, ps, x)?;
        match lora {
            Some(unit) => {
                let delta = unit.forward(g, ps, x)?;
                g.add(base, delta)
            }
            None => Ok(base),
        }
    }

    /// Attention output before the output projection. Exposed so tests can
    /// observe the effect of value scaling.
    pub fn attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        context: Option<Var>,
        prefix: Option<PrefixKv>,
    ) -> Result<Var> {
        let h = self.norm.forward(g, ps, x)?;
        let kv_src = match self.kind {
            AttentionKind::Cross => {
                context.ok_or_else(|| Error::Input("cross-attention needs a context".into()))?
            }
            _ => h,
        };
        let q = Self::project(g, ps, &self.q, self.lora_q.as_ref(), h)?;
        let mut k = Self::project(g, ps, &self.k, self.lora_k.as_ref(), kv_src)?;
        let mut v = self.v.forward(g, ps, kv_src)?;
        if let Some(ia3) = &self.ia3 {
            let lk = g.param(ps, ia3.l_k)?;
            let lv = g.param(ps, ia3.l_v)?;
            k = g.mul_row(k, lk)?;
            v = g.mul_row(v, lv)?;
        }
        let mut prefix_len = 0;
        if let Some(p) = prefix {
            prefix_len = g.shape(p.keys)[0];
            k = g.concat_rows(&[p.keys, k])?;
            v = g.concat_rows(&[p.values, v])?;
        }
        let mask = (self.kind == AttentionKind::CausalSelf).then_some(CausalMask { offset: prefix_len });

        let dim = g.shape(q)[1];
        let hd = dim / self.num_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.num_heads);
        for head in 0..self.num_heads {
            let qh = g.slice_cols(q, head * hd, hd)?;
            let kh = g.slice_cols(k, head * hd, hd)?;
            let vh = g.slice_cols(v, head * hd, hd)?;
            let scores = g.matmul_t(qh, kh)?;
            let scores = g.scale(scores, scale);
            let probs = g.softmax_masked(scores, mask)?;
            heads.push(g.matmul(probs, vh)?);
        }
        g.concat_cols(&heads)
    }

    /// `x + O(attention(LN(x)))`
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        context: Option<Var>,
        prefix: Option<PrefixKv>,
    ) -> Result<Var> {
        let attn = self.attend(g, ps, x, context, prefix)?;
        let out = self.o.forward(g, ps, attn)?;
        g.add(x, out)
    }
}

/// Pre-norm feed-forward sub-block with its residual connection.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub ia3_ff: Option<ParamId>,
}

impl FeedForward {
    pub(crate) fn build<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize, ffn: usize) -> Result<Self> {
        Ok(Self {
            norm: b.layer_norm(&format!("{name}/norm"), dim)?,
            fc1: b.linear(&format!("{name}/fc1"), dim, ffn)?,
            fc2: b.linear(&format!("{name}/fc2"), ffn, dim)?,
            ia3_ff: None,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.norm.forward(g, ps, x)?;
        let h = self.fc1.forward(g, ps, h)?;
        let mut h = g.gelu(h);
        if let Some(l_ff) = self.ia3_ff {
            let l = g.param(ps, l_ff)?;
            h = g.mul_row(h, l)?;
        }
        let h = self.fc2.forward(g, ps, h)?;
        g.add(x, h)
    }
}

/// One transformer layer: self-attention, optional cross-attention, FFN.
#[derive(Clone, Debug)]
pub struct Block {
    pub self_attn: Attention,
    pub cross_attn: Option<Attention>,
    pub ffn: FeedForward,
}

impl Block {
    pub(crate) fn build<T: Scalar>(
        b: &mut Builder<'_, T>,
        name: &str,
        self_kind: AttentionKind,
        with_cross: bool,
        dim: usize,
        heads: usize,
        ffn: usize,
    ) -> Result<Self> {
        let self_attn = Attention::build(b, &format!("{name}/self_attn"), self_kind, dim, heads)?;
        let cross_attn = if with_cross {
            Some(Attention::build(
                b,
                &format!("{name}/cross_attn"),
                AttentionKind::Cross,
                dim,
                heads,
            )?)
        } else {
            None
        };
        let ffn = FeedForward::build(b, &format!("{name}/ffn"), dim, ffn)?;
        Ok(Self {
            self_attn,
            cross_attn,
            ffn,
        })
    }

    pub fn attentions(&self) -> impl Iterator<Item = &Attention> {
        std::iter::once(&self.self_attn).chain(self.cross_attn.as_ref())
    }

    pub fn attentions_mut(&mut self) -> impl Iterator<Item = &mut Attention> {
        std::iter::once(&mut self.self_attn).chain(self.cross_attn.as_mut())
    }

    /// `skip_cross` runs the text-only path through a cross-attention layer.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        x: Var,
        context: Option<Var>,
        prefix: Option<PrefixKv>,
        skip_cross: bool,
    ) -> Result<Var> {
        let mut x = self.self_attn.forward(g, ps, x, None, prefix)?;
        if let (Some(cross), false) = (&self.cross_attn, skip_cross) {
            x = cross.forward(g, ps, x, context, None)?;
        }
        self.ffn.forward(g, ps, x)
    }
}
