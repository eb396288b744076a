//! Attachable parameter-efficient adapters: LoRA, IA3, prefix tuning and
//! P-Tuning v2.
//!
//! Adapters never modify base weights. Their tensors are registered under
//! `peft/<component>/<layer>/<unit>/<param>` (`<layer>` is `all` for the
//! component-wide prefix units) and start trainable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::layers::{AttentionKind, Builder, Linear, PrefixKv};
use crate::model::{Component, MileModel};
use crate::params::{ParamId, ParamStore};
use crate::tensor::init::{Init, INIT_STD};
use crate::tensor::{Graph, Scalar, Var};

pub const PEFT_PREFIX: &str = "peft/";

/// Low-rank update `x · A · B` added to a query or key projection.
#[derive(Clone, Debug)]
pub struct LoraUnit {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
}

impl LoraUnit {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamStore<T>, x: Var) -> Result<Var> {
        let a = g.param(ps, self.a)?;
        let b = g.param(ps, self.b)?;
        let h = g.matmul(x, a)?;
        g.matmul(h, b)
    }
}

/// IA3 key and value rescaling vectors of one attention site.
#[derive(Clone, Debug)]
pub struct Ia3Attention {
    pub l_k: ParamId,
    pub l_v: ParamId,
}

/// Prefix-tuning unit: a `P × d` source table mapped through a two-layer
/// tanh network to every layer's key/value prefix.
#[derive(Clone, Debug)]
pub struct PrefixUnit {
    pub len: usize,
    pub layers: usize,
    pub hidden: usize,
    pub embedding: Option<ParamId>,
    pub mlp: Option<(Linear, Linear)>,
}

/// P-Tuning v2 unit: one `P × (layers·2·d)` matrix sliced per layer.
#[derive(Clone, Debug)]
pub struct Ptv2Unit {
    pub len: usize,
    pub layers: usize,
    pub matrix: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub enum PrefixSource {
    Prefix(PrefixUnit),
    Ptv2(Ptv2Unit),
}

/// Splits `[P × layers·2·d]` into per-layer key and value blocks.
fn slice_layers<T: Scalar>(g: &mut Graph<T>, all: Var, layers: usize, dim: usize) -> Result<Vec<PrefixKv>> {
    (0..layers)
        .map(|l| {
            Ok(PrefixKv {
                keys: g.slice_cols(all, l * 2 * dim, dim)?,
                values: g.slice_cols(all, l * 2 * dim + dim, dim)?,
            })
        })
        .collect()
}

impl PrefixSource {
    pub fn len(&self) -> usize {
        match self {
            PrefixSource::Prefix(u) => u.len,
            PrefixSource::Ptv2(u) => u.len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> &'static str {
        match self {
            PrefixSource::Prefix(_) => "prefix",
            PrefixSource::Ptv2(_) => "ptv2",
        }
    }

    fn params(&self) -> Vec<ParamId> {
        match self {
            PrefixSource::Prefix(u) => {
                let mut ids: Vec<ParamId> = u.embedding.into_iter().collect();
                if let Some((a, b)) = &u.mlp {
                    ids.extend([a.weight, a.bias, b.weight, b.bias]);
                }
                ids
            }
            PrefixSource::Ptv2(u) => u.matrix.into_iter().collect(),
        }
    }

    /// Per-layer key/value prefixes, or `None` for an empty prefix.
    pub fn key_values<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore<T>,
        dim: usize,
    ) -> Result<Option<Vec<PrefixKv>>> {
        match self {
            PrefixSource::Prefix(u) => {
                let (Some(emb), Some((w1, w2))) = (u.embedding, &u.mlp) else {
                    return Ok(None);
                };
                let e = g.param(ps, emb)?;
                let h = w1.forward(g, ps, e)?;
                let h = g.tanh(h);
                let all = w2.forward(g, ps, h)?;
                slice_layers(g, all, u.layers, dim).map(Some)
            }
            PrefixSource::Ptv2(u) => {
                let Some(m) = u.matrix else { return Ok(None) };
                let all = g.param(ps, m)?;
                slice_layers(g, all, u.layers, dim).map(Some)
            }
        }
    }
}

/// Closed-form trainable counts for each adapter kind.
pub mod count {
    /// LoRA on query and key of `sites` attention layers.
    pub fn lora(sites: usize, dim: usize, rank: usize) -> usize {
        sites * 2 * 2 * dim * rank
    }

    pub fn ia3(attention_sites: usize, ffn_sites: usize, dim: usize, ffn_dim: usize) -> usize {
        attention_sites * 2 * dim + ffn_sites * ffn_dim
    }

    pub fn ptv2(len: usize, layers: usize, dim: usize) -> usize {
        len * layers * 2 * dim
    }

    /// Source table plus `d → hidden → layers·2·d` network with biases.
    pub fn prefix(len: usize, layers: usize, dim: usize, hidden: usize) -> usize {
        if len == 0 {
            return 0;
        }
        let out = layers * 2 * dim;
        len * dim + dim * hidden + hidden + hidden * out + out
    }
}

fn adapter_rng(seed: u64, c: Component, kind: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + kind * 4 + c as u64);
    rng
}

impl<T: Scalar> MileModel<T> {
    /// Adds LoRA units on the query and key projections of every attention
    /// layer of `c`. `B` starts at zero so outputs are unchanged.
    pub fn attach_lora(&mut self, c: Component, rank: usize) -> Result<()> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if self.blocks(c).iter().flat_map(|b| b.attentions()).any(|a| a.lora_q.is_some()) {
            return Err(Error::DoubleAttach {
                kind: "LoRA",
                component: c.to_string(),
            });
        }
        let d = self.config.hidden_dim;
        let mut rng = adapter_rng(self.config.seed, c, 0);
        let mut blocks = std::mem::take(self.blocks_mut(c));
        let mut b = Builder {
            store: &mut self.params,
            rng: &mut rng,
        };
        for (l, block) in blocks.iter_mut().enumerate() {
            for attn in block.attentions_mut() {
                let site = attn.kind.site_name();
                let mut unit = |which: &str| -> Result<LoraUnit> {
                    let base = format!("{PEFT_PREFIX}{c}/{l}/{site}.lora_{which}");
                    Ok(LoraUnit {
                        a: b.param(&format!("{base}/a"), &[d, rank], Init::Normal(INIT_STD))?,
                        b: b.param(&format!("{base}/b"), &[rank, d], Init::Zeros)?,
                        rank,
                    })
                };
                attn.lora_q = Some(unit("q")?);
                attn.lora_k = Some(unit("k")?);
            }
        }
        *self.blocks_mut(c) = blocks;
        Ok(())
    }

    /// Folds every LoRA unit of `c` into its base weight (`W ← W + A·B`)
    /// and removes the unit. Returns the number of merged projections.
    pub fn merge_lora(&mut self, c: Component) -> Result<usize> {
        let mut merged = 0;
        let mut blocks = std::mem::take(self.blocks_mut(c));
        let result = (|| {
            for block in blocks.iter_mut() {
                for attn in block.attentions_mut() {
                    for (unit, lin) in [(attn.lora_q.take(), &attn.q), (attn.lora_k.take(), &attn.k)] {
                        let Some(unit) = unit else { continue };
                        merge_into(&mut self.params, lin.weight, &unit)?;
                        self.params.remove(unit.a);
                        self.params.remove(unit.b);
                        merged += 1;
                    }
                }
            }
            Ok::<_, Error>(())
        })();
        *self.blocks_mut(c) = blocks;
        result?;
        if merged == 0 {
            eprintln!("warning: merge_lora({c}): no LoRA units attached, nothing merged");
        }
        Ok(merged)
    }

    /// Adds IA3 vectors (all ones) to every attention and feed-forward site
    /// of `c`.
    pub fn attach_ia3(&mut self, c: Component) -> Result<()> {
        if self.blocks(c).iter().any(|b| b.ffn.ia3_ff.is_some()) {
            return Err(Error::DoubleAttach {
                kind: "IA3",
                component: c.to_string(),
            });
        }
        let (d, f) = (self.config.hidden_dim, self.config.ffn_dim);
        let cross = self.config.ia3_cross_attn;
        let mut rng = adapter_rng(self.config.seed, c, 1);
        let mut blocks = std::mem::take(self.blocks_mut(c));
        let mut b = Builder {
            store: &mut self.params,
            rng: &mut rng,
        };
        for (l, block) in blocks.iter_mut().enumerate() {
            for attn in block.attentions_mut() {
                if attn.kind == AttentionKind::Cross && !cross {
                    continue;
                }
                let base = format!("{PEFT_PREFIX}{c}/{l}/{}.ia3", attn.kind.site_name());
                attn.ia3 = Some(Ia3Attention {
                    l_k: b.param(&format!("{base}/l_k"), &[d], Init::Ones)?,
                    l_v: b.param(&format!("{base}/l_v"), &[d], Init::Ones)?,
                });
            }
            block.ffn.ia3_ff = Some(b.param(&format!("{PEFT_PREFIX}{c}/{l}/ffn.ia3/l_ff"), &[f], Init::Ones)?);
        }
        *self.blocks_mut(c) = blocks;
        Ok(())
    }

    fn check_prefix_target(&mut self, c: Component, len: usize, kind: &'static str) -> Result<()> {
        if len > self.config.attention_budget {
            return Err(Error::Config(format!(
                "{kind} length {len} exceeds attention budget {}",
                self.config.attention_budget
            )));
        }
        match self.prefix_slot(c) {
            None => Err(Error::Plan(format!("{kind} cannot be attached to the image encoder"))),
            Some(Some(_)) => Err(Error::DoubleAttach {
                kind,
                component: c.to_string(),
            }),
            Some(None) => Ok(()),
        }
    }

    /// Prepends `len` reparameterized key/value rows at every
    /// self-attention layer of `c`. `len = 0` attaches an empty unit.
    pub fn attach_prefix(&mut self, c: Component, len: usize) -> Result<()> {
        self.check_prefix_target(c, len, "prefix")?;
        let (d, hidden) = (self.config.hidden_dim, self.config.prefix_hidden);
        let layers = self.config.layers(c);
        let mut unit = PrefixUnit {
            len,
            layers,
            hidden,
            embedding: None,
            mlp: None,
        };
        if len > 0 {
            let mut rng = adapter_rng(self.config.seed, c, 2);
            let mut b = Builder {
                store: &mut self.params,
                rng: &mut rng,
            };
            let base = format!("{PEFT_PREFIX}{c}/all/prefix");
            unit.embedding = Some(b.param(&format!("{base}/embedding"), &[len, d], Init::TruncNormal(INIT_STD))?);
            unit.mlp = Some((
                b.linear(&format!("{base}/mlp1"), d, hidden)?,
                b.linear(&format!("{base}/mlp2"), hidden, layers * 2 * d)?,
            ));
        }
        *self.prefix_slot(c).expect("checked") = Some(PrefixSource::Prefix(unit));
        Ok(())
    }

    /// Prepends `len` key/value rows sliced from one shared trainable
    /// matrix at every self-attention layer of `c`.
    pub fn attach_ptv2(&mut self, c: Component, len: usize) -> Result<()> {
        self.check_prefix_target(c, len, "ptv2")?;
        let d = self.config.hidden_dim;
        let layers = self.config.layers(c);
        let matrix = if len > 0 {
            let mut rng = adapter_rng(self.config.seed, c, 3);
            let name = format!("{PEFT_PREFIX}{c}/all/ptv2/matrix");
            Some(
                self.params
                    .create(name, &[len, layers * 2 * d], Init::TruncNormal(INIT_STD), &mut rng)?,
            )
        } else {
            None
        };
        *self.prefix_slot(c).expect("checked") = Some(PrefixSource::Ptv2(Ptv2Unit { len, layers, matrix }));
        Ok(())
    }

    /// Removes every adapter from `c` without merging. Returns the number
    /// of tensors dropped.
    pub fn detach_adapters(&mut self, c: Component) -> usize {
        let mut ids = Vec::new();
        for block in self.blocks_mut(c) {
            for attn in block.attentions_mut() {
                for unit in [attn.lora_q.take(), attn.lora_k.take()].into_iter().flatten() {
                    ids.extend([unit.a, unit.b]);
                }
                if let Some(ia3) = attn.ia3.take() {
                    ids.extend([ia3.l_k, ia3.l_v]);
                }
            }
            ids.extend(block.ffn.ia3_ff.take());
        }
        if let Some(slot) = self.prefix_slot(c) {
            if let Some(src) = slot.take() {
                ids.extend(src.params());
            }
        }
        ids.into_iter().filter(|&id| self.params.remove(id).is_some()).count()
    }
}

fn merge_into<T: Scalar>(ps: &mut ParamStore<T>, weight: ParamId, unit: &LoraUnit) -> Result<()> {
    let a = ps.tensor(unit.a).clone();
    let b = ps.tensor(unit.b).clone();
    if a.is_meta() || b.is_meta() {
        return Err(Error::MetaTensor(ps.name(unit.a).to_string()));
    }
    let (d, r) = (a.shape()[0], a.shape()[1]);
    let out = b.shape()[1];
    let w = ps.tensor_mut(weight);
    let wd = w.data_mut();
    for i in 0..d {
        for k in 0..r {
            let av = a.data()[i * r + k];
            if av == T::zero() {
                continue;
            }
            for j in 0..out {
                wd[i * out + j] = wd[i * out + j] + av * b.data()[k * out + j];
            }
        }
    }
    Ok(())
}
