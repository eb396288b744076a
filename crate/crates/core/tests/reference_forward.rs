//! Compares the graph forward pass against a naive row-by-row
//! implementation that reads every weight by name.

mod common;

use common::{perturb_adapters, rng, small_config, Input};
use mile_core::tuning::apply_plan;
use mile_core::{MileModel, ModelConfig, TuningPlan};

type Mat = Vec<Vec<f64>>;

struct Ref<'a> {
    m: &'a MileModel<f64>,
}

impl Ref<'_> {
    fn w(&self, name: &str) -> Option<Vec<f64>> {
        self.m.params.get(name).map(|t| t.data().to_vec())
    }

    fn get(&self, name: &str) -> Vec<f64> {
        self.w(name).unwrap_or_else(|| panic!("missing {name}"))
    }

    fn mat(&self, name: &str) -> Mat {
        let t = self.m.params.get(name).unwrap_or_else(|| panic!("missing {name}"));
        let cols = *t.shape().last().unwrap();
        t.data().chunks(cols).map(|r| r.to_vec()).collect()
    }

    fn linear(&self, x: &Mat, name: &str) -> Mat {
        let w = self.mat(&format!("{name}/weight"));
        let b = self.get(&format!("{name}/bias"));
        let mut y = matmul(x, &w);
        for row in &mut y {
            for (v, bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        y
    }

    fn ln(&self, x: &Mat, name: &str) -> Mat {
        let g = self.get(&format!("{name}/gain"));
        let b = self.get(&format!("{name}/bias"));
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mean) / (var + 1e-6).sqrt() * g[j] + b[j])
                    .collect()
            })
            .collect()
    }

    /// Base projection plus the LoRA delta when one is attached.
    fn project(&self, x: &Mat, site: &str, lora: &str, which: &str) -> Mat {
        let mut y = self.linear(x, &format!("{site}/{which}"));
        if self.m.params.get(&format!("{lora}.lora_{which}/a")).is_some() {
            let a = self.mat(&format!("{lora}.lora_{which}/a"));
            let b = self.mat(&format!("{lora}.lora_{which}/b"));
            y = add(&y, &matmul(&matmul(x, &a), &b));
        }
        y
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        x: &Mat,
        comp: &str,
        layer: usize,
        site: &str,
        context: Option<&Mat>,
        causal: bool,
        prefix: Option<&(Mat, Mat)>,
    ) -> Mat {
        let name = format!("{comp}/layers/{layer}/{site}");
        let adapter = format!("peft/{comp}/{layer}/{site}");
        let h = self.ln(x, &format!("{name}/norm"));
        let src = context.unwrap_or(&h);
        let q = self.project(&h, &name, &adapter, "q");
        let mut k = self.project(src, &name, &adapter, "k");
        let mut v = self.linear(src, &format!("{name}/v"));
        if let Some(lk) = self.w(&format!("{adapter}.ia3/l_k")) {
            let lv = self.get(&format!("{adapter}.ia3/l_v"));
            k = scale_cols(&k, &lk);
            v = scale_cols(&v, &lv);
        }
        let mut p = 0;
        if let Some((pk, pv)) = prefix {
            p = pk.len();
            k = pk.iter().chain(&k).cloned().collect();
            v = pv.iter().chain(&v).cloned().collect();
        }
        let heads = self.m.config.num_heads;
        let hd = q[0].len() / heads;
        let mut out = vec![vec![0.0; q[0].len()]; q.len()];
        for hh in 0..heads {
            let cols = hh * hd..(hh + 1) * hd;
            for (i, qi) in q.iter().enumerate() {
                let visible = if causal { p + i + 1 } else { k.len() };
                let scores: Vec<f64> = (0..visible)
                    .map(|j| {
                        cols.clone().map(|c| qi[c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in cols.clone() {
                    out[i][c] = (0..visible).map(|j| e[j] / z * v[j][c]).sum();
                }
            }
        }
        add(x, &self.linear(&out, &format!("{name}/o")))
    }

    fn ffn(&self, x: &Mat, comp: &str, layer: usize) -> Mat {
        let name = format!("{comp}/layers/{layer}/ffn");
        let h = self.ln(x, &format!("{name}/norm"));
        let mut h = self.linear(&h, &format!("{name}/fc1"));
        for row in &mut h {
            for v in row.iter_mut() {
                *v = 0.5 * *v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (*v + 0.044715 * v.powi(3))).tanh());
            }
        }
        if let Some(l) = self.w(&format!("peft/{comp}/{layer}/ffn.ia3/l_ff")) {
            h = scale_cols(&h, &l);
        }
        add(x, &self.linear(&h, &format!("{name}/fc2")))
    }

    /// Per-layer (keys, values) of the prefix attached to `comp`, if any.
    fn prefixes(&self, comp: &str, layers: usize) -> Option<Vec<(Mat, Mat)>> {
        let d = self.m.config.hidden_dim;
        let all = if self.w(&format!("peft/{comp}/all/ptv2/matrix")).is_some() {
            self.mat(&format!("peft/{comp}/all/ptv2/matrix"))
        } else if self.w(&format!("peft/{comp}/all/prefix/embedding")).is_some() {
            let e = self.mat(&format!("peft/{comp}/all/prefix/embedding"));
            let h = self.linear(&e, &format!("peft/{comp}/all/prefix/mlp1"));
            let h: Mat = h.iter().map(|r| r.iter().map(|v| v.tanh()).collect()).collect();
            self.linear(&h, &format!("peft/{comp}/all/prefix/mlp2"))
        } else {
            return None;
        };
        Some(
            (0..layers)
                .map(|l| {
                    let cut = |off: usize| all.iter().map(|r| r[off..off + d].to_vec()).collect::<Mat>();
                    (cut(l * 2 * d), cut(l * 2 * d + d))
                })
                .collect(),
        )
    }

    fn embed(&self, tokens: &[usize]) -> Mat {
        let word = self.mat("jtm/word_embed");
        let pos = self.mat("jtm/pos_embed");
        let x: Mat = tokens.iter().enumerate().map(|(i, &t)| add_row(&word[t], &pos[i])).collect();
        self.ln(&x, "jtm/embed_norm")
    }

    fn image(&self, pixels: &[f64]) -> Mat {
        let c = &self.m.config;
        let (s, p) = (c.image_size, c.patch_size);
        let mut patches = Vec::new();
        for py in 0..s / p {
            for px in 0..s / p {
                let mut row = Vec::new();
                for y in 0..p {
                    for x in 0..p {
                        for ch in 0..3 {
                            row.push(pixels[((py * p + y) * s + px * p + x) * 3 + ch]);
                        }
                    }
                }
                patches.push(row);
            }
        }
        let mut x = self.linear(&patches, "vit/patch_embed");
        if c.use_cls_token {
            x.insert(0, self.get("vit/cls_token"));
        }
        let pos = self.mat("vit/pos_embed");
        x = x.iter().zip(&pos).map(|(a, b)| add_row(a, b)).collect();
        for l in 0..c.vit_layers {
            x = self.attention(&x, "vit", l, "self_attn", None, false, None);
            x = self.ffn(&x, "vit", l);
        }
        self.ln(&x, "vit/norm")
    }

    fn logits(&self, input: &Input<f64>) -> Mat {
        let c = &self.m.config;
        let visual = self.image(input.pixels.data());

        let mut x = self.embed(&input.question);
        let jp = self.prefixes("jtm", c.jtm_layers);
        for l in 0..c.jtm_layers {
            let p = jp.as_ref().map(|v| &v[l]);
            x = self.attention(&x, "jtm", l, "self_attn", None, false, p);
            x = self.attention(&x, "jtm", l, "cross_attn", Some(&visual), false, None);
            x = self.ffn(&x, "jtm", l);
        }
        let fused = self.ln(&x, "jtm/norm");

        let mut y = self.embed(&input.dec);
        let dp = self.prefixes("dec", c.dec_layers);
        for l in 0..c.dec_layers {
            let p = dp.as_ref().map(|v| &v[l]);
            y = self.attention(&y, "dec", l, "self_attn", None, true, p);
            y = self.attention(&y, "dec", l, "cross_attn", Some(&fused), false, None);
            y = self.ffn(&y, "dec", l);
        }
        let y = self.ln(&y, "dec/norm");
        let head = if c.tie_lm_head {
            transpose(&self.mat("jtm/word_embed"))
        } else {
            self.mat("dec/lm_head/weight")
        };
        let b = self.get("dec/lm_head/bias");
        matmul(&y, &head).iter().map(|r| add_row(r, &b)).collect()
    }
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

fn add_row(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| add_row(x, y)).collect()
}

fn scale_cols(a: &Mat, s: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(s).map(|(x, y)| x * y).collect()).collect()
}

fn check(config: ModelConfig, plan: &str, seeds: u64) {
    let mut model = MileModel::<f64>::new(config.clone()).unwrap();
    let plan: TuningPlan = plan.parse().unwrap();
    apply_plan(&mut model, &plan).unwrap();
    perturb_adapters(&mut model, 0.2, &mut rng(11));
    let reference = Ref { m: &model };
    for seed in 0..seeds {
        let input = Input::<f64>::sample(&config, seed);
        let got = input.logits(&model);
        let want: Vec<f64> = reference.logits(&input).concat();
        assert_eq!(got.len(), want.len());
        for (i, (g, w)) in got.iter().zip(&want).enumerate() {
            assert!(
                (g - w).abs() <= 1e-9 * (1.0 + w.abs()),
                "plan {plan} seed {seed} logit {i}: graph {g} reference {w}"
            );
        }
    }
}

#[test]
fn base_model_matches_reference() {
    check(small_config(), "T,T,T", 5);
}

#[test]
fn tied_head_without_cls_matches_reference() {
    let config = ModelConfig {
        tie_lm_head: true,
        use_cls_token: false,
        ..small_config()
    };
    check(config, "T,T,T", 3);
}

#[test]
fn lora_matches_reference() {
    check(small_config(), "LoRA2,LoRA3,LoRA2", 5);
}

#[test]
fn ia3_matches_reference() {
    check(small_config(), "IA3,IA3,IA3", 5);
}

#[test]
fn prefix_matches_reference() {
    check(small_config(), "F,Prefix,Prefix(2)", 5);
}

#[test]
fn ptv2_matches_reference() {
    check(small_config(), "F,PTv2(4),PTv2", 5);
}
