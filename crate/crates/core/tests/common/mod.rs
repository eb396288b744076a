#![allow(dead_code)]

use mile_core::data::{QaRecord, Sample, SampleBuilder};
use mile_core::model::tokenizer;
use mile_core::peft::PEFT_PREFIX;
use mile_core::tensor::{Graph, Scalar, Tensor};
use mile_core::{MileModel, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Micro dimensions with the byte vocabulary and room for prefixes.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        hidden_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        vit_layers: 1,
        jtm_layers: 2,
        dec_layers: 2,
        image_size: 8,
        patch_size: 4,
        vocab_size: tokenizer::VOCAB_SIZE,
        max_text_len: 24,
        attention_budget: 32,
        prefix_len: 3,
        prefix_hidden: 8,
        ..ModelConfig::micro()
    }
}

pub fn random_pixels<T: Scalar>(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let s = config.image_size;
    let values: Vec<f64> = (0..s * s * 3).map(|_| rng.random::<f64>()).collect();
    Tensor::from_f64(vec![s, s, 3], &values).unwrap()
}

pub fn random_tokens(n: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

/// Random image, question and decoder input.
pub struct Input<T> {
    pub pixels: Tensor<T>,
    pub question: Vec<usize>,
    pub dec: Vec<usize>,
}

impl<T: Scalar> Input<T> {
    pub fn sample(config: &ModelConfig, seed: u64) -> Self {
        let mut r = rng(seed);
        let pixels = random_pixels(config, &mut r);
        let qlen = r.random_range(1..=6);
        let dlen = r.random_range(1..=6);
        Self {
            pixels,
            question: random_tokens(qlen, config.vocab_size, &mut r),
            dec: random_tokens(dlen, config.vocab_size, &mut r),
        }
    }

    /// Decoder logits `[T×V]`, flattened.
    pub fn logits(&self, model: &MileModel<T>) -> Vec<T> {
        let mut g = Graph::new();
        let v = model.encode_image(&mut g, &self.pixels).unwrap();
        let f = model.encode_jtm(&mut g, &self.question, v).unwrap();
        let l = model.decode_text(&mut g, f, &self.dec).unwrap();
        g.value(l).to_vec()
    }
}

/// Adds N(0, std) noise to every adapter tensor so adapters stop being
/// identities.
pub fn perturb_adapters<T: Scalar>(model: &mut MileModel<T>, std: f64, rng: &mut ChaCha8Rng) {
    let noise = Normal::new(0.0, std).unwrap();
    let ids: Vec<_> = model
        .params
        .iter()
        .filter(|(_, n, _)| n.starts_with(PEFT_PREFIX))
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        for w in model.params.tensor_mut(id).data_mut() {
            *w = T::of(w.as_f64() + noise.sample(rng));
        }
    }
}

pub fn samples<T: Scalar>(config: &ModelConfig, records: &[QaRecord]) -> Vec<Sample<T>> {
    SampleBuilder {
        image_size: config.image_size,
        max_text_len: config.max_text_len,
        base_dir: Path::new("."),
    }
    .origin(records)
    .unwrap()
}

pub fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn bits<T: Scalar>(xs: &[T]) -> Vec<u64> {
    xs.iter().map(|x| x.as_f64().to_bits()).collect()
}
