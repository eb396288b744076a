//! QA records, instruction-format generation, images and training samples.

pub mod datagen;
pub mod records;
pub mod synth;

use std::collections::HashMap;
use std::path::Path;

pub use datagen::{AttributePool, AttributeRules, Manifest, TemplateSet};
pub use records::{AnswerType, Attribute, InstructionRecord, QaRecord};

use crate::error::{Error, Result};
use crate::model::tokenizer;
use crate::tensor::{Scalar, Tensor};

/// Loads an image as `size × size × 3` values in `[0, 1]`. `synth:`
/// references are drawn; anything else is read from disk relative to
/// `base_dir` and resized.
pub fn load_image<T: Scalar>(image_ref: &str, size: usize, base_dir: &Path) -> Result<Tensor<T>> {
    let px: Vec<f32> = if image_ref.starts_with("synth:") {
        synth::Scene::parse(image_ref)?.render(size)
    } else {
        let path = base_dir.join(image_ref);
        let img = image::open(&path)
            .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?
            .resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle)
            .to_rgb8();
        img.into_raw().into_iter().map(|b| f32::from(b) / 255.0).collect()
    };
    Tensor::new(vec![size, size, 3], px.into_iter().map(|v| T::of(f64::from(v))).collect())
}

/// A tokenized training or evaluation example.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub pixels: Tensor<T>,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
}

/// Caches decoded images by reference while building samples.
pub struct SampleBuilder<'a> {
    pub image_size: usize,
    pub max_text_len: usize,
    pub base_dir: &'a Path,
}

impl SampleBuilder<'_> {
    fn build<T: Scalar>(
        &self,
        items: impl Iterator<Item = (String, String, String)>,
    ) -> Result<Vec<Sample<T>>> {
        let mut cache: HashMap<String, Tensor<T>> = HashMap::new();
        items
            .map(|(image, text, answer)| {
                let pixels = match cache.get(&image) {
                    Some(p) => p.clone(),
                    None => {
                        let p = load_image(&image, self.image_size, self.base_dir)?;
                        cache.insert(image.clone(), p.clone());
                        p
                    }
                };
                let question = tokenizer::encode_question(&text);
                let answer = tokenizer::encode_answer(&answer);
                if question.len() > self.max_text_len || answer.len() + 1 > self.max_text_len {
                    return Err(Error::Input(format!(
                        "record for {image} exceeds max_text_len {}",
                        self.max_text_len
                    )));
                }
                Ok(Sample {
                    pixels,
                    question,
                    answer,
                })
            })
            .collect()
    }

    /// Ordinary format: the question is the encoder text.
    pub fn origin<T: Scalar>(&self, records: &[QaRecord]) -> Result<Vec<Sample<T>>> {
        self.build(
            records
                .iter()
                .map(|r| (r.image.clone(), r.question.clone(), r.answer.clone())),
        )
    }

    /// Instruction format: the rendered instruction is the encoder text.
    pub fn instruct<T: Scalar>(&self, records: &[InstructionRecord]) -> Result<Vec<Sample<T>>> {
        self.build(
            records
                .iter()
                .map(|r| (r.image.clone(), r.instruction.clone(), r.answer.clone())),
        )
    }
}
