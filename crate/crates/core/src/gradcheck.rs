//! Central finite-difference check of every trainable gradient, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::model::{MileModel, ModelConfig};
use crate::params::ParamId;
use crate::peft::PEFT_PREFIX;
use crate::tensor::{Graph, Tensor};
use crate::tuning::{apply_plan, TuningPlan};

pub const DEFAULT_TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so exactly-zero gradients
/// compare by absolute difference.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub plan: TuningPlan,
    pub tensors: usize,
    pub entries: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
    pub failures: Vec<Mismatch>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Fixed random inputs whose token ids all fall inside `config.vocab_size`.
struct Inputs {
    pixels: Tensor<f64>,
    question: Vec<usize>,
    dec_inputs: Vec<usize>,
    targets: Vec<usize>,
}

impl Inputs {
    fn sample(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let s = config.image_size;
        let pixels = (0..s * s * 3).map(|_| rng.random::<f64>()).collect();
        let v = config.vocab_size;
        let len = config.max_text_len.clamp(1, 4);
        let mut toks = |n: usize| (0..n).map(|_| rng.random_range(0..v)).collect::<Vec<_>>();
        let question = toks(len);
        let answer = toks(len);
        Self {
            pixels: Tensor::new(vec![s, s, 3], pixels).expect("pixel count matches"),
            question,
            dec_inputs: answer[..len].to_vec(),
            targets: answer[1..].iter().copied().chain([answer[0]]).collect(),
        }
    }

    fn loss(&self, model: &MileModel<f64>, g: &mut Graph<f64>) -> Result<crate::tensor::Var> {
        let visual = model.encode_image(g, &self.pixels)?;
        let fused = model.encode_jtm(g, &self.question, visual)?;
        let logits = model.decode_text(g, fused, &self.dec_inputs)?;
        g.cross_entropy(logits, &self.targets, &vec![true; self.targets.len()])
    }

    fn loss_value(&self, model: &MileModel<f64>) -> Result<f64> {
        let mut g = Graph::new();
        let l = self.loss(model, &mut g)?;
        Ok(g.scalar_value(l))
    }
}

/// Builds `config` in f64, applies `plan`, moves adapters off their
/// identity initialization, and compares every trainable gradient entry
/// against a central difference.
pub fn gradcheck(config: &ModelConfig, plan: &TuningPlan, seed: u64, tol: f64) -> Result<GradcheckReport> {
    let mut model = MileModel::<f64>::new(ModelConfig {
        seed,
        ..config.clone()
    })?;
    apply_plan(&mut model, plan)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let noise = Normal::new(0.0, 0.1).expect("valid std");
    let adapters: Vec<ParamId> = model
        .params
        .iter()
        .filter(|(_, n, _)| n.starts_with(PEFT_PREFIX))
        .map(|(id, _, _)| id)
        .collect();
    for id in adapters {
        for w in model.params.tensor_mut(id).data_mut() {
            *w += noise.sample(&mut rng);
        }
    }
    let inputs = Inputs::sample(&model.config, &mut rng);

    let mut g = Graph::new();
    let loss = inputs.loss(&model, &mut g)?;
    g.backward(loss, &mut model.params)?;

    let trainable: Vec<(ParamId, String)> = model
        .params
        .iter()
        .filter(|(_, _, t)| t.trainable)
        .map(|(id, n, _)| (id, n.to_string()))
        .collect();
    let mut report = GradcheckReport {
        plan: *plan,
        tensors: trainable.len(),
        entries: 0,
        max_rel_err: 0.0,
        worst: None,
        failures: Vec::new(),
    };
    for (id, name) in trainable {
        let analytic: Vec<f64> = match model.params.tensor(id).grad() {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; model.params.tensor(id).numel()],
        };
        for (i, &a) in analytic.iter().enumerate() {
            let orig = model.params.tensor(id).data()[i];
            model.params.tensor_mut(id).data_mut()[i] = orig + STEP;
            let up = inputs.loss_value(&model)?;
            model.params.tensor_mut(id).data_mut()[i] = orig - STEP;
            let down = inputs.loss_value(&model)?;
            model.params.tensor_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);

            let err = relative_error(a, numeric);
            report.entries += 1;
            let m = Mismatch {
                tensor: name.clone(),
                index: i,
                analytic: a,
                numeric,
            };
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(m.clone());
            }
            if err > tol {
                report.failures.push(m);
            }
        }
    }
    Ok(report)
}

/// Plans exercised by the `gradcheck` command: full tuning plus one plan
/// per adapter kind.
pub fn default_plans() -> Vec<TuningPlan> {
    ["T,T,T", "LoRA2,LoRA2,LoRA2", "IA3,IA3,IA3", "F,Prefix,Prefix", "F,PTv2,PTv2"]
        .iter()
        .map(|p| p.parse().expect("built-in plans parse"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
