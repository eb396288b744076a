//! Per-component tuning plans, parameter accounting and masking checks.

mod plan;
mod report;

pub use plan::{apply_plan, Mode, TuningPlan};
pub use report::{count_params, plan_report, solve_prefix_hidden, ComponentCount, ParamReport};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::MileModel;
use crate::tensor::{AdamW, AdamWConfig, Graph, Scalar};

/// Outcome of [`verify_masking`].
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskingCheck {
    /// Frozen tensors whose values changed.
    pub frozen_changed: Vec<String>,
    /// Trainable tensors that never changed.
    pub trainable_unchanged: Vec<String>,
}

impl MaskingCheck {
    pub fn ok(&self) -> bool {
        self.frozen_changed.is_empty() && self.trainable_unchanged.is_empty()
    }
}

/// Runs `steps` optimizer updates on `data` and diffs every named tensor
/// against a snapshot taken beforehand.
pub fn verify_masking<T: Scalar>(model: &mut MileModel<T>, steps: usize, data: &[Sample<T>], lr: f64) -> Result<MaskingCheck> {
    if data.is_empty() {
        return Err(Error::Input("masking check needs at least one sample".into()));
    }
    let before = model.params.snapshot();
    let trainable: Vec<bool> = model.params.iter().map(|(_, _, t)| t.trainable).collect();
    let cfg = AdamWConfig {
        base_lr: lr,
        min_lr: lr,
        ..AdamWConfig::paper(steps.max(1))
    };
    let mut opt = AdamW::new(cfg, &model.params)?;
    for s in 0..steps {
        let sample = &data[s % data.len()];
        let mut g = Graph::new();
        let loss = model.forward_lm_loss(&mut g, &sample.pixels, &sample.question, &sample.answer)?;
        g.backward(loss, &mut model.params)?;
        opt.step(&mut model.params)?;
    }
    let after = model.params.snapshot();
    let mut check = MaskingCheck::default();
    for (((name, old), (_, new)), train) in before.iter().zip(&after).zip(trainable) {
        let changed = old != new;
        if train && !changed {
            check.trainable_unchanged.push(name.clone());
        } else if !train && changed {
            check.frozen_changed.push(name.clone());
        }
    }
    Ok(check)
}
