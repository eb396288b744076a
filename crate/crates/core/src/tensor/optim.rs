//! AdamW with decoupled weight decay and a per-step cosine schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Learning rate at `step` of a cosine decay from `base_lr` to `min_lr`
/// over `total_steps`.
pub fn cosine_lr_at(step: usize, total_steps: usize, base_lr: f64, min_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("cosine schedule needs total_steps > 0".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!(
            "step {step} past the end of a {total_steps}-step schedule"
        )));
    }
    let progress = step as f64 / total_steps as f64;
    Ok(min_lr + (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * progress).cos()) / 2.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub total_steps: usize,
}

impl AdamWConfig {
    /// Optimizer settings used for every reported run: lr 2e-5 decaying to
    /// 0, weight decay 0.05.
    pub fn paper(total_steps: usize) -> Self {
        Self {
            base_lr: 2e-5,
            min_lr: 0.0,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps,
        }
    }
}

/// Optimizer state. Moment buffers are keyed by parameter name and exist
/// only for tensors that were trainable when the optimizer was created.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: usize,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new<T: Scalar>(config: AdamWConfig, params: &ParamStore<T>) -> Result<Self> {
        if config.total_steps == 0 {
            return Err(Error::Config("optimizer needs total_steps > 0".into()));
        }
        let moments = params
            .iter()
            .filter(|(_, _, t)| t.trainable)
            .map(|(_, name, t)| (name.to_string(), (vec![0.0; t.numel()], vec![0.0; t.numel()])))
            .collect();
        Ok(Self {
            config,
            step: 0,
            moments,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    /// Learning rate the next call to [`AdamW::step`] will use.
    pub fn current_lr(&self) -> Result<f64> {
        let c = &self.config;
        cosine_lr_at(self.step.min(c.total_steps), c.total_steps, c.base_lr, c.min_lr)
    }

    /// Applies one update to every tracked tensor and returns the learning
    /// rate used. Gradients are consumed.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>) -> Result<f64> {
        let lr = self.current_lr()?;
        let c = &self.config;
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);

        for (name, (m, v)) in self.moments.iter_mut() {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer tracks unknown tensor `{name}`")))?;
            let tensor: &mut Tensor<T> = params.tensor_mut(id);
            let grad: Vec<f64> = tensor
                .grad()
                .ok_or_else(|| Error::MissingGrad(name.clone()))?
                .iter()
                .map(|g| g.as_f64())
                .collect();
            for (i, w) in tensor.data_mut().iter_mut().enumerate() {
                let mut x = w.as_f64();
                x -= lr * c.weight_decay * x;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * grad[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                x -= lr * m_hat / (v_hat.sqrt() + c.eps);
                *w = T::of(x);
            }
            tensor.zero_grad();
        }
        self.step += 1;
        Ok(lr)
    }

    /// Moment buffers flattened for checkpointing.
    pub fn export(&self) -> Vec<(String, Vec<f64>, Vec<f64>)> {
        self.moments
            .iter()
            .map(|(k, (m, v))| (k.clone(), m.clone(), v.clone()))
            .collect()
    }

    pub fn restore(
        config: AdamWConfig,
        step: usize,
        moments: impl IntoIterator<Item = (String, Vec<f64>, Vec<f64>)>,
    ) -> Self {
        Self {
            config,
            step,
            moments: moments.into_iter().map(|(k, m, v)| (k, (m, v))).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f64, trainable: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64(vec![1], &[value]).unwrap(), trainable)
            .unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore<f64>, g: f64) {
        let id = s.id("w").unwrap();
        s.tensor_mut(id).accumulate_grad(&[g]);
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr_at(0, 100, 2e-5, 0.0).unwrap(), 2e-5);
        assert!(cosine_lr_at(100, 100, 2e-5, 0.0).unwrap().abs() < 1e-20);
        let mid = cosine_lr_at(50, 100, 2e-5, 1e-6).unwrap();
        assert!((mid - (2e-5 + 1e-6) / 2.0).abs() < 1e-18);
        assert!(matches!(cosine_lr_at(0, 0, 1.0, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut s = scalar_store(0.75, true);
        let mut cfg = AdamWConfig::paper(10);
        cfg.weight_decay = 0.0;
        let mut opt = AdamW::new(cfg, &s).unwrap();
        set_grad(&mut s, 0.0);
        opt.step(&mut s).unwrap();
        assert_eq!(s.tensor(s.id("w").unwrap()).data(), &[0.75]);
    }

    #[test]
    fn single_step_matches_hand_calculation() {
        // w=0.5, g=0.2, lr=0.1, wd=0.01, one step:
        // decay:  0.5 - 0.1*0.01*0.5 = 0.4995
        // m=0.02, v=4e-5, m_hat=0.2, v_hat=0.04, update = 0.1*0.2/(0.2+1e-8)
        let mut s = scalar_store(0.5, true);
        let cfg = AdamWConfig {
            base_lr: 0.1,
            min_lr: 0.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            total_steps: 1000,
        };
        let mut opt = AdamW::new(cfg, &s).unwrap();
        set_grad(&mut s, 0.2);
        let lr = opt.step(&mut s).unwrap();
        assert_eq!(lr, 0.1);
        let expected = 0.4995 - 0.1 * 0.2 / (0.2 + 1e-8);
        assert!((s.tensor(s.id("w").unwrap()).data()[0] - expected).abs() < 1e-12);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn decay_only_shrinks_by_lr_wd_value() {
        let mut s = scalar_store(2.0, true);
        let mut cfg = AdamWConfig::paper(10);
        cfg.base_lr = 0.1;
        cfg.weight_decay = 0.05;
        let mut opt = AdamW::new(cfg, &s).unwrap();
        set_grad(&mut s, 0.0);
        opt.step(&mut s).unwrap();
        let w = s.tensor(s.id("w").unwrap()).data()[0];
        assert!((w - (2.0 - 0.1 * 0.05 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_a_contract_error() {
        let mut s = scalar_store(1.0, true);
        let mut opt = AdamW::new(AdamWConfig::paper(10), &s).unwrap();
        assert!(matches!(opt.step(&mut s), Err(Error::MissingGrad(_))));
    }

    #[test]
    fn frozen_tensor_is_not_tracked() {
        let mut s = scalar_store(1.0, false);
        let mut opt = AdamW::new(AdamWConfig::paper(10), &s).unwrap();
        assert_eq!(opt.tracked().count(), 0);
        opt.step(&mut s).unwrap();
        assert_eq!(s.tensor(s.id("w").unwrap()).data(), &[1.0]);
    }
}
