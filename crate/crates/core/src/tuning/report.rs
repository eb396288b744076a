use std::fmt;

use serde::Serialize;

use crate::error::Result;
use crate::model::{Component, MileModel, ModelConfig};
use crate::peft::{count, PEFT_PREFIX};
use crate::tensor::Scalar;

use super::{apply_plan, TuningPlan};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ComponentCount {
    pub base_total: usize,
    pub base_trainable: usize,
    pub peft_total: usize,
    pub peft_trainable: usize,
}

impl ComponentCount {
    pub fn total(&self) -> usize {
        self.base_total + self.peft_total
    }

    pub fn trainable(&self) -> usize {
        self.base_trainable + self.peft_trainable
    }
}

/// Exact parameter accounting. The denominator includes attached adapters.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamReport {
    pub plan: Option<String>,
    pub vit: ComponentCount,
    pub jtm: ComponentCount,
    pub dec: ComponentCount,
}

impl ParamReport {
    pub fn component(&self, c: Component) -> &ComponentCount {
        match c {
            Component::Vit => &self.vit,
            Component::Jtm => &self.jtm,
            Component::Dec => &self.dec,
        }
    }

    pub fn total(&self) -> usize {
        Component::ALL.iter().map(|&c| self.component(c).total()).sum()
    }

    pub fn trainable(&self) -> usize {
        Component::ALL.iter().map(|&c| self.component(c).trainable()).sum()
    }

    pub fn peft_trainable(&self) -> usize {
        Component::ALL.iter().map(|&c| self.component(c).peft_trainable).sum()
    }

    /// `100 · trainable / total`.
    pub fn fraction(&self) -> f64 {
        100.0 * self.trainable() as f64 / self.total() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("component,base_total,base_trainable,peft_total,peft_trainable,trainable,total\n");
        for c in Component::ALL {
            let n = self.component(c);
            out.push_str(&format!(
                "{c},{},{},{},{},{},{}\n",
                n.base_total,
                n.base_trainable,
                n.peft_total,
                n.peft_trainable,
                n.trainable(),
                n.total()
            ));
        }
        out.push_str(&format!(
            "all,{},{},{},{},{},{}\n",
            Component::ALL.iter().map(|&c| self.component(c).base_total).sum::<usize>(),
            Component::ALL.iter().map(|&c| self.component(c).base_trainable).sum::<usize>(),
            Component::ALL.iter().map(|&c| self.component(c).peft_total).sum::<usize>(),
            self.peft_trainable(),
            self.trainable(),
            self.total()
        ));
        out.push_str(&format!("fraction_percent,{:.3}\n", self.fraction()));
        out
    }
}

fn grouped(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(plan) = &self.plan {
            writeln!(f, "plan: {plan}")?;
        }
        writeln!(f, "{:<9}{:>16}{:>16}{:>14}{:>16}", "component", "base", "base trainable", "adapter", "trainable")?;
        for c in Component::ALL {
            let n = self.component(c);
            writeln!(
                f,
                "{:<9}{:>16}{:>16}{:>14}{:>16}",
                c.as_str(),
                grouped(n.base_total),
                grouped(n.base_trainable),
                grouped(n.peft_total),
                grouped(n.trainable())
            )?;
        }
        writeln!(f, "total parameters:     {}", grouped(self.total()))?;
        writeln!(f, "trainable parameters: {}", grouped(self.trainable()))?;
        write!(f, "#Params: {:.3}%", self.fraction())
    }
}

/// Walks every named parameter of `model`.
pub fn count_params<T: Scalar>(model: &MileModel<T>) -> ParamReport {
    let mut report = ParamReport {
        plan: model.plan().map(|p| p.to_string()),
        vit: ComponentCount::default(),
        jtm: ComponentCount::default(),
        dec: ComponentCount::default(),
    };
    for (_, name, t) in model.params.iter() {
        let c = Component::of_param(name).expect("every parameter belongs to a component");
        let n = t.numel();
        let slot = match c {
            Component::Vit => &mut report.vit,
            Component::Jtm => &mut report.jtm,
            Component::Dec => &mut report.dec,
        };
        if name.starts_with(PEFT_PREFIX) {
            slot.peft_total += n;
            slot.peft_trainable += if t.trainable { n } else { 0 };
        } else {
            slot.base_total += n;
            slot.base_trainable += if t.trainable { n } else { 0 };
        }
    }
    report
}

/// Builds a shape-only model for `config`, applies `plan`, and counts.
pub fn plan_report(config: &ModelConfig, plan: &TuningPlan) -> Result<ParamReport> {
    let mut model = MileModel::<f32>::meta(config.clone())?;
    apply_plan(&mut model, plan)?;
    Ok(count_params(&model))
}

/// Prefix network width that brings a prefix on `components` closest to
/// `target_percent` trainable, given prefix length `len` and a frozen rest.
pub fn solve_prefix_hidden(config: &ModelConfig, components: &[Component], len: usize, target_percent: f64) -> Result<usize> {
    let base = count_params(&MileModel::<f32>::meta(config.clone())?).total();
    let d = config.hidden_dim;
    let t = target_percent / 100.0;
    // trainable x satisfies x / (base + x) = t
    let x = t * base as f64 / (1.0 - t);
    let (mut fixed, mut per_hidden) = (0.0, 0.0);
    for &c in components {
        let out = (config.layers(c) * 2 * d) as f64;
        fixed += (len * d) as f64 + out;
        per_hidden += d as f64 + 1.0 + out;
    }
    let h = ((x - fixed) / per_hidden).round().max(1.0) as usize;
    debug_assert_eq!(
        count::prefix(len, config.layers(components[0]), d, h) * components.len(),
        components.iter().map(|&c| count::prefix(len, config.layers(c), d, h)).sum::<usize>()
    );
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tuning::Mode;

    #[test]
    fn grouping() {
        assert_eq!(grouped(589824), "589,824");
        assert_eq!(grouped(12), "12");
        assert_eq!(grouped(1000), "1,000");
    }

    #[test]
    fn frozen_and_full_extremes() {
        let cfg = ModelConfig::toy();
        let frozen = plan_report(&cfg, &TuningPlan::new(Mode::Freeze, Mode::Freeze, Mode::Freeze)).unwrap();
        assert_eq!(frozen.trainable(), 0);
        let full = plan_report(&cfg, &TuningPlan::full()).unwrap();
        assert_eq!(full.fraction(), 100.0);
        assert_eq!(full.total(), frozen.total());
    }

    #[test]
    fn csv_has_one_row_per_component() {
        let r = plan_report(&ModelConfig::toy(), &TuningPlan::full()).unwrap();
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.ends_with("fraction_percent,100.000\n"));
    }
}
