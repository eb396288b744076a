use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Component, MileModel};
use crate::tensor::Scalar;

/// How one component is tuned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Mode {
    Freeze,
    Full,
    LoRA(usize),
    IA3,
    /// Prefix length; `None` takes `prefix_len` from the model config.
    Prefix(Option<usize>),
    Ptv2(Option<usize>),
}

impl Mode {
    pub fn is_peft(self) -> bool {
        !matches!(self, Mode::Freeze | Mode::Full)
    }

    /// Position on the freeze → adapter → full trainability ladder.
    pub fn trainability_rank(self) -> u8 {
        match self {
            Mode::Freeze => 0,
            Mode::Full => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Mode::Freeze => f.write_str("F"),
            Mode::Full => f.write_str("T"),
            Mode::LoRA(r) => write!(f, "LoRA{r}"),
            Mode::IA3 => f.write_str("IA3"),
            Mode::Prefix(None) => f.write_str("Prefix"),
            Mode::Prefix(Some(p)) => write!(f, "Prefix{p}"),
            Mode::Ptv2(None) => f.write_str("PTv2"),
            Mode::Ptv2(Some(p)) => write!(f, "PTv2({p})"),
        }
    }
}

fn parse_len(rest: &str, whole: &str) -> Result<Option<usize>> {
    let rest = rest.trim();
    let inner = rest
        .strip_prefix('(')
        .and_then(|r| r.strip_suffix(')'))
        .unwrap_or(rest)
        .trim();
    if inner.is_empty() {
        return Ok(None);
    }
    inner
        .parse()
        .map(Some)
        .map_err(|_| Error::Plan(format!("bad size in mode `{whole}`")))
}

impl FromStr for Mode {
    type Err = Error;

    /// Accepts `F`, `T`, `LoRA4`, `LoRA(4)`, `IA3`, `Prefix`, `Prefix16`,
    /// `PTv2`, `PTv2(10)`, case-insensitively.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let lower = t.to_ascii_lowercase();
        match lower.as_str() {
            "f" | "freeze" => return Ok(Mode::Freeze),
            "t" | "full" => return Ok(Mode::Full),
            "ia3" => return Ok(Mode::IA3),
            _ => {}
        }
        if let Some(rest) = lower.strip_prefix("lora") {
            return match parse_len(rest, t)? {
                Some(r) => Ok(Mode::LoRA(r)),
                None => Err(Error::Plan(format!("LoRA mode `{t}` needs a rank"))),
            };
        }
        if let Some(rest) = lower.strip_prefix("prefix") {
            return Ok(Mode::Prefix(parse_len(rest, t)?));
        }
        if let Some(rest) = lower.strip_prefix("ptv2") {
            return Ok(Mode::Ptv2(parse_len(rest, t)?));
        }
        Err(Error::Plan(format!("unknown tuning mode `{t}`")))
    }
}

impl TryFrom<String> for Mode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Mode> for String {
    fn from(m: Mode) -> String {
        m.to_string()
    }
}

/// Per-component tuning modes, written `vit,jtm,dec` (e.g. `F,LoRA4,LoRA4`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningPlan {
    pub vit: Mode,
    pub jtm: Mode,
    pub dec: Mode,
}

impl TuningPlan {
    pub fn new(vit: Mode, jtm: Mode, dec: Mode) -> Self {
        Self { vit, jtm, dec }
    }

    pub fn full() -> Self {
        Self::new(Mode::Full, Mode::Full, Mode::Full)
    }

    pub fn mode(&self, c: Component) -> Mode {
        match c {
            Component::Vit => self.vit,
            Component::Jtm => self.jtm,
            Component::Dec => self.dec,
        }
    }

    pub fn with(mut self, c: Component, mode: Mode) -> Self {
        match c {
            Component::Vit => self.vit = mode,
            Component::Jtm => self.jtm = mode,
            Component::Dec => self.dec = mode,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.vit, Mode::Prefix(_) | Mode::Ptv2(_)) {
            return Err(Error::Plan(format!(
                "{} is not supported on the image encoder",
                self.vit
            )));
        }
        if Component::ALL.iter().any(|&c| self.mode(c) == Mode::LoRA(0)) {
            return Err(Error::Plan("LoRA rank must be at least 1".into()));
        }
        Ok(())
    }
}

impl fmt::Display for TuningPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.vit, self.jtm, self.dec)
    }
}

impl FromStr for TuningPlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').collect();
        let [vit, jtm, dec] = parts.as_slice() else {
            return Err(Error::Plan(format!(
                "plan `{s}` must list three modes: vit,jtm,dec"
            )));
        };
        let plan = Self::new(vit.parse()?, jtm.parse()?, dec.parse()?);
        plan.validate()?;
        Ok(plan)
    }
}

/// Sets trainability flags and attaches adapters for `plan`. A model
/// accepts exactly one plan.
pub fn apply_plan<T: Scalar>(model: &mut MileModel<T>, plan: &TuningPlan) -> Result<()> {
    if let Some(existing) = &model.plan {
        return Err(Error::Plan(format!("plan {existing} already applied")));
    }
    plan.validate()?;
    for c in Component::ALL {
        let mode = plan.mode(c);
        let owned = |name: &str| Component::of_param(name) == Some(c);
        model.params.set_trainable_where(owned, mode == Mode::Full);
        match mode {
            Mode::Freeze | Mode::Full => {}
            Mode::LoRA(r) => model.attach_lora(c, r)?,
            Mode::IA3 => model.attach_ia3(c)?,
            Mode::Prefix(p) => model.attach_prefix(c, p.unwrap_or(model.config.prefix_len))?,
            Mode::Ptv2(p) => model.attach_ptv2(c, p.unwrap_or(model.config.prefix_len))?,
        }
    }
    model.plan = Some(*plan);
    Ok(())
}
