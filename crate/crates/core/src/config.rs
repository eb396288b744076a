//! Run config files: `[model]`, `[plan]`, `[train]` and `[data]` sections.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use crate::tuning::TuningPlan;

/// Dataset paths. Relative paths resolve against the config file's
/// directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub origin: Option<PathBuf>,
    pub instruct: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    /// Directory holding image files; defaults to the config directory.
    pub image_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Full fine-tuning when omitted.
    #[serde(default = "TuningPlan::full")]
    pub plan: TuningPlan,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataPaths,
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e
                .span()
                .map(|s| text[..s.start].matches('\n').count() + 1)
                .unwrap_or(0),
            message: e.message().to_string(),
        })?;
        cfg.model.validate()?;
        cfg.plan.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and resolves data paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text, path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let d = &mut cfg.data;
        for p in [&mut d.origin, &mut d.instruct, &mut d.eval, &mut d.image_dir] {
            if let Some(p) = p.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        }
        d.image_dir.get_or_insert_with(|| base.to_path_buf());
        Ok(cfg)
    }

    pub fn image_dir(&self) -> &Path {
        self.data.image_dir.as_deref().unwrap_or(Path::new("."))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tuning::Mode;

    const TEXT: &str = r#"
[model]
hidden_dim = 16
num_heads = 2
ffn_dim = 32
vit_layers = 1
jtm_layers = 1
dec_layers = 1
image_size = 8
patch_size = 4
vocab_size = 260
max_text_len = 32
attention_budget = 40

[plan]
vit = "F"
jtm = "LoRA4"
dec = "PTv2(3)"

[train]
epochs = 3
paradigm = "origin_then_instruct"
instruct_epochs = 1

[data]
origin = "qa.jsonl"
instruct = "/abs/instruct.jsonl"
"#;

    #[test]
    fn parses_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, TEXT).unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.plan.dec, Mode::Ptv2(Some(3)));
        assert_eq!(cfg.train.base_lr, 2e-5);
        assert_eq!(cfg.train.weight_decay, 0.05);
        assert_eq!(cfg.data.origin.clone().unwrap(), dir.path().join("qa.jsonl"));
        assert_eq!(cfg.data.instruct.clone().unwrap(), PathBuf::from("/abs/instruct.jsonl"));
        assert_eq!(cfg.image_dir(), dir.path());
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        let p = Path::new("x.toml");
        let typo = TEXT.replace("epochs = 3", "epochz = 3");
        assert!(matches!(RunConfig::parse(&typo, p), Err(Error::Parse { .. })));
        let bad_plan = TEXT.replace(r#"vit = "F""#, r#"vit = "Prefix""#);
        assert!(matches!(RunConfig::parse(&bad_plan, p), Err(Error::Plan(_))));
        let bad_model = TEXT.replace("num_heads = 2", "num_heads = 3");
        assert!(matches!(RunConfig::parse(&bad_model, p), Err(Error::Config(_))));
    }
}
