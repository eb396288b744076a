//! Language-model training: single-stage runs, origin-then-instruct
//! two-stage runs, checkpointing and exact resume.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::MileModel;
use crate::tensor::{AdamW, AdamWConfig, Graph, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Paradigm {
    /// Ordinary question-answer data.
    Origin,
    /// Instruction-format data only.
    Instruct,
    /// Origin to completion, then instruction data with a fresh optimizer.
    OriginThenInstruct,
}

/// Which dataset a step trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Origin,
    Instruct,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Origin => "origin",
            Stage::Instruct => "instruct",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "origin" => Ok(Stage::Origin),
            "instruct" => Ok(Stage::Instruct),
            _ => Err(Error::Checkpoint(format!("unknown stage `{s}`"))),
        }
    }
}

fn d_base_lr() -> f64 {
    2e-5
}
fn d_weight_decay() -> f64 {
    0.05
}
fn d_epochs() -> usize {
    50
}
fn d_batch() -> usize {
    4
}
fn d_paradigm() -> Paradigm {
    Paradigm::Origin
}

/// `[train]` section of a run config. Defaults are the toy defaults; the
/// optimizer defaults follow the published recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_base_lr")]
    pub base_lr: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub min_lr: f64,
    /// Epochs of the first (or only) stage.
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    /// Epochs of the instruction stage of a two-stage run; defaults to
    /// `epochs`.
    #[serde(default)]
    pub instruct_epochs: Option<usize>,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_paradigm")]
    pub paradigm: Paradigm,
    /// Write a resumable checkpoint every this many optimizer steps.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: d_base_lr(),
            weight_decay: d_weight_decay(),
            min_lr: 0.0,
            epochs: d_epochs(),
            instruct_epochs: None,
            batch_size: d_batch(),
            seed: 0,
            paradigm: d_paradigm(),
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    /// 130 epochs at batch size 20.
    pub fn paper() -> Self {
        Self {
            epochs: 130,
            batch_size: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) || !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return Err(Error::Config("need 0 <= min_lr <= base_lr and base_lr > 0".into()));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    pub fn epochs_for(&self, stage: Stage) -> usize {
        match (self.paradigm, stage) {
            (Paradigm::OriginThenInstruct, Stage::Instruct) => self.instruct_epochs.unwrap_or(self.epochs),
            _ => self.epochs,
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    fn optimizer(&self, total_steps: usize) -> AdamWConfig {
        AdamWConfig {
            base_lr: self.base_lr,
            min_lr: self.min_lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::paper(total_steps)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub stage: Stage,
    /// Zero-based optimizer step within the stage.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<PathBuf>,
}

pub const LOSS_CSV_HEADER: &str = "step,stage,lr,loss";

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{LOSS_CSV_HEADER}\n");
        for s in &self.steps {
            out.push_str(&s.csv_row());
        }
        out
    }

    pub fn stage_steps(&self, stage: Stage) -> impl Iterator<Item = &StepRecord> {
        self.steps.iter().filter(move |s| s.stage == stage)
    }

    /// Mean loss over the last `n` steps of `stage`.
    pub fn tail_mean(&self, stage: Stage, n: usize) -> Option<f64> {
        let losses: Vec<f64> = self.stage_steps(stage).map(|s| s.loss).collect();
        let tail = &losses[losses.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

impl StepRecord {
    fn csv_row(&self) -> String {
        format!("{},{},{:e},{}\n", self.step, self.stage, self.lr, self.loss)
    }
}

/// Where a run writes its loss CSV and checkpoints. Without a directory
/// nothing touches the disk.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
}

impl RunOutput {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        Self { dir: Some(dir.into()) }
    }

    pub fn loss_csv(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("loss.csv"))
    }

    /// Resumable checkpoint rewritten during a run.
    pub fn last_checkpoint(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("last.ckpt"))
    }

    pub fn final_checkpoint(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("final.ckpt"))
    }

    pub fn stage_checkpoint(&self, stage: Stage) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{stage}.ckpt")))
    }

    fn prepare(&self, fresh: bool) -> Result<()> {
        let (Some(dir), Some(csv)) = (&self.dir, self.loss_csv()) else {
            return Ok(());
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if fresh || !csv.exists() {
            fs::write(&csv, format!("{LOSS_CSV_HEADER}\n")).map_err(|e| Error::io(&csv, e))?;
        }
        Ok(())
    }

    fn append(&self, rec: &StepRecord) -> Result<()> {
        let Some(csv) = self.loss_csv() else {
            return Ok(());
        };
        let mut f = OpenOptions::new().append(true).open(&csv).map_err(|e| Error::io(&csv, e))?;
        f.write_all(rec.csv_row().as_bytes()).map_err(|e| Error::io(&csv, e))
    }
}

/// Sample order for `epoch`, derived from the run seed alone so a resumed
/// run sees the same batches.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Forward, backward and one optimizer update on `batch`. Returns the
/// mean loss, the per-sample losses and the learning rate used.
pub fn train_step<T: Scalar>(
    model: &mut MileModel<T>,
    opt: &mut AdamW,
    batch: &[&Sample<T>],
) -> Result<(f64, Vec<f64>, f64)> {
    let mut g = Graph::new();
    let mut losses = Vec::with_capacity(batch.len());
    for s in batch {
        losses.push(model.forward_lm_loss(&mut g, &s.pixels, &s.question, &s.answer)?);
    }
    let per_sample: Vec<f64> = losses.iter().map(|&l| g.scalar_value(l).as_f64()).collect();
    let loss = g.mean(&losses)?;
    let value = g.scalar_value(loss).as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    if opt.tracked().next().is_some() {
        g.backward(loss, &mut model.params)?;
    }
    let lr = opt.step(&mut model.params)?;
    Ok((value, per_sample, lr))
}

/// Trains one stage to completion, starting from `opt` if given (resume)
/// or from a fresh optimizer. Steps are appended to `log`.
pub fn train_stage<T: Scalar>(
    model: &mut MileModel<T>,
    cfg: &TrainConfig,
    stage: Stage,
    data: &[Sample<T>],
    opt: Option<AdamW>,
    out: &RunOutput,
    log: &mut RunLog,
) -> Result<AdamW> {
    if data.is_empty() {
        return Err(Error::Input(format!("{stage} dataset is empty")));
    }
    let per_epoch = cfg.steps_per_epoch(data.len());
    let total = cfg.epochs_for(stage) * per_epoch;
    let mut opt = match opt {
        Some(o) => o,
        None => AdamW::new(cfg.optimizer(total.max(1)), &model.params)?,
    };
    let mut last_good = out.last_checkpoint().filter(|p| p.exists());
    let mut epoch_losses = vec![0.0; data.len()];

    while opt.step_count() < total {
        let s = opt.step_count();
        let (epoch, within) = (s / per_epoch, s % per_epoch);
        let order = epoch_order(cfg.seed, epoch, data.len());
        let idx = &order[within * cfg.batch_size..((within + 1) * cfg.batch_size).min(data.len())];
        let batch: Vec<&Sample<T>> = idx.iter().map(|&i| &data[i]).collect();

        let (loss, per_sample, lr) = match train_step(model, &mut opt, &batch) {
            Ok(r) => r,
            Err(Error::NonFinite(_)) => {
                return Err(Error::Diverged {
                    step: s,
                    loss: f64::NAN,
                    last_good,
                })
            }
            Err(e) => return Err(e),
        };
        for (&i, l) in idx.iter().zip(per_sample) {
            epoch_losses[i] = l;
        }
        let rec = StepRecord { stage, step: s, lr, loss };
        out.append(&rec)?;
        log.steps.push(rec);

        if within + 1 == per_epoch {
            log.epochs.push(EpochRecord {
                stage,
                epoch,
                mean_loss: epoch_losses.iter().sum::<f64>() / data.len() as f64,
            });
        }
        if let (Some(every), Some(path)) = (cfg.checkpoint_every, out.last_checkpoint()) {
            if opt.step_count() % every == 0 {
                checkpoint::save_resumable(&path, model, &opt, stage.as_str())?;
                last_good = Some(path);
            }
        }
    }
    Ok(opt)
}

/// Datasets for a run. Which ones are required depends on the paradigm.
pub struct TrainData<'a, T> {
    pub origin: Option<&'a [Sample<T>]>,
    pub instruct: Option<&'a [Sample<T>]>,
}

fn stages(p: Paradigm) -> &'static [Stage] {
    match p {
        Paradigm::Origin => &[Stage::Origin],
        Paradigm::Instruct => &[Stage::Instruct],
        Paradigm::OriginThenInstruct => &[Stage::Origin, Stage::Instruct],
    }
}

fn stage_data<'a, T>(data: &TrainData<'a, T>, stage: Stage) -> Result<&'a [Sample<T>]> {
    match stage {
        Stage::Origin => data.origin,
        Stage::Instruct => data.instruct,
    }
    .ok_or_else(|| Error::Config(format!("paradigm needs a {stage} dataset")))
}

/// Runs every stage of `cfg.paradigm`. With a resume state, stages before
/// the resumed one are skipped and the resumed one continues from its
/// optimizer step.
pub fn train<T: Scalar>(
    model: &mut MileModel<T>,
    cfg: &TrainConfig,
    data: &TrainData<'_, T>,
    out: &RunOutput,
    resume: Option<(AdamW, Stage)>,
) -> Result<RunLog> {
    cfg.validate()?;
    if model.plan().is_none() {
        return Err(Error::Plan("apply a tuning plan before training".into()));
    }
    let plan_stages = stages(cfg.paradigm);
    for &st in plan_stages {
        stage_data(data, st)?;
    }
    let start = Instant::now();
    out.prepare(resume.is_none())?;
    let mut log = RunLog::default();

    let (mut resume_opt, first) = match resume {
        None => (None, 0),
        Some((opt, st)) => {
            let pos = plan_stages
                .iter()
                .position(|&s| s == st)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint stage {st} is not part of this paradigm")))?;
            (Some(opt), pos)
        }
    };
    for (i, &stage) in plan_stages.iter().enumerate().skip(first) {
        if cfg.epochs_for(stage) == 0 {
            continue;
        }
        let opt = train_stage(model, cfg, stage, stage_data(data, stage)?, resume_opt.take(), out, &mut log)?;
        if let (Some(path), true) = (out.stage_checkpoint(stage), i + 1 < plan_stages.len()) {
            checkpoint::save_resumable(&path, model, &opt, stage.as_str())?;
        }
    }
    if let Some(path) = out.final_checkpoint() {
        checkpoint::save(&path, model)?;
        log.checkpoint = Some(path);
    }
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(log)
}

/// Loads a resumable checkpoint and finishes the run it belongs to.
pub fn resume<T: Scalar>(
    checkpoint_path: &Path,
    cfg: &TrainConfig,
    data: &TrainData<'_, T>,
    out: &RunOutput,
) -> Result<(MileModel<T>, RunLog)> {
    let (mut model, state) = checkpoint::load::<T>(checkpoint_path)?;
    let (opt, stage) = state.ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
    let stage: Stage = stage.as_deref().unwrap_or("origin").parse()?;
    let log = train(&mut model, cfg, data, out, Some((opt, stage)))?;
    Ok((model, log))
}
