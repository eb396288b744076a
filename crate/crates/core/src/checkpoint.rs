//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"MILECKPT"  u32 format version  u64 header length  header (TOML, UTF-8)
//! u64 tensor count
//! per tensor: u32 name length, name (UTF-8), u8 dtype tag, u32 ndim,
//!             u64 per dim, row-major payload
//! ```
//!
//! The header carries the model config, the tuning plan and, for resumable
//! checkpoints, the optimizer config and step. Optimizer moments are stored
//! as ordinary f64 tensors named `optim/m/<param>` and `optim/v/<param>`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MileModel, ModelConfig};
use crate::peft::PEFT_PREFIX;
use crate::tensor::{AdamW, AdamWConfig, DType, Scalar, Tensor};
use crate::tuning::{apply_plan, TuningPlan};

pub const MAGIC: &[u8; 8] = b"MILECKPT";
pub const FORMAT_VERSION: u32 = 1;

const OPTIM_M: &str = "optim/m/";
const OPTIM_V: &str = "optim/v/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    /// Every model tensor.
    Full,
    /// Only adapter tensors; loads onto a base model with the same config.
    Adapters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub step: usize,
    /// Training stage the optimizer belongs to, for two-stage resume.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    pub config: AdamWConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<TuningPlan>,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerHeader>,
}

/// A decoded tensor record, still in its stored precision.
#[derive(Clone, Debug)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl Record {
    fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        let mut payload = Vec::with_capacity(t.numel() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        Self {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            payload,
        }
    }

    pub fn values<T: Scalar>(&self) -> Vec<T> {
        self.payload
            .chunks_exact(self.dtype.size())
            .map(|b| T::read_le(b, self.dtype))
            .collect()
    }
}

fn write_file(path: &Path, header: &Header, records: &[Record]) -> Result<()> {
    let text = toml::to_string(header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(MAGIC)?;
    put(&FORMAT_VERSION.to_le_bytes())?;
    put(&(text.len() as u64).to_le_bytes())?;
    put(text.as_bytes())?;
    put(&(records.len() as u64).to_le_bytes())?;
    for r in records {
        put(&(r.name.len() as u32).to_le_bytes())?;
        put(r.name.as_bytes())?;
        put(&[r.dtype.tag()])?;
        put(&(r.shape.len() as u32).to_le_bytes())?;
        for &d in &r.shape {
            put(&(d as u64).to_le_bytes())?;
        }
        put(&r.payload)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }
}

/// Reads the header and every tensor record of a checkpoint.
pub fn read_file(path: &Path) -> Result<(Header, Vec<Record>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let version = c.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = c.u64()?;
    let text = std::str::from_utf8(c.take(header_len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let header: Header = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.format_version != version {
        return Err(Error::Checkpoint("header version disagrees with file version".into()));
    }
    let count = c.u64()?;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let tag = c.take(1)?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown dtype tag {tag}")))?;
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` is too large")))?;
        let payload = c.take(numel)?.to_vec();
        records.push(Record {
            name,
            dtype,
            shape,
            payload,
        });
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok((header, records))
}

fn optimizer_records(opt: &AdamW) -> Vec<Record> {
    let mut out = Vec::new();
    for (name, m, v) in opt.export() {
        let n = m.len();
        out.push(Record::from_tensor(
            &format!("{OPTIM_M}{name}"),
            &Tensor::<f64>::new(vec![n], m).expect("moment length matches"),
        ));
        out.push(Record::from_tensor(
            &format!("{OPTIM_V}{name}"),
            &Tensor::<f64>::new(vec![n], v).expect("moment length matches"),
        ));
    }
    out
}

/// Writes every model tensor.
pub fn save<T: Scalar>(path: &Path, model: &MileModel<T>) -> Result<()> {
    save_filtered(path, model, None, Kind::Full)
}

/// Writes every model tensor plus optimizer state, tagged with the
/// training stage it belongs to.
pub fn save_resumable<T: Scalar>(path: &Path, model: &MileModel<T>, optimizer: &AdamW, stage: &str) -> Result<()> {
    save_filtered(path, model, Some((optimizer, stage)), Kind::Full)
}

/// Writes only adapter tensors.
pub fn save_adapters<T: Scalar>(path: &Path, model: &MileModel<T>) -> Result<()> {
    save_filtered(path, model, None, Kind::Adapters)
}

fn save_filtered<T: Scalar>(path: &Path, model: &MileModel<T>, optimizer: Option<(&AdamW, &str)>, kind: Kind) -> Result<()> {
    if model.params.is_meta() {
        return Err(Error::Checkpoint("cannot save a shape-only model".into()));
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        kind,
        plan: model.plan().copied(),
        model: model.config.clone(),
        optimizer: optimizer.map(|(o, stage)| OptimizerHeader {
            step: o.step_count(),
            stage: Some(stage.to_string()),
            config: o.config.clone(),
        }),
    };
    let mut records: Vec<Record> = model
        .params
        .iter()
        .filter(|(_, name, _)| kind == Kind::Full || name.starts_with(PEFT_PREFIX))
        .map(|(_, name, t)| Record::from_tensor(name, t))
        .collect();
    if let Some((o, _)) = optimizer {
        records.extend(optimizer_records(o));
    }
    write_file(path, &header, &records)
}

/// Optimizer state from a resumable checkpoint, with its stage tag.
pub type Resume = (AdamW, Option<String>);

fn restore_optimizer(header: &Header, records: &[Record]) -> Result<Option<Resume>> {
    let Some(oh) = &header.optimizer else {
        return Ok(None);
    };
    let mut moments = Vec::new();
    for r in records.iter().filter(|r| r.name.starts_with(OPTIM_M)) {
        let name = &r.name[OPTIM_M.len()..];
        let v = records
            .iter()
            .find(|x| x.name.strip_prefix(OPTIM_V) == Some(name))
            .ok_or_else(|| Error::Checkpoint(format!("missing second moment for `{name}`")))?;
        moments.push((name.to_string(), r.values::<f64>(), v.values::<f64>()));
    }
    Ok(Some((AdamW::restore(oh.config.clone(), oh.step, moments), oh.stage.clone())))
}

/// Copies stored tensors into `model`. `model` must already carry the
/// checkpoint's plan. With `Kind::Full` every model tensor must be present;
/// with `Kind::Adapters` every adapter tensor must be.
fn copy_tensors<T: Scalar>(model: &mut MileModel<T>, kind: Kind, records: &[Record]) -> Result<()> {
    let wanted: Vec<String> = model
        .params
        .iter()
        .filter(|(_, n, _)| kind == Kind::Full || n.starts_with(PEFT_PREFIX))
        .map(|(_, n, _)| n.to_string())
        .collect();
    for name in &wanted {
        let r = records
            .iter()
            .find(|r| &r.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks tensor `{name}`")))?;
        let id = model.params.id(name).expect("name came from the store");
        let t = model.params.tensor_mut(id);
        if t.shape() != r.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?} in checkpoint but {:?} in model",
                r.shape,
                t.shape()
            )));
        }
        t.data_mut().copy_from_slice(&r.values::<T>());
    }
    let model_tensors = records
        .iter()
        .filter(|r| !r.name.starts_with(OPTIM_M) && !r.name.starts_with(OPTIM_V));
    for r in model_tensors {
        if !wanted.contains(&r.name) {
            return Err(Error::Checkpoint(format!("checkpoint tensor `{}` has no place in the model", r.name)));
        }
    }
    Ok(())
}

fn check_config<T: Scalar>(model: &MileModel<T>, header: &Header) -> Result<()> {
    let diff = model.config.diff(&header.model);
    if diff.is_empty() {
        Ok(())
    } else {
        Err(Error::ConfigMismatch(diff))
    }
}

fn ensure_plan<T: Scalar>(model: &mut MileModel<T>, plan: Option<&TuningPlan>) -> Result<()> {
    match (model.plan(), plan) {
        (None, Some(p)) => apply_plan(model, p),
        (Some(a), Some(b)) if a != b => Err(Error::Checkpoint(format!("checkpoint plan {b} differs from model plan {a}"))),
        (Some(a), None) => Err(Error::Checkpoint(format!("checkpoint has no plan but model has plan {a}"))),
        _ => Ok(()),
    }
}

/// Builds a model from a full checkpoint. Returns the optimizer when the
/// checkpoint is resumable.
pub fn load<T: Scalar>(path: &Path) -> Result<(MileModel<T>, Option<Resume>)> {
    let (header, records) = read_file(path)?;
    if header.kind != Kind::Full {
        return Err(Error::Checkpoint("adapter checkpoint needs a base model; use load_adapters".into()));
    }
    let mut model = MileModel::new(header.model.clone())?;
    ensure_plan(&mut model, header.plan.as_ref())?;
    copy_tensors(&mut model, Kind::Full, &records)?;
    let opt = restore_optimizer(&header, &records)?;
    Ok((model, opt))
}

/// Loads a full checkpoint into an existing model. The configs must match
/// field for field.
pub fn load_into<T: Scalar>(path: &Path, model: &mut MileModel<T>) -> Result<Option<Resume>> {
    let (header, records) = read_file(path)?;
    check_config(model, &header)?;
    if header.kind != Kind::Full {
        return Err(Error::Checkpoint("adapter checkpoint passed where a full checkpoint is required".into()));
    }
    ensure_plan(model, header.plan.as_ref())?;
    copy_tensors(model, Kind::Full, &records)?;
    restore_optimizer(&header, &records)
}

/// Attaches the checkpoint's plan to a base model, if not yet attached, and
/// copies the adapter tensors in.
pub fn load_adapters<T: Scalar>(path: &Path, model: &mut MileModel<T>) -> Result<()> {
    let (header, records) = read_file(path)?;
    check_config(model, &header)?;
    if header.kind != Kind::Adapters {
        return Err(Error::Checkpoint("expected an adapter checkpoint".into()));
    }
    ensure_plan(model, header.plan.as_ref())?;
    copy_tensors(model, Kind::Adapters, &records)
}
