//! `GSSDCKPT` files: magic, u32 version, u32 record count, then records of
//! `{u16 name length, UTF-8 name, u8 rank, u32 dims[rank], f32 data}`, all
//! little-endian. The final record `__config__` holds the run configuration
//! text, one byte per f32 value.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{TrainError, TrainState};
use crate::model::{build_model, Model, ModelConfig, RunningStats};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GSSDCKPT";
const VERSION: u32 = 1;
pub const CONFIG_RECORD: &str = "__config__";
pub const ITER_RECORD: &str = "__iter__";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
    pub config_text: String,
}

fn ckpt_err(path: &Path, msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint { path: path.to_path_buf(), msg: msg.into() }
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, config_text: &str) -> Self {
        let mut records = Vec::new();
        let m = &state.model;
        for p in m.params.iter() {
            records.push(Record { name: p.name.clone(), dims: p.value.shape().to_vec(), data: p.value.data().to_vec() });
        }
        for (slot, name) in m.running_stat_names().into_iter().enumerate() {
            let r = &m.running[slot];
            records.push(Record { name: format!("{name}.running_mean"), dims: vec![r.mean.len()], data: r.mean.clone() });
            records.push(Record { name: format!("{name}.running_var"), dims: vec![r.var.len()], data: r.var.clone() });
        }
        for (p, v) in m.params.iter().zip(&state.velocity) {
            records.push(Record { name: format!("momentum/{}", p.name), dims: p.value.shape().to_vec(), data: v.clone() });
        }
        records.push(Record { name: ITER_RECORD.into(), dims: vec![1], data: vec![state.iter as f32] });
        Checkpoint { records, config_text: config_text.to_string() }
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Rebuilds the training state for `config`, which must describe the
    /// same architecture the checkpoint was written with.
    pub fn to_state(&self, config: &ModelConfig) -> Result<TrainState, TrainError> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut model: Model<f32> = build_model(config, &mut rng)?;
        let missing = |n: &str| TrainError::CheckpointContent(format!("missing record `{n}`"));
        let shaped = |r: &Record, shape: &[usize]| -> Result<(), TrainError> {
            if r.dims != shape {
                return Err(TrainError::CheckpointContent(format!("record `{}` has shape {:?}, model expects {shape:?}", r.name, r.dims)));
            }
            Ok(())
        };
        let mut velocity = Vec::with_capacity(model.params.len());
        for p in model.params.iter_mut() {
            let r = self.get(&p.name).ok_or_else(|| missing(&p.name))?;
            shaped(r, p.value.shape())?;
            p.value = Tensor::new(p.value.shape(), r.data.clone())?;
            let vname = format!("momentum/{}", p.name);
            let v = self.get(&vname).ok_or_else(|| missing(&vname))?;
            shaped(v, p.value.shape())?;
            velocity.push(v.data.clone());
        }
        for (slot, name) in model.running_stat_names().into_iter().enumerate() {
            let c = model.running[slot].mean.len();
            let get = |suffix: &str| -> Result<Vec<f32>, TrainError> {
                let n = format!("{name}.{suffix}");
                let r = self.get(&n).ok_or_else(|| missing(&n))?;
                shaped(r, &[c])?;
                Ok(r.data.clone())
            };
            model.running[slot] = RunningStats { mean: get("running_mean")?, var: get("running_var")? };
        }
        let iter = self.get(ITER_RECORD).ok_or_else(|| missing(ITER_RECORD))?.data[0] as usize;
        let known = model.params.len() * 2 + model.running.len() * 2 + 1;
        if self.records.len() != known {
            return Err(TrainError::CheckpointContent(format!(
                "{} records, model expects {known}",
                self.records.len()
            )));
        }
        Ok(TrainState { model, velocity, iter })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&((self.records.len() + 1) as u32).to_le_bytes());
        let config = Record {
            name: CONFIG_RECORD.into(),
            dims: vec![self.config_text.len()],
            data: self.config_text.bytes().map(f32::from).collect(),
        };
        for r in self.records.iter().chain(std::iter::once(&config)) {
            out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.dims.len() as u8);
            for &d in &r.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self, TrainError> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], TrainError> {
            let s = bytes.get(pos..pos + n).ok_or_else(|| ckpt_err(path, "truncated file"))?;
            pos += n;
            Ok(s)
        };
        if take(8)? != MAGIC {
            return Err(ckpt_err(path, "not a GSSDCKPT checkpoint"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let version = u32_at(take(4)?);
        if version != VERSION {
            return Err(ckpt_err(path, format!("unsupported version {version}")));
        }
        let count = u32_at(take(4)?) as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
            let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| ckpt_err(path, "record name is not UTF-8"))?;
            let rank = take(1)?[0] as usize;
            let dims: Vec<usize> = (0..rank).map(|_| take(4).map(|b| u32_at(b) as usize)).collect::<Result<_, _>>()?;
            let n: usize = dims.iter().product();
            let data = take(n.checked_mul(4).ok_or_else(|| ckpt_err(path, "record too large"))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            records.push(Record { name, dims, data });
        }
        if pos != bytes.len() {
            return Err(ckpt_err(path, "trailing bytes after last record"));
        }
        let config = records.pop().filter(|r| r.name == CONFIG_RECORD).ok_or_else(|| ckpt_err(path, "last record is not __config__"))?;
        let config_bytes: Vec<u8> = config
            .data
            .iter()
            .map(|&v| (v >= 0.0 && v <= 255.0 && v.fract() == 0.0).then_some(v as u8))
            .collect::<Option<_>>()
            .ok_or_else(|| ckpt_err(path, "__config__ holds non-byte values"))?;
        let config_text = String::from_utf8(config_bytes).map_err(|_| ckpt_err(path, "__config__ is not UTF-8"))?;
        Ok(Checkpoint { records, config_text })
    }

    /// Writes through a temporary file so an interrupted save never replaces
    /// the previous checkpoint with a partial one.
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let io = |source| TrainError::Io { path: path.to_path_buf(), source };
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(path, &bytes)
    }
}
