//! Binary checkpoint format.
//!
//! ```text
//! magic "AJCK" | u32 version | u32 header_len | header (UTF-8 JSON)
//! u32 param_count
//!   per parameter: u32 name_len | name | u32 ndim | ndim * u32 dims | f32 values
//! u8 has_optimizer
//!   if 1: u64 step | u32 count
//!         per slot: u32 param_index | f32 first moment | f32 second moment
//! ```
//!
//! All integers and floats are little-endian; moments have the shape of
//! the parameter they belong to.

use std::fs;
use std::path::Path;

use diffcore::{AdamConfig, AdamW, ParamId, Tensor};
use serde::{Deserialize, Serialize};

use crate::baselines::AnyModel;
use crate::datastore::{write_file, NormStats};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelKind};
use crate::trainer::{Progress, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AJCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHeader {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<AdamConfig> for AdamHeader {
    fn from(c: AdamConfig) -> Self {
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
            weight_decay: c.weight_decay,
        }
    }
}

impl From<AdamHeader> for AdamConfig {
    fn from(h: AdamHeader) -> Self {
        AdamConfig {
            lr: h.lr,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            weight_decay: h.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub norm: NormStats,
    pub progress: Progress,
    pub optimizer: Option<AdamHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: AnyModel,
    pub optimizer: Option<AdamW<f32>>,
    pub train: Option<TrainConfig>,
    pub progress: Progress,
}

impl Checkpoint {
    pub fn of_model(model: AnyModel) -> Self {
        Self {
            model,
            optimizer: None,
            train: None,
            progress: Progress::default(),
        }
    }
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        kind: ck.model.kind(),
        model: ck.model.config().clone(),
        train: ck.train.clone(),
        norm: ck.model.norm().clone(),
        progress: ck.progress.clone(),
        optimizer: ck.optimizer.as_ref().map(|o| AdamHeader::from(*o.config())),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Integrity(e.to_string()))?;
    let store = ck.model.store();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut buf, json.len());
    buf.extend_from_slice(&json);
    put_u32(&mut buf, store.len());
    for (_, name, t) in store.iter() {
        put_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape().len());
        for &d in t.shape() {
            put_u32(&mut buf, d);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    match &ck.optimizer {
        None => buf.push(0),
        Some(opt) => {
            buf.push(1);
            buf.extend_from_slice(&opt.step_count().to_le_bytes());
            put_u32(&mut buf, opt.params().len());
            let (m, v) = opt.moments();
            for ((&pid, m), v) in opt.params().iter().zip(m).zip(v) {
                put_u32(&mut buf, pid.0);
                for x in m.data().iter().chain(v.data()) {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    Ok(buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Integrity("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Integrity("size overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Decodes a checkpoint; with `expected` set, a different model kind is an
/// error.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<ModelKind>) -> Result<Checkpoint> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Integrity("not a checkpoint (bad magic)".into()));
    }
    let version = c.u32()? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version.to_string(),
            expected: CHECKPOINT_VERSION.to_string(),
        });
    }
    let hlen = c.u32()?;
    let header: CheckpointHeader = serde_json::from_slice(c.take(hlen)?)
        .map_err(|e| Error::Integrity(format!("checkpoint header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: header.format_version.to_string(),
            expected: CHECKPOINT_VERSION.to_string(),
        });
    }
    if let Some(k) = expected {
        if k != header.kind {
            return Err(Error::ModelKind {
                found: header.kind.name().into(),
                expected: k.name().into(),
            });
        }
    }
    let mut model = AnyModel::init(&header.model, header.kind, 0)?;
    model.set_norm(header.norm.clone());
    let count = c.u32()?;
    if count != model.store().len() {
        return Err(Error::Integrity(format!(
            "checkpoint has {count} parameters, model has {}",
            model.store().len()
        )));
    }
    for i in 0..count {
        let nlen = c.u32()?;
        let name = std::str::from_utf8(c.take(nlen)?)
            .map_err(|_| Error::Integrity("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = c.u32()?;
        let shape = (0..ndim).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let id = ParamId(i);
        if model.store().name(id) != name || model.store().get(id).shape() != shape.as_slice() {
            return Err(Error::Integrity(format!(
                "parameter {i} is `{name}` {shape:?}, expected `{}` {:?}",
                model.store().name(id),
                model.store().get(id).shape()
            )));
        }
        let numel = shape.iter().product();
        let t = Tensor::new(shape, c.f32s(numel)?)?;
        model.store_mut().set(id, t)?;
    }
    let optimizer = match c.take(1)?[0] {
        0 => None,
        1 => {
            let step = c.u64()?;
            let n = c.u32()?;
            let mut params = Vec::with_capacity(n);
            let mut first = Vec::with_capacity(n);
            let mut second = Vec::with_capacity(n);
            for _ in 0..n {
                let idx = c.u32()?;
                if idx >= model.store().len() {
                    return Err(Error::Integrity(format!("optimizer slot for parameter {idx}")));
                }
                let shape = model.store().get(ParamId(idx)).shape().to_vec();
                let numel = shape.iter().product();
                params.push(ParamId(idx));
                first.push(Tensor::new(shape.clone(), c.f32s(numel)?)?);
                second.push(Tensor::new(shape, c.f32s(numel)?)?);
            }
            let cfg = header
                .optimizer
                .ok_or_else(|| Error::Integrity("optimizer state without settings".into()))?;
            Some(AdamW::from_parts(cfg.into(), step, params, first, second)?)
        }
        b => return Err(Error::Integrity(format!("optimizer flag {b}"))),
    };
    if c.pos != bytes.len() {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - c.pos
        )));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        train: header.train,
        progress: header.progress,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_file(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path, expected: Option<ModelKind>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}
