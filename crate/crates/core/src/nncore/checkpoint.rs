//! Binary checkpoint: magic `GRNK`, u32 version, length-prefixed JSON model
//! config, u32 record count, then per tensor `(u32 name length, name,
//! u8 dtype, u32 rank, u32 dims…, little-endian row-major data)`, and a
//! trailing CRC32 over everything before it.

use std::path::Path;

use super::{Model, ModelConfig, ModelParams, Precision};
use crate::datagen::CatalogMatrix;
use crate::error::{Error, Result};
use crate::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GRNK";
pub const CHECKPOINT_VERSION: u32 = 1;

const SIDE_TENSOR: &str = "frozen.side";

/// A checkpointed model of either precision.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

impl AnyModel {
    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::F32(m) => &m.config,
            AnyModel::F64(m) => &m.config,
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record<T: Scalar>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[T]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE);
    put_u32(out, shape.len() as u32);
    for d in shape {
        put_u32(out, *d as u32);
    }
    for v in data {
        v.write_le(out);
    }
}

pub fn write_checkpoint<S: Scalar>(model: &Model<S>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    let config = serde_json::to_vec(&model.config)?;
    put_u32(&mut out, config.len() as u32);
    out.extend_from_slice(&config);
    let tensors = model.params.tensors();
    put_u32(&mut out, (tensors.len() + usize::from(model.side.is_some())) as u32);
    for (name, t) in tensors {
        put_record(&mut out, &name, t.shape(), t.data());
    }
    if let Some(side) = &model.side {
        put_record(&mut out, SIDE_TENSOR, &[side.rows, side.dim], &side.data);
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

struct Record<'a> {
    name: String,
    dtype: u8,
    shape: Vec<usize>,
    data: &'a [u8],
}

fn dtype_width(code: u8) -> Result<usize> {
    match code {
        c if c == f32::DTYPE => Ok(4),
        c if c == f64::DTYPE => Ok(8),
        c => Err(Error::Checkpoint(format!("unknown dtype code {c}"))),
    }
}

fn decode<S: Scalar>(config: ModelConfig, records: Vec<Record<'_>>) -> Result<Model<S>> {
    config.validate()?;
    let mut params = ModelParams::<S>::zeros(&config);
    let mut side = None;
    let mut slots = params.tensors_mut();
    let mut filled = 0;
    for rec in records {
        if rec.name == SIDE_TENSOR {
            if rec.dtype != f32::DTYPE || rec.shape.len() != 2 {
                return Err(Error::Checkpoint("malformed side embedding record".into()));
            }
            side = Some(CatalogMatrix {
                rows: rec.shape[0],
                dim: rec.shape[1],
                data: rec.data.chunks_exact(4).map(f32::read_le).collect(),
            });
            continue;
        }
        let Some((_, slot)) = slots.iter_mut().find(|(n, _)| *n == rec.name) else {
            return Err(Error::Checkpoint(format!("unexpected tensor `{}`", rec.name)));
        };
        if slot.shape() != rec.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has shape {:?}, config implies {:?}",
                rec.name,
                rec.shape,
                slot.shape()
            )));
        }
        if rec.dtype != S::DTYPE {
            return Err(Error::Checkpoint(format!("tensor `{}` dtype does not match precision", rec.name)));
        }
        let data = rec.data.chunks_exact(S::BYTES).map(S::read_le).collect();
        **slot = Tensor::from_vec(&rec.shape, data);
        filled += 1;
    }
    if filled != slots.len() {
        return Err(Error::Checkpoint(format!("{} of {} tensors present", filled, slots.len())));
    }
    drop(slots);
    let model = Model {
        config,
        params,
        side: None,
    };
    match side {
        Some(s) => model.with_side(s),
        None => Ok(model),
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<AnyModel> {
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("CRC mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let clen = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(clen)?)?;
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let dtype = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r.take(n * dtype_width(dtype)?)?;
        records.push(Record {
            name,
            dtype,
            shape,
            data,
        });
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor records".into()));
    }
    match config.precision {
        Precision::Fp32 => decode::<f32>(config, records).map(AnyModel::F32),
        Precision::Fp64 => decode::<f64>(config, records).map(AnyModel::F64),
    }
}

pub fn save_checkpoint<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<AnyModel> {
    read_checkpoint(&std::fs::read(path)?)
}

impl<S: Scalar> Model<S> {
    /// Decodes a checkpoint whose precision matches `S`.
    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let any = read_checkpoint(bytes)?;
        let boxed: Box<dyn std::any::Any> = match any {
            AnyModel::F32(m) => Box::new(m),
            AnyModel::F64(m) => Box::new(m),
        };
        boxed
            .downcast::<Model<S>>()
            .map(|m| *m)
            .map_err(|_| Error::Checkpoint("checkpoint precision differs from requested scalar".into()))
    }
}
