//! Checkpoint file layout (all integers little-endian):
//!
//! ```text
//! "SMXC" | version u32 | header_len u32 | header JSON (UTF-8)
//! for W_e, b_e, W_b, W_ub, W_d, b_d:  byte_len u64 | f32 * (byte_len / 4)
//! t f64
//! has_optimizer u8
//! if has_optimizer: step u64, then for each tensor in the same order:
//!     m (byte_len u64 | f32...), v (byte_len u64 | f32...)
//! ```

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, ParamName, ParamSet, SmixaeConfig, SmixaeParams};
use crate::numerics::{AdamState, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SMXC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Input normalization applied before encoding: `(x - mean) * scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub scale: f32,
}

impl Normalization {
    pub fn apply_row(&self, row: &mut [f32]) {
        for (v, m) in row.iter_mut().zip(&self.mean) {
            *v = (*v - m) * self.scale;
        }
    }

    pub fn apply(&self, batch: &mut Tensor<f32>) {
        let rows = batch.rows();
        for r in 0..rows {
            self.apply_row(batch.row_mut(r));
        }
    }
}

/// JSON header stored in every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: SmixaeConfig,
    #[serde(default)]
    pub normalization: Option<Normalization>,
    /// Effective training run config, when the checkpoint came from training.
    #[serde(default)]
    pub training: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    /// One state per tensor, in [`ParamName::ALL`] order.
    pub states: Vec<AdamState<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: SmixaeParams<f32>,
    pub optimizer: Option<OptimizerState>,
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.extend_from_slice(&((t.len() * 4) as u64).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        self.params.tensors.check_shapes(&self.meta.model)?;
        let header = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(self.params.tensors.scalar_count() * 4 + header.len() + 64);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for name in ParamName::ALL {
            put_tensor(&mut out, self.params.tensors.get(name));
        }
        out.extend_from_slice(&self.params.t.to_le_bytes());
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                out.extend_from_slice(&opt.step.to_le_bytes());
                for state in &opt.states {
                    put_tensor(&mut out, &state.m);
                    put_tensor(&mut out, &state.v);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(ModelError::BadMagic(magic));
        }
        let version = read_u32(&mut r, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::UnsupportedVersion(version));
        }
        let header_len = read_u32(&mut r, "header length")? as usize;
        let mut header = vec![0u8; header_len];
        read_exact(&mut r, &mut header, "header")?;
        let meta: CheckpointMeta = serde_json::from_slice(&header)?;
        meta.model.validate()?;

        let mut tensors = ParamSet::<f32>::zeros(&meta.model);
        for name in ParamName::ALL {
            let shape = name.shape(&meta.model);
            *tensors.get_mut(name) = read_tensor(&mut r, &shape, name.as_str())?;
        }
        let t = f64::from_le_bytes(read_array(&mut r, "threshold")?);
        let params = SmixaeParams { tensors, t };

        let flag = read_array::<1>(&mut r, "optimizer flag")?[0];
        let optimizer = match flag {
            0 => None,
            _ => {
                let step = u64::from_le_bytes(read_array(&mut r, "optimizer step")?);
                let mut states = Vec::with_capacity(ParamName::ALL.len());
                for name in ParamName::ALL {
                    let shape = name.shape(&meta.model);
                    let m = read_tensor(&mut r, &shape, name.as_str())?;
                    let v = read_tensor(&mut r, &shape, name.as_str())?;
                    states.push(AdamState { m, v, step });
                }
                Some(OptimizerState { step, states })
            }
        };
        Ok(Self {
            meta,
            params,
            optimizer,
        })
    }
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8], what: &str) -> Result<(), ModelError> {
    r.read_exact(buf)
        .map_err(|_| ModelError::Truncated(format!("while reading {what}")))
}

fn read_array<const N: usize>(r: &mut Cursor<&[u8]>, what: &str) -> Result<[u8; N], ModelError> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf, what)?;
    Ok(buf)
}

fn read_u32(r: &mut Cursor<&[u8]>, what: &str) -> Result<u32, ModelError> {
    Ok(u32::from_le_bytes(read_array(r, what)?))
}

fn read_tensor(r: &mut Cursor<&[u8]>, shape: &[usize], what: &str) -> Result<Tensor<f32>, ModelError> {
    let byte_len = u64::from_le_bytes(read_array(r, what)?) as usize;
    let want: usize = shape.iter().product::<usize>() * 4;
    if byte_len != want {
        return Err(ModelError::Shape(format!(
            "{what}: stored {byte_len} bytes, config implies {want}"
        )));
    }
    let mut raw = vec![0u8; byte_len];
    read_exact(r, &mut raw, what)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::from_vec(shape, data).expect("length checked"))
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let bytes = ckpt.to_bytes()?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}
