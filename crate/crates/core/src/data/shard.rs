//! Activation shard file layout (all integers little-endian):
//!
//! ```text
//! "SMXA" | version u32 = 1 | flags u32 = 0 | n u32 | count u64
//! count * n f32, row-major
//! columns u32
//! per column: name_len u32 | name (UTF-8) | type u8 (0 = i64, 1 = f64) | count values
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use super::DataError;
use crate::numerics::Tensor;

pub const SHARD_MAGIC: [u8; 4] = *b"SMXA";
pub const SHARD_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum LabelValues {
    Int(Vec<i64>),
    Real(Vec<f64>),
}

impl LabelValues {
    pub fn len(&self) -> usize {
        match self {
            LabelValues::Int(v) => v.len(),
            LabelValues::Real(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn type_code(&self) -> u8 {
        match self {
            LabelValues::Int(_) => 0,
            LabelValues::Real(_) => 1,
        }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        match self {
            LabelValues::Int(v) => v.iter().map(|&x| x as f64).collect(),
            LabelValues::Real(v) => v.clone(),
        }
    }

    pub fn select(&self, rows: &[usize]) -> LabelValues {
        match self {
            LabelValues::Int(v) => LabelValues::Int(rows.iter().map(|&r| v[r]).collect()),
            LabelValues::Real(v) => LabelValues::Real(rows.iter().map(|&r| v[r]).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelColumn {
    pub name: String,
    pub values: LabelValues,
}

/// A block of `count` activation vectors of width `n`, with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationShard {
    n: usize,
    rows: Vec<f32>,
    labels: Vec<LabelColumn>,
}

impl ActivationShard {
    pub fn new(n: usize, rows: Vec<f32>, labels: Vec<LabelColumn>) -> Result<Self, DataError> {
        if n == 0 {
            return Err(DataError::Invalid("shard dimension must be positive".into()));
        }
        if !rows.len().is_multiple_of(n) {
            return Err(DataError::Invalid(format!(
                "{} values is not a whole number of rows of width {n}",
                rows.len()
            )));
        }
        let count = rows.len() / n;
        for col in &labels {
            if col.values.len() != count {
                return Err(DataError::Invalid(format!(
                    "label column {:?} has {} values for {count} rows",
                    col.name,
                    col.values.len()
                )));
            }
        }
        Ok(Self { n, rows, labels })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn count(&self) -> usize {
        self.rows.len() / self.n
    }

    pub fn rows(&self) -> &[f32] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.n..(i + 1) * self.n]
    }

    pub fn labels(&self) -> &[LabelColumn] {
        &self.labels
    }

    pub fn label(&self, name: &str) -> Option<&LabelValues> {
        self.labels.iter().find(|c| c.name == name).map(|c| &c.values)
    }

    pub fn push_label(&mut self, column: LabelColumn) -> Result<(), DataError> {
        if column.values.len() != self.count() {
            return Err(DataError::Invalid(format!(
                "label column {:?} has {} values for {} rows",
                column.name,
                column.values.len(),
                self.count()
            )));
        }
        self.labels.push(column);
        Ok(())
    }

    /// Stacks shards row-wise. Label columns must agree in name and type.
    pub fn concat(shards: &[ActivationShard]) -> Result<ActivationShard, DataError> {
        let first = shards
            .first()
            .ok_or_else(|| DataError::Contract("nothing to concatenate".into()))?;
        let mut rows = Vec::new();
        let mut labels: Vec<LabelColumn> = first
            .labels
            .iter()
            .map(|c| LabelColumn {
                name: c.name.clone(),
                values: match c.values {
                    LabelValues::Int(_) => LabelValues::Int(Vec::new()),
                    LabelValues::Real(_) => LabelValues::Real(Vec::new()),
                },
            })
            .collect();
        for (k, s) in shards.iter().enumerate() {
            if s.n != first.n {
                return Err(DataError::Contract(format!(
                    "shard {k} has dimension {}, expected {}",
                    s.n, first.n
                )));
            }
            if s.labels.len() != labels.len() {
                return Err(DataError::Contract(format!("shard {k} has a different set of label columns")));
            }
            rows.extend_from_slice(&s.rows);
            for (dst, src) in labels.iter_mut().zip(&s.labels) {
                match (&mut dst.values, &src.values) {
                    (LabelValues::Int(d), LabelValues::Int(v)) if dst.name == src.name => d.extend_from_slice(v),
                    (LabelValues::Real(d), LabelValues::Real(v)) if dst.name == src.name => d.extend_from_slice(v),
                    _ => {
                        return Err(DataError::Contract(format!(
                            "shard {k} label column {:?} does not match {:?}",
                            src.name, dst.name
                        )))
                    }
                }
            }
        }
        ActivationShard::new(first.n, rows, labels)
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[self.count(), self.n], self.rows.clone()).expect("whole rows")
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DataError> {
        if let Some(pos) = self.rows.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite {
                row: pos / self.n,
                col: pos % self.n,
            });
        }
        let mut out = Vec::with_capacity(24 + self.rows.len() * 4);
        out.extend_from_slice(&SHARD_MAGIC);
        out.extend_from_slice(&SHARD_VERSION.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.count() as u64).to_le_bytes());
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.labels.len() as u32).to_le_bytes());
        for col in &self.labels {
            out.extend_from_slice(&(col.name.len() as u32).to_le_bytes());
            out.extend_from_slice(col.name.as_bytes());
            out.push(col.values.type_code());
            match &col.values {
                LabelValues::Int(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                LabelValues::Real(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut r = Cursor::new(bytes);
        let magic: [u8; 4] = take(&mut r, "magic")?;
        if magic != SHARD_MAGIC {
            return Err(DataError::BadMagic(magic));
        }
        let version = u32::from_le_bytes(take(&mut r, "version")?);
        if version != SHARD_VERSION {
            return Err(DataError::UnsupportedVersion(version));
        }
        let flags = u32::from_le_bytes(take(&mut r, "flags")?);
        if flags != 0 {
            return Err(DataError::Invalid(format!("unsupported shard flags {flags:#x}")));
        }
        let n = u32::from_le_bytes(take(&mut r, "dimension")?) as usize;
        let count = u64::from_le_bytes(take(&mut r, "row count")?) as usize;
        let remaining = bytes.len() as u64 - r.position();
        let data_bytes = (count as u64)
            .checked_mul(n as u64 * 4)
            .ok_or_else(|| DataError::Invalid("row block size overflows".into()))?;
        if data_bytes > remaining {
            return Err(DataError::Truncated("row data".into()));
        }
        let mut raw = vec![0u8; data_bytes as usize];
        read_into(&mut r, &mut raw, "row data")?;
        let rows: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();

        let columns = u32::from_le_bytes(take(&mut r, "label column count")?);
        let mut labels = Vec::with_capacity(columns as usize);
        for _ in 0..columns {
            let name_len = u32::from_le_bytes(take(&mut r, "label name length")?) as usize;
            if name_len as u64 > bytes.len() as u64 - r.position() {
                return Err(DataError::Truncated("label name".into()));
            }
            let mut name = vec![0u8; name_len];
            read_into(&mut r, &mut name, "label name")?;
            let name = String::from_utf8(name)
                .map_err(|_| DataError::Invalid("label name is not UTF-8".into()))?;
            let code: [u8; 1] = take(&mut r, "label type")?;
            if (count as u64) * 8 > bytes.len() as u64 - r.position() {
                return Err(DataError::Truncated(format!("label column {name:?}")));
            }
            let values = match code[0] {
                0 => LabelValues::Int(
                    (0..count)
                        .map(|_| take(&mut r, "label value").map(i64::from_le_bytes))
                        .collect::<Result<_, _>>()?,
                ),
                1 => LabelValues::Real(
                    (0..count)
                        .map(|_| take(&mut r, "label value").map(f64::from_le_bytes))
                        .collect::<Result<_, _>>()?,
                ),
                other => {
                    return Err(DataError::Invalid(format!("unknown label type code {other}")))
                }
            };
            labels.push(LabelColumn { name, values });
        }
        if r.position() != bytes.len() as u64 {
            return Err(DataError::Invalid("trailing bytes after label section".into()));
        }
        if n == 0 {
            return Err(DataError::Invalid("shard dimension must be positive".into()));
        }
        Self::new(n, rows, labels)
    }
}

fn read_into(r: &mut Cursor<&[u8]>, buf: &mut [u8], what: &str) -> Result<(), DataError> {
    r.read_exact(buf)
        .map_err(|_| DataError::Truncated(what.to_string()))
}

fn take<const N: usize>(r: &mut Cursor<&[u8]>, what: &str) -> Result<[u8; N], DataError> {
    let mut buf = [0u8; N];
    read_into(r, &mut buf, what)?;
    Ok(buf)
}

pub fn write_shard(shard: &ActivationShard, path: &Path) -> Result<(), DataError> {
    let bytes = shard.to_bytes()?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_shard(path: &Path) -> Result<ActivationShard, DataError> {
    ActivationShard::from_bytes(&fs::read(path)?)
}
