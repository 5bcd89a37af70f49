//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! | field            | encoding                                       |
//! |------------------|------------------------------------------------|
//! | magic            | 4 bytes `KTCK`                                 |
//! | format_version   | `u32` (currently 1)                            |
//! | model_kind       | `u32` byte length, UTF-8 bytes                 |
//! | config           | `u32` byte length, UTF-8 JSON document         |
//! | tensor_count     | `u32`                                          |
//! | tensor (repeat)  | name (`u32` length + UTF-8), rank `u32`,       |
//! |                  | `rank` dims as `u64`, values as `f64` in       |
//! |                  | row-major order                                |
//!
//! Nothing follows the last tensor; trailing bytes are rejected.

use std::io::{Read, Write};

use crate::error::{KtError, Result};
use crate::numerics::{ParamSet, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"KTCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_kind: String,
    pub config: String,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(model_kind: impl Into<String>, config: impl Into<String>) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            model_kind: model_kind.into(),
            config: config.into(),
            tensors: Vec::new(),
        }
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        self.tensors.push(NamedTensor {
            name: name.into(),
            shape: tensor.shape().to_vec(),
            values: tensor.to_f64_vec(),
        });
    }

    pub fn push_params<T: Scalar>(&mut self, params: &ParamSet<T>) {
        for (name, t) in params.iter() {
            self.push(name, t);
        }
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let nt = self
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| KtError::Checkpoint(format!("missing tensor `{name}`")))?;
        Tensor::new(
            nt.shape.clone(),
            nt.values.iter().map(|&v| T::of(v)).collect(),
        )
    }

    /// Overwrites every parameter in `params` with the same-named stored tensor.
    pub fn load_params<T: Scalar>(&self, params: &mut ParamSet<T>) -> Result<()> {
        let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let stored = self.tensor::<T>(&name)?;
            let target = params.by_name_mut(&name).expect("name from the same set");
            if stored.shape() != target.shape() {
                return Err(KtError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    stored.shape(),
                    target.shape()
                )));
            }
            target.data_mut().copy_from_slice(stored.data());
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.format_version.to_le_bytes())?;
        write_str(&mut w, &self.model_kind)?;
        write_str(&mut w, &self.config)?;
        w.write_all(&len_u32(self.tensors.len())?.to_le_bytes())?;
        for t in &self.tensors {
            write_str(&mut w, &t.name)?;
            w.write_all(&len_u32(t.shape.len())?.to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in &t.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out)
            .expect("writing to memory cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Checkpoint::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(KtError::Checkpoint("bad magic".into()));
        }
        let format_version = cur.u32()?;
        if format_version != FORMAT_VERSION {
            return Err(KtError::Checkpoint(format!(
                "unsupported format version {format_version}"
            )));
        }
        let model_kind = cur.string()?;
        let config = cur.string()?;
        let count = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name = cur.string()?;
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(cur.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            if n.checked_mul(8).is_none_or(|b| b > bytes.len()) {
                return Err(KtError::Checkpoint(format!("tensor `{name}` is truncated")));
            }
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                values.push(f64::from_le_bytes(
                    cur.take(8)?.try_into().expect("8 bytes"),
                ));
            }
            tensors.push(NamedTensor {
                name,
                shape,
                values,
            });
        }
        if cur.pos != bytes.len() {
            return Err(KtError::Checkpoint(
                "trailing bytes after last tensor".into(),
            ));
        }
        Ok(Checkpoint {
            format_version,
            model_kind,
            config,
            tensors,
        })
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| KtError::Checkpoint(format!("length {n} exceeds u32")))
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&len_u32(s.len())?.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| KtError::Checkpoint("unexpected end of data".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| KtError::Checkpoint("string is not UTF-8".into()))
    }
}
