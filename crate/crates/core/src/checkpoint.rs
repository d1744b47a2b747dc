//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `SSLE`, u32 version=1, u32 tensor_count;
//! per tensor: u16 name_len, UTF-8 name, u8 dtype (0=f32, 1=f64, 2=i64),
//! u8 ndim, u32 dims[ndim], raw values; footer: u64 FNV-1a checksum over
//! all preceding bytes.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

use crate::fnv1a64;
use crate::tensor::{Dtype, ParamStore, Real};

pub const MAGIC: &[u8; 4] = b"SSLE";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u32),
    #[error("truncated container")]
    Truncated,
    #[error("payload checksum mismatch")]
    ChecksumMismatch,
    #[error("bad dtype code {0}")]
    BadDtype(u8),
    #[error("duplicate tensor name {0}")]
    DuplicateName(String),
    #[error("unknown tensor name {0}")]
    UnknownName(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name}: shape {got:?}, expected {want:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("tensor {0}: integer values cannot load into a real tensor")]
    DtypeMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorValues {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl TensorValues {
    fn dtype_code(&self) -> u8 {
        match self {
            TensorValues::F32(_) => 0,
            TensorValues::F64(_) => 1,
            TensorValues::I64(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorValues::F32(v) => v.len(),
            TensorValues::F64(v) => v.len(),
            TensorValues::I64(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: TensorValues,
}

impl CheckpointTensor {
    /// Convert to a real array in the working precision. f32 and f64
    /// payloads inter-convert; integer payloads are rejected.
    pub fn to_real<T: Real>(&self) -> Result<ArrayD<T>> {
        let data: Vec<T> = match &self.values {
            TensorValues::F32(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            TensorValues::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
            TensorValues::I64(_) => return Err(CheckpointError::DtypeMismatch(self.name.clone())),
        };
        ArrayD::from_shape_vec(IxDyn(&self.dims), data).map_err(|_| {
            CheckpointError::ShapeMismatch {
                name: self.name.clone(),
                got: vec![self.values.len()],
                want: self.dims.clone(),
            }
        })
    }

    pub fn as_i64(&self) -> Result<&[i64]> {
        match &self.values {
            TensorValues::I64(v) => Ok(v),
            _ => Err(CheckpointError::DtypeMismatch(self.name.clone())),
        }
    }

    pub fn scalar_i64(&self) -> Result<i64> {
        let v = self.as_i64()?;
        v.first().copied().ok_or_else(|| CheckpointError::ShapeMismatch {
            name: self.name.clone(),
            got: self.dims.clone(),
            want: vec![1],
        })
    }
}

/// Named tensor table; ordered, names unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<CheckpointTensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }

    fn check_name(&self, name: &str) -> Result<()> {
        if self.get(name).is_some() {
            return Err(CheckpointError::DuplicateName(name.to_string()));
        }
        Ok(())
    }

    pub fn push_real<T: Real>(&mut self, name: &str, value: &ArrayD<T>) -> Result<()> {
        self.check_name(name)?;
        let std = value.as_standard_layout();
        let values = match T::DTYPE {
            Dtype::F32 => TensorValues::F32(std.iter().map(|v| v.as_f64() as f32).collect()),
            _ => TensorValues::F64(std.iter().map(|v| v.as_f64()).collect()),
        };
        self.tensors.push(CheckpointTensor {
            name: name.to_string(),
            dims: value.shape().to_vec(),
            values,
        });
        Ok(())
    }

    pub fn push_i64(&mut self, name: &str, dims: Vec<usize>, values: Vec<i64>) -> Result<()> {
        self.check_name(name)?;
        self.tensors.push(CheckpointTensor {
            name: name.to_string(),
            dims,
            values: TensorValues::I64(values),
        });
        Ok(())
    }

    pub fn push_i64_scalar(&mut self, name: &str, value: i64) -> Result<()> {
        self.push_i64(name, vec![1], vec![value])
    }

    /// Snapshot every parameter of a store, in registration order.
    pub fn from_store<T: Real>(store: &ParamStore<T>) -> Self {
        let mut ckpt = Self::new();
        for (_, p) in store.iter() {
            ckpt.push_real(&p.name, &p.value)
                .expect("store names are unique");
        }
        ckpt
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.values.dtype_code());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &t.values {
                TensorValues::F32(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorValues::F64(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorValues::I64(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        let checksum = fnv1a64(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(CheckpointError::Truncated);
        }
        let (payload, footer) = bytes.split_at(bytes.len() - 8);
        if payload.len() < 12 {
            return Err(CheckpointError::Truncated);
        }
        if &payload[0..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(payload[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let stored = u64::from_le_bytes(footer.try_into().expect("8 bytes"));
        if fnv1a64(payload) != stored {
            return Err(CheckpointError::ChecksumMismatch);
        }

        let count = u32::from_le_bytes(payload[8..12].try_into().expect("4 bytes")) as usize;
        let mut pos = 12usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > payload.len() {
                return Err(CheckpointError::Truncated);
            }
            let s = &payload[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };

        let mut ckpt = Self::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().expect("2")) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| CheckpointError::Truncated)?;
            let dtype = take(&mut pos, 1)?[0];
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().expect("4")) as usize);
            }
            let len: usize = dims.iter().product();
            let values = match dtype {
                0 => TensorValues::F32(
                    take(&mut pos, len * 4)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
                        .collect(),
                ),
                1 => TensorValues::F64(
                    take(&mut pos, len * 8)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                        .collect(),
                ),
                2 => TensorValues::I64(
                    take(&mut pos, len * 8)?
                        .chunks_exact(8)
                        .map(|c| i64::from_le_bytes(c.try_into().expect("8")))
                        .collect(),
                ),
                other => return Err(CheckpointError::BadDtype(other)),
            };
            ckpt.check_name(&name)?;
            ckpt.tensors.push(CheckpointTensor { name, dims, values });
        }
        if pos != payload.len() {
            return Err(CheckpointError::Truncated);
        }
        Ok(ckpt)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Overwrite every parameter of the store from same-named tensors.
    /// Fails fast on missing tensors or shape mismatches; with `strict`,
    /// container tensors under any of the store's name prefixes that the
    /// store does not know are also an error.
    pub fn apply_to_store<T: Real>(&self, store: &mut ParamStore<T>, strict: bool) -> Result<()> {
        for (_, p) in store.iter() {
            let t = self
                .get(&p.name)
                .ok_or_else(|| CheckpointError::MissingTensor(p.name.clone()))?;
            if t.dims != p.value.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: p.name.clone(),
                    got: t.dims.clone(),
                    want: p.value.shape().to_vec(),
                });
            }
        }
        if strict {
            for t in &self.tensors {
                if t.name.starts_with("meta.") || t.name.starts_with("quantizer.") {
                    continue;
                }
                if store.lookup(&t.name).is_none() {
                    return Err(CheckpointError::UnknownName(t.name.clone()));
                }
            }
        }
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let arr = self.get(&name).expect("checked above").to_real::<T>()?;
            *store.value_mut(id) = arr;
        }
        Ok(())
    }
}
