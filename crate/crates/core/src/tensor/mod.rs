//! Minimal dense n-dimensional tensors with reverse-mode differentiation.
//!
//! The design is define-by-run: every forward op pushes a node holding its
//! value and a backward closure onto an explicit [`Graph`]; calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and
//! accumulates gradients into every reachable node. The graph is rebuilt
//! each step, and element precision is generic over [`Real`] so training
//! can run in f32 while all verification runs in f64.

mod gradcheck;
mod graph;
mod optim;

pub use gradcheck::{finite_diff_check, run_op_checks, GradCheckReport, DEFAULT_FD_EPS};
pub use graph::{Graph, Var};
pub use optim::{clip_global_norm, AdamConfig, AdamState, GradBuffer};

use std::collections::BTreeMap;

use ndarray::{ArrayD, ScalarOperand};
use num_traits::Float;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("{op}: non-finite output")]
    NonFinite { op: &'static str },
    #[error("cosine similarity undefined for zero-norm input")]
    ZeroNorm,
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("backward target must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Checkpoint element types.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    I64,
}

/// Scalar element of tensors: f32 for speed, f64 for verification.
pub trait Real:
    Float
    + ScalarOperand
    + ndarray::LinalgScalar
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Convert an f64 array into the working precision.
pub fn array_from_f64<T: Real>(a: &ArrayD<f64>) -> ArrayD<T> {
    a.mapv(T::from_f64)
}

pub fn array_to_f64<T: Real>(a: &ArrayD<T>) -> ArrayD<f64> {
    a.mapv(|v| v.as_f64())
}

/// Named trainable tensor.
#[derive(Debug, Clone)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub value: ArrayD<T>,
}

/// Stable identifier of a parameter within one [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Registry of all trainable tensors of a model, in registration order.
/// Names are unique and determine checkpoint placement.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Real> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, value: ArrayD<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.to_string(), id.0);
        self.params.push(Parameter {
            name: name.to_string(),
            value,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.params[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn store_rejects_duplicate_names() {
        let mut store = ParamStore::<f64>::new();
        store
            .register("w", ArrayD::zeros(IxDyn(&[2, 2])))
            .unwrap();
        assert!(matches!(
            store.register("w", ArrayD::zeros(IxDyn(&[1]))),
            Err(TensorError::DuplicateParam(_))
        ));
        assert!(store.lookup("w").is_some());
        assert!(store.lookup("missing").is_none());
    }
}
