//! Uniform named-tensor view over every parameter-bearing type.
//!
//! Gradients reuse the parameter types themselves, so clipping, SGD updates,
//! checkpoints and the asynchronous store all walk the same tensor list.

use crate::numerics::{Matrix, Vector};

pub struct TensorRef<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a mut [f64],
}

impl<'a> TensorRef<'a> {
    pub fn matrix(name: impl Into<String>, m: &'a Matrix) -> Self {
        TensorRef {
            name: name.into(),
            rows: m.rows(),
            cols: m.cols(),
            data: m.as_slice(),
        }
    }

    /// Vectors are stored as single-column tensors.
    pub fn vector(name: impl Into<String>, v: &'a Vector) -> Self {
        TensorRef {
            name: name.into(),
            rows: v.len(),
            cols: 1,
            data: v,
        }
    }
}

impl<'a> TensorMut<'a> {
    pub fn matrix(name: impl Into<String>, m: &'a mut Matrix) -> Self {
        TensorMut {
            name: name.into(),
            rows: m.rows(),
            cols: m.cols(),
            data: m.as_mut_slice(),
        }
    }

    pub fn vector(name: impl Into<String>, v: &'a mut Vector) -> Self {
        TensorMut {
            name: name.into(),
            rows: v.len(),
            cols: 1,
            data: v,
        }
    }
}

pub trait Parameters {
    fn tensors(&self) -> Vec<TensorRef<'_>>;

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.tensors() {
            out.extend_from_slice(t.data);
        }
        out
    }

    /// Overwrite all parameters from a flat vector in `tensors()` order.
    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// `self += other`, tensor by tensor. Panics on structural mismatch.
    fn accumulate(&mut self, other: &Self)
    where
        Self: Sized,
    {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            assert_eq!(dst.data.len(), src.data.len(), "tensor {}", dst.name);
            for (a, b) in dst.data.iter_mut().zip(src.data) {
                *a += b;
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum()
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, mut ts: Vec<TensorRef<'a>>) -> Vec<TensorRef<'a>> {
    for t in &mut ts {
        t.name = format!("{prefix}.{}", t.name);
    }
    ts
}

pub(crate) fn prefixed_mut<'a>(prefix: &str, mut ts: Vec<TensorMut<'a>>) -> Vec<TensorMut<'a>> {
    for t in &mut ts {
        t.name = format!("{prefix}.{}", t.name);
    }
    ts
}
