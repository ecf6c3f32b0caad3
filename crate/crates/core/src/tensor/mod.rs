//! Minimal dense-tensor substrate with reverse-mode autodiff.
//!
//! Everything the denoiser needs and nothing more: NCHW `f32`/`f64` tensors,
//! a handful of layer kernels ([`ops`]), a Wengert-list tape ([`tape`]) and a
//! central-difference gradient checker ([`gradcheck`]). Kernels are generic
//! over [`Real`] so the same code runs fast at `f32` and precisely at `f64`.

pub mod gradcheck;
pub mod ops;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{BufId, Tape};

use crate::error::{Error, Result};
use std::collections::HashMap;

/// Scalar element type for tensors. Implemented for `f32` and `f64`.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Copy
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Sum of a slice, accumulated in f64 regardless of element type.
pub fn sum_f64<T: Real>(xs: &[T]) -> f64 {
    xs.iter().map(|x| x.as_f64()).sum()
}

/// Dense rank-4 tensor, `(batch, channels, height, width)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor4 {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    /// Builds from a flat row-major buffer; the length must match the shape.
    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(Error::invalid(format!(
                "tensor data length {} does not match shape {:?} (= {})",
                data.len(),
                shape,
                want
            )));
        }
        Ok(Tensor4 { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline(always)]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        let [_, cc, hh, ww] = self.shape;
        self.data[((b * cc + c) * hh + h) * ww + w]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Maps to a different element type (used to lift f32 data to f64 for
    /// gradient checks).
    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// One named, trainable array with its gradient buffer.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Named parameter arrays plus same-shaped gradient buffers.
///
/// Names are unique; insertion order is the canonical order used for
/// serialization, optimizer state and gradient checking.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, dims: Vec<usize>, data: Vec<T>) -> Result<usize> {
        if self.by_name.contains_key(name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        let want: usize = dims.iter().product();
        if data.len() != want {
            return Err(Error::invalid(format!(
                "parameter {name:?}: data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        let grad = vec![T::zero(); data.len()];
        let idx = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            dims,
            data,
            grad,
        });
        self.by_name.insert(name.to_string(), idx);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }
    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
    pub fn get(&self, idx: usize) -> &Param<T> {
        &self.params[idx]
    }
    pub fn get_mut(&mut self, idx: usize) -> &mut Param<T> {
        &mut self.params[idx]
    }
    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }
    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }
    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Total number of scalar elements across all parameters.
    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// L2 norm of the element-wise difference to another set (same layout).
    pub fn delta_l2(&self, other: &ParamSet<T>) -> f64 {
        let mut acc = 0.0f64;
        for (a, b) in self.params.iter().zip(other.params.iter()) {
            for (x, y) in a.data.iter().zip(b.data.iter()) {
                let d = x.as_f64() - y.as_f64();
                acc += d * d;
            }
        }
        acc.sqrt()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for p in &self.params {
            let data = p.data.iter().map(|v| U::from_f64(v.as_f64())).collect();
            out.add(&p.name, p.dims.clone(), data).expect("unique names");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_indexing_is_row_major() {
        let t = Tensor4::from_vec([1, 2, 2, 3], (0..12).map(|i| i as f32).collect()).unwrap();
        assert_eq!(t.at(0, 0, 0, 0), 0.0);
        assert_eq!(t.at(0, 0, 1, 2), 5.0);
        assert_eq!(t.at(0, 1, 0, 0), 6.0);
        assert_eq!(t.at(0, 1, 1, 1), 10.0);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor4::<f32>::from_vec([1, 1, 2, 2], vec![0.0; 5]).is_err());
    }

    #[test]
    fn paramset_rejects_duplicates_and_bad_dims() {
        let mut ps = ParamSet::<f32>::new();
        ps.add("w", vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(ps.add("w", vec![1], vec![0.0]).is_err());
        assert!(ps.add("b", vec![3], vec![0.0; 2]).is_err());
        assert_eq!(ps.by_name("w").unwrap().grad.len(), 4);
    }
}
