//! Plain immutable tensors: a shape plus shared storage. These carry no
//! gradient bookkeeping; the autodiff graph wraps them.

use std::sync::Arc;

use super::elem::Elem;

/// Immutable n-dimensional tensor. Cloning is cheap (shared storage).
#[derive(Clone, Debug)]
pub struct Value<E> {
    dims: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Elem> Value<E> {
    pub fn new(dims: Vec<usize>, data: Vec<E>) -> Self {
        let numel: usize = dims.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "value data length {} does not match dims {:?}",
            data.len(),
            dims
        );
        Value {
            dims,
            data: Arc::new(data),
        }
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let numel: usize = dims.iter().product();
        Value::new(dims, vec![E::ZERO; numel])
    }

    pub fn full(dims: Vec<usize>, v: E) -> Self {
        let numel: usize = dims.iter().product();
        Value::new(dims, vec![v; numel])
    }

    pub fn scalar(v: E) -> Self {
        Value::new(vec![1], vec![v])
    }

    pub fn from_f64_slice(dims: Vec<usize>, data: &[f64]) -> Self {
        Value::new(dims, data.iter().map(|&x| E::from_f64(x)).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Mutable access with copy-on-write: clones the storage only if some
    /// graph still shares it.
    pub fn make_mut(&mut self) -> &mut Vec<E> {
        std::sync::Arc::make_mut(&mut self.data)
    }

    /// Same storage, new dims (must preserve element count).
    pub fn reshaped(&self, dims: Vec<usize>) -> Self {
        let numel: usize = dims.iter().product();
        assert_eq!(numel, self.data.len(), "reshape to {:?} changes numel", dims);
        Value {
            dims,
            data: Arc::clone(&self.data),
        }
    }

    /// Dimensions interpreted as NCHW. Panics if not 4-d.
    pub fn nchw(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.dims.len(), 4, "expected 4-d tensor, got {:?}", self.dims);
        (self.dims[0], self.dims[1], self.dims[2], self.dims[3])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
