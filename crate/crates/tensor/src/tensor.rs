use indexmap::IndexMap;

use crate::error::{shape_err, Result, TensorError};
use crate::scalar::Scalar;

/// Dense row-major n-dimensional array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    dims: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if dims.iter().any(|&d| d == 0) {
            return shape_err("tensor", format!("zero-sized dimension in {dims:?}"));
        }
        if numel != data.len() {
            return shape_err(
                "tensor",
                format!("dims {dims:?} hold {numel} values, got {}", data.len()),
            );
        }
        Ok(Self {
            dims,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let numel = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![S::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(dims: &[usize], value: S) -> Self {
        let mut t = Self::zeros(dims);
        t.data.fill(value);
        t
    }

    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> S) -> Self {
        let numel: usize = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: (0..numel).map(f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: S) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(S::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[S]) -> Result<()> {
        if g.len() != self.data.len() {
            return shape_err(
                "accumulate_grad",
                format!("gradient of {} values for tensor {:?}", g.len(), self.dims),
            );
        }
        let buf = self
            .grad
            .get_or_insert_with(|| vec![S::zero(); self.data.len()]);
        for (a, b) in buf.iter_mut().zip(g) {
            *a += *b;
        }
        Ok(())
    }

    pub fn reshaped(mut self, dims: Vec<usize>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if numel != self.data.len() {
            return shape_err(
                "reshape",
                format!("{:?} -> {dims:?} changes element count", self.dims),
            );
        }
        self.dims = dims;
        self.grad = None;
        Ok(self)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|v| T::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
            requires_grad: self.requires_grad,
            grad: self.grad.as_ref().map(|g| {
                g.iter()
                    .map(|v| T::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                    .collect()
            }),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Named learnable tensors in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S: Scalar = f32> {
    entries: IndexMap<String, Tensor<S>>,
    seed: u64,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: IndexMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor<S>) -> Result<usize> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        tensor.set_requires_grad(true);
        let (idx, _) = self.entries.insert_full(name, tensor);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>> {
        self.entries
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<S>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn get_index(&self, idx: usize) -> Option<(&str, &Tensor<S>)> {
        self.entries.get_index(idx).map(|(k, v)| (k.as_str(), v))
    }

    pub fn get_index_mut(&mut self, idx: usize) -> Option<(&str, &mut Tensor<S>)> {
        self.entries
            .get_index_mut(idx)
            .map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.entries.values_mut() {
            t.zero_grad();
        }
    }

    /// True when every gradient buffer is absent or all zeros.
    pub fn grads_are_zero(&self) -> bool {
        self.entries
            .values()
            .all(|t| t.grad().is_none_or(|g| g.iter().all(|v| *v == S::zero())))
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            seed: self.seed,
        }
    }
}
