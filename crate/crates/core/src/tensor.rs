//! Dense row-major `f64` tensors and named parameters.

use std::fmt;

use crate::error::{dim_err, LctrError, Result};

/// Dense N-dimensional array. `grad` is only populated on leaves that
/// require gradients, after a backward pass.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .field("numel", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return dim_err(format!("shape {shape:?} has a zero extent"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return dim_err(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return dim_err(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            ));
        }
        Tensor::new(shape, self.data.clone())
    }

    /// Accumulates `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in comparison");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A trainable tensor with a model-unique name.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor: tensor.with_grad(),
        }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }
}

/// Ordered parameter collection with unique names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(LctrError::Config(format!("duplicate parameter name {name}")));
        }
        self.params.push(Parameter::new(name, tensor));
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Order-sensitive FNV-1a hash over every parameter's bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for b in p.name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
            for v in p.tensor.data() {
                for b in v.to_bits().to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(t.at(&[0, 1, 0]), 4.0);
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros(&[2]).with_grad();
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(t.grad.as_deref(), Some(&[2.0, 4.0][..]));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(&[1])).unwrap();
        assert!(store.add("w", Tensor::zeros(&[1])).is_err());
        assert_eq!(store.count(), 1);
    }
}
