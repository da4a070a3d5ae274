//! Dense row-major tensors and the reverse-mode autodiff engine built on them.
//!
//! Image batches use NCHW layout and convolution weights OIHW throughout.

mod checkpoint;
mod graph;
mod kernels;
mod params;

pub use checkpoint::{content_hash, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{Graph, Var};
pub use params::{BoundParams, ParamEntry, ParamSet};

use crate::error::{NiceError, Result};

/// Dense numeric array with an optional accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(NiceError::shape("tensor", format!("zero extent in {shape:?}")));
        }
        if n != values.len() {
            return Err(NiceError::shape(
                "tensor",
                format!("shape {shape:?} holds {n} values, got {}", values.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![value; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: (0..n).map(&mut f).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.values.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient with absent storage read as zeros.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad.clone().unwrap_or_else(|| vec![0.0; self.values.len()])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn accumulate_grad(&mut self, grad: &[f64]) {
        assert_eq!(grad.len(), self.values.len());
        match self.grad.as_mut() {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            None => self.grad = Some(grad.to_vec()),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.values.len() || shape.contains(&0) {
            return Err(NiceError::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        self.grad = None;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    /// Copy of entry `index` along the leading axis, keeping a leading extent of one.
    pub fn select_first(&self, index: usize) -> Result<Self> {
        self.slice_first(index, index + 1)
    }

    /// Entries `start..end` along the leading axis.
    pub fn slice_first(&self, start: usize, end: usize) -> Result<Self> {
        let lead = *self.shape.first().ok_or_else(|| NiceError::shape("slice", "scalar tensor"))?;
        if start >= end || end > lead {
            return Err(NiceError::shape(
                "slice",
                format!("range {start}..{end} outside leading extent {lead}"),
            ));
        }
        let stride = self.values.len() / lead;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(&shape, self.values[start * stride..end * stride].to_vec())
    }

    /// Gathers rows of the leading axis in the given order.
    pub fn gather_first(&self, indices: &[usize]) -> Result<Self> {
        let lead = *self.shape.first().ok_or_else(|| NiceError::shape("gather", "scalar tensor"))?;
        let stride = self.values.len() / lead;
        let mut values = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= lead {
                return Err(NiceError::shape("gather", format!("index {i} >= {lead}")));
            }
            values.extend_from_slice(&self.values[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(&shape, values)
    }

    /// Concatenates tensors along the leading axis.
    pub fn concat_first(parts: &[Tensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| NiceError::shape("concat", "no tensors"))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut values = Vec::new();
        for p in parts {
            if p.shape.len() != first.shape.len() || &p.shape[1..] != tail {
                return Err(NiceError::shape(
                    "concat",
                    format!("{:?} vs {:?}", p.shape, first.shape),
                ));
            }
            lead += p.shape[0];
            values.extend_from_slice(&p.values);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Tensor::new(&shape, values)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Split of a rank-4 NCHW shape.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(NiceError::shape("nchw", format!("expected rank 4, got {:?}", self.shape))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        assert_eq!(Tensor::scalar(3.0).numel(), 1);
    }

    #[test]
    fn gather_and_concat() {
        let t = Tensor::from_fn(&[3, 2], |i| i as f64);
        let g = t.gather_first(&[2, 0]).unwrap();
        assert_eq!(g.values(), &[4.0, 5.0, 0.0, 1.0]);
        let c = Tensor::concat_first(&[g.clone(), t.select_first(1).unwrap()]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.values(), &[4.0, 5.0, 0.0, 1.0, 2.0, 3.0]);
        assert!(t.gather_first(&[3]).is_err());
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros(&[2]);
        assert_eq!(t.grad_or_zeros(), vec![0.0, 0.0]);
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[1.0, 2.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }
}
