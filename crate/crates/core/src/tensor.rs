//! Dense row-major tensors of `f64`.
//!
//! Every reduction and matrix product accumulates sequentially in ascending
//! flat-index order, so results are reproducible bit for bit. This matters once
//! intrinsic quantization makes addition non-associative.

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Max,
    /// Index of the maximum; ties resolve to the lowest index.
    ArgMax,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("rank exceeds {MAX_RANK}"),
            });
        }
        if shape.contains(&0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "dimensions must be positive".into(),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {expected} elements, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Self> {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<(usize, f64)> {
        self.data
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite())
            .map(|(i, &v)| (i, v))
    }

    pub fn check_finite(&self, name: &str) -> Result<()> {
        match self.first_non_finite() {
            Some((index, value)) => Err(Error::NonFinite {
                value,
                index,
                context: Some(name.to_string()),
            }),
            None => Ok(()),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise binary op. Shapes must match exactly, except that either
    /// operand may be a single-element tensor which is broadcast.
    pub fn elementwise(&self, op: BinaryOp, other: &Tensor) -> Result<Tensor> {
        let apply = |a: f64, b: f64| match op {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Max => a.max(b),
        };
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| apply(a, b)).collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        if other.data.len() == 1 {
            let b = other.data[0];
            return Ok(self.map(|a| apply(a, b)));
        }
        if self.data.len() == 1 {
            let a = self.data[0];
            return Ok(other.map(|b| apply(a, b)));
        }
        Err(Error::ShapeMismatch {
            op: "elementwise",
            left: self.shape.clone(),
            right: other.shape.clone(),
        })
    }

    /// `[m, k] x [k, n] -> [m, n]`, each output accumulated over ascending `k`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.data[i * k..(i + 1) * k];
            let acc = &mut out[i * n..(i + 1) * n];
            // Row-wise update keeps each output's sum in ascending-k order.
            for (p, &a) in row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in acc.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Reduce along `axis`, removing that dimension.
    pub fn reduce(&self, op: ReduceOp, axis: usize) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("reduction axis {axis} out of range"),
            });
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| self.data[(o * len + j) * inner + i];
                let v = match op {
                    ReduceOp::Sum => (0..len).fold(0.0, |acc, j| acc + at(j)),
                    ReduceOp::Max => (1..len).fold(at(0), |acc, j| acc.max(at(j))),
                    ReduceOp::ArgMax => {
                        let mut best = 0;
                        for j in 1..len {
                            if at(j) > at(best) {
                                best = j;
                            }
                        }
                        best as f64
                    }
                };
                data.push(v);
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Tensor { shape, data })
    }

    /// Rows `start..end` along the leading (batch) dimension.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.rank() == 0 || start >= end || end > self.shape[0] {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: format!("batch slice {start}..{end} out of range"),
            });
        }
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor {
            shape,
            data: self.data[start * row..end * row].to_vec(),
        })
    }

    /// Gather rows along the leading dimension.
    pub fn gather_batch(&self, indices: &[usize]) -> Result<Tensor> {
        if self.rank() == 0 || indices.is_empty() {
            return Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "cannot gather an empty batch".into(),
            });
        }
        let row: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= self.shape[0] {
                return Err(Error::InvalidShape {
                    shape: self.shape.clone(),
                    reason: format!("batch index {i} out of range"),
                });
            }
            data.extend_from_slice(&self.data[i * row..(i + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor { shape, data })
    }
}
