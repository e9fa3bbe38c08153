//! Dense row-major tensor used as the value type of tape nodes.
//!
//! Everything in this library is either a scalar (1x1), a column vector (n x 1),
//! or a weight matrix (m x n). Data is stored row-major to match the on-disk
//! checkpoint layout.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor size mismatch");
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn vector(values: &[f64]) -> Self {
        Tensor { rows: values.len(), cols: 1, data: values.to_vec() }
    }

    /// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    pub fn init_uniform(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor { rows, cols, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn is_vector(&self) -> bool {
        self.cols == 1
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Entry accessor for matrices; row-major.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// y = A x for a (m x n) matrix and (n x 1) vector.
    pub fn matvec(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols != 1 || self.cols != x.rows {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                detail: format!("({}x{}) * ({}x{})", self.rows, self.cols, x.rows, x.cols),
            });
        }
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x.data.iter()) {
                acc += a * b;
            }
            out[r] = acc;
        }
        Ok(Tensor { rows: self.rows, cols: 1, data: out })
    }

    /// y = A^T x for a (m x n) matrix and (m x 1) vector.
    pub fn matvec_t(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols != 1 || self.rows != x.rows {
            return Err(Error::ShapeMismatch {
                op: "matvec_t",
                detail: format!("({}x{})^T * ({}x{})", self.rows, self.cols, x.rows, x.cols),
            });
        }
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let xv = x.data[r];
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, a) in out.iter_mut().zip(row.iter()) {
                *o += a * xv;
            }
        }
        Ok(Tensor { rows: self.cols, cols: 1, data: out })
    }

    /// Accumulates the outer product a b^T into self; used for matrix gradients.
    pub fn add_outer(&mut self, a: &Tensor, b: &Tensor) {
        debug_assert_eq!(self.rows, a.rows);
        debug_assert_eq!(self.cols, b.rows);
        for r in 0..self.rows {
            let av = a.data[r];
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (o, bv) in row.iter_mut().zip(b.data.iter()) {
                *o += av * bv;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert!(self.same_shape(other));
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Euclidean norm over all entries.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}
