//! Constant sparse matrices in compressed-row form.

use std::sync::Arc;

use crate::error::{shape_err, Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, PartialEq)]
struct Csr {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

/// Immutable CSR matrix; clones share storage.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix(Arc<Csr>);

impl SparseMatrix {
    /// Keeps every nonzero entry of a rank-2 tensor.
    pub fn from_dense(t: &Tensor) -> Result<Self> {
        let (rows, cols) = t.dims2()?;
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for r in 0..rows {
            for (c, &v) in t.row(r).iter().enumerate() {
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Ok(Self(Arc::new(Csr {
            rows,
            cols,
            indptr,
            indices,
            values,
        })))
    }

    pub fn rows(&self) -> usize {
        self.0.rows
    }

    pub fn cols(&self) -> usize {
        self.0.cols
    }

    pub fn nnz(&self) -> usize {
        self.0.values.len()
    }

    /// `(column, value)` pairs of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.0.indptr[r]..self.0.indptr[r + 1];
        self.0.indices[span.clone()].iter().copied().zip(self.0.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> Tensor {
        let mut data = vec![0.0; self.rows() * self.cols()];
        for r in 0..self.rows() {
            for (c, v) in self.row(r) {
                data[r * self.cols() + c] = v;
            }
        }
        Tensor::new([self.rows(), self.cols()], data).expect("extents match")
    }

    /// `self · b` for a rank-2 `b`.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        let (k, n) = b.dims2()?;
        if k != self.cols() {
            return Err(shape_err("sparse_matmul", &[self.rows(), self.cols()], b.shape()));
        }
        let mut out = vec![0.0; self.rows() * n];
        for r in 0..self.rows() {
            let dst = &mut out[r * n..(r + 1) * n];
            for (c, v) in self.row(r) {
                for (o, &x) in dst.iter_mut().zip(b.row(c)) {
                    *o += v * x;
                }
            }
        }
        Tensor::new([self.rows(), n], out)
    }

    /// `selfᵀ · g` for a rank-2 `g`.
    pub fn matmul_transposed(&self, g: &Tensor) -> Result<Tensor> {
        let (m, n) = g.dims2()?;
        if m != self.rows() {
            return Err(TensorError::Shape {
                op: "sparse_matmul_t",
                lhs: vec![self.cols(), self.rows()],
                rhs: g.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; self.cols() * n];
        for r in 0..self.rows() {
            let src = g.row(r);
            for (c, v) in self.row(r) {
                for (o, &x) in out[c * n..(c + 1) * n].iter_mut().zip(src) {
                    *o += v * x;
                }
            }
        }
        Tensor::new([self.cols(), n], out)
    }
}
