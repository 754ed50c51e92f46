//! Dense row-major f64 matrices.
//!
//! Everything the toolkit computes on is a rank-2 tensor: a batch of
//! token embeddings is `(batch*len, dim)`, logits are `(batch*len, vocab)`,
//! a scalar loss is `(1, 1)`. Keeping the rank fixed removes a whole class
//! of broadcasting bugs and keeps the autodiff kernels simple.

use crate::error::Error;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorRepr", into = "TensorRepr")]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Wire form of a tensor; conversion re-checks the shape so a hand-edited
/// file cannot smuggle in a mismatched length.
#[derive(Serialize, Deserialize)]
struct TensorRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<TensorRepr> for Tensor {
    type Error = Error;

    fn try_from(r: TensorRepr) -> Result<Self, Error> {
        Tensor::from_vec(r.rows, r.cols, r.data)
    }
}

impl From<Tensor> for TensorRepr {
    fn from(t: Tensor) -> Self {
        TensorRepr { rows: t.rows, cols: t.cols, data: t.data }
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, Error> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{}x{} tensor needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn transposed(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self += alpha * other`, shapes must match exactly.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// `C = A op B` with optional transposes, A is `(m, k)` after transposition
/// and B is `(k, n)`. Inputs stay untouched; transposed operands are packed
/// into row-major scratch first so the inner loops always stream
/// contiguously.
pub fn matmul(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool) -> Tensor {
    let a_packed;
    let a_eff = if trans_a {
        a_packed = a.transposed();
        &a_packed
    } else {
        a
    };
    let b_packed;
    let b_eff = if trans_b {
        b_packed = b.transposed();
        &b_packed
    } else {
        b
    };
    let (m, ka) = a_eff.shape();
    let (kb, n) = b_eff.shape();
    assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
    let mut c = Tensor::zeros(m, n);
    for i in 0..m {
        let a_row = a_eff.row(i);
        let c_row = c.row_mut(i);
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = b_eff.row(k);
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += aik * bj;
            }
        }
    }
    c
}
