use super::Real;
use crate::error::{Error, Result};

/// Compressed-row matrix used as a constant left operand on the tape.
///
/// Built from dense storage by dropping exact zeros, so products agree with the
/// dense product term for term.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix<T> {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Real> SparseMatrix<T> {
    pub fn from_dense(rows: usize, cols: usize, dense: &[f64]) -> Result<Self> {
        if dense.len() != rows * cols {
            return Err(Error::shape("sparse_from_dense", &[rows, cols], &[dense.len()]));
        }
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for r in 0..rows {
            for (c, &v) in dense[r * cols..(r + 1) * cols].iter().enumerate() {
                if v != 0.0 {
                    indices.push(c);
                    values.push(T::lit(v));
                }
            }
            indptr.push(indices.len());
        }
        Ok(Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn cast<U: Real>(&self) -> SparseMatrix<U> {
        SparseMatrix {
            rows: self.rows,
            cols: self.cols,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Iterates `(col, value)` pairs of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// `out[b] = self * x[b]` for `x` laid out as `batch x cols x width`.
    pub(crate) fn apply(&self, x: &[T], batch: usize, width: usize, out: &mut [T]) {
        let in_stride = self.cols * width;
        let out_stride = self.rows * width;
        for b in 0..batch {
            let xb = &x[b * in_stride..(b + 1) * in_stride];
            let ob = &mut out[b * out_stride..(b + 1) * out_stride];
            for r in 0..self.rows {
                let orow = &mut ob[r * width..(r + 1) * width];
                for (c, v) in self.row(r) {
                    let xrow = &xb[c * width..(c + 1) * width];
                    for (o, &xv) in orow.iter_mut().zip(xrow) {
                        *o += v * xv;
                    }
                }
            }
        }
    }

    /// `dx[b] += self^T * dout[b]`.
    pub(crate) fn apply_transpose_acc(&self, dout: &[T], batch: usize, width: usize, dx: &mut [T]) {
        let in_stride = self.cols * width;
        let out_stride = self.rows * width;
        for b in 0..batch {
            let gb = &dout[b * out_stride..(b + 1) * out_stride];
            let db = &mut dx[b * in_stride..(b + 1) * in_stride];
            for r in 0..self.rows {
                let grow = &gb[r * width..(r + 1) * width];
                for (c, v) in self.row(r) {
                    let drow = &mut db[c * width..(c + 1) * width];
                    for (d, &g) in drow.iter_mut().zip(grow) {
                        *d += v * g;
                    }
                }
            }
        }
    }
}
