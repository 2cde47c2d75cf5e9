//! Symmetric sparse matrices in CSR form, used for graph propagation.

use crate::matrix::Matrix;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Symmetric N x N sparse matrix. Symmetry is a construction invariant of the
/// graph propagators (both normalizations are of the form S·Sᵀ or D^-1/2ÂD^-1/2),
/// and it is what lets the backward pass reuse `apply`.
#[derive(Clone, Debug)]
pub struct SparseSym {
    dim: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseSym {
    /// Build from per-row (col, value) lists. Rows must already be merged
    /// (one entry per column) and the overall matrix symmetric.
    pub fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let dim = rows.len();
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                col_idx.push(c);
                vals.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        SparseSym { dim, row_ptr, col_idx, vals }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    fn apply_row(&self, i: usize, x: &Matrix, out_row: &mut [f64]) {
        for k in self.row_ptr[i]..self.row_ptr[i + 1] {
            let c = self.col_idx[k];
            let w = self.vals[k];
            for (o, &xv) in out_row.iter_mut().zip(x.row(c)) {
                *o += w * xv;
            }
        }
    }

    /// Sequential matrix product self · x.
    pub fn apply_seq(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.dim, x.cols());
        for i in 0..self.dim {
            self.apply_row(i, x, out.row_mut(i));
        }
        out
    }

    /// self · x, parallel over output rows when the feature is enabled.
    /// Each row's accumulation order is fixed, so the result is independent
    /// of thread count.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        #[cfg(feature = "parallel")]
        {
            let cols = x.cols();
            let mut out = Matrix::zeros(self.dim, cols);
            out.data_mut()
                .par_chunks_mut(cols)
                .enumerate()
                .for_each(|(i, row)| self.apply_row(i, x, row));
            out
        }
        #[cfg(not(feature = "parallel"))]
        {
            self.apply_seq(x)
        }
    }

    /// Dense copy, for oracles in tests.
    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.dim, self.dim);
        for i in 0..self.dim {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                m.set(i, self.col_idx[k], self.vals[k]);
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apply_matches_dense() {
        let s = SparseSym::from_rows(vec![
            vec![(0, 2.0), (1, 1.0)],
            vec![(0, 1.0), (1, 3.0), (2, 0.5)],
            vec![(1, 0.5), (2, 1.0)],
        ]);
        let x = Matrix::from_fn(3, 2, |i, j| (i * 2 + j) as f64 + 1.0);
        let dense = s.to_dense().matmul(&x).unwrap();
        assert_eq!(s.apply(&x), dense);
        assert_eq!(s.apply_seq(&x), dense);
    }
}
