//! Compressed sparse row matrices used for graph propagation.

use ndarray::{Array2, ArrayView2};

#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Builds a matrix from `(row, col, value)` triplets. Entries are sorted by
    /// `(row, col)`; duplicates are kept as separate entries.
    pub fn from_triplets(rows: usize, cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Self {
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; rows + 1];
        for &(r, c, _) in &entries {
            assert!(r < rows && c < cols, "csr entry ({r}, {c}) out of bounds");
            indptr[r + 1] += 1;
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        let indices = entries.iter().map(|e| e.1).collect();
        let values = entries.iter().map(|e| e.2).collect();
        Csr {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn transpose(&self) -> Csr {
        let mut entries = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                entries.push((c, r, v));
            }
        }
        Csr::from_triplets(self.cols, self.rows, entries)
    }

    /// Dense product `self · x`.
    pub fn matmul(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        assert_eq!(self.cols, x.nrows(), "csr matmul shape mismatch");
        let d = x.ncols();
        let mut out = Array2::zeros((self.rows, d));
        for r in 0..self.rows {
            let mut dst = out.row_mut(r);
            for (c, v) in self.row(r) {
                dst.scaled_add(v, &x.row(c));
            }
        }
        out
    }
}
