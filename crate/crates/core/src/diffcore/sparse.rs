use super::{DiffError, Tensor};

/// Compressed sparse row matrix. Used as a constant operand (the normalized
/// adjacency) so graph propagation costs O(edges · width) instead of O(n²).
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from per-row `(column, value)` lists. Columns within a row are
    /// sorted; duplicates are summed.
    pub fn from_rows(cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for mut row in rows.iter().cloned() {
            row.sort_by_key(|&(c, _)| c);
            let mut last: Option<usize> = None;
            for (c, v) in row {
                assert!(c < cols, "column {c} out of range {cols}");
                if last == Some(c) {
                    *values.last_mut().unwrap() += v;
                } else {
                    indices.push(c);
                    values.push(v);
                    last = Some(c);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            rows: rows.len(),
            cols,
            indptr,
            indices,
            values,
        }
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

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(pos) => self.values[span.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(&[self.rows, self.cols]);
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out.set(r, c, v);
            }
        }
        out
    }

    /// `self · dense`.
    pub fn mul_dense(&self, dense: &Tensor) -> Result<Tensor, DiffError> {
        if dense.rows() != self.cols {
            return Err(DiffError::Shape {
                op: "spmm",
                left: vec![self.rows, self.cols],
                right: dense.shape().to_vec(),
            });
        }
        let width = dense.cols();
        let mut out = vec![0.0; self.rows * width];
        self.mul_dense_acc(dense.values(), &mut out, width);
        Tensor::matrix(self.rows, width, out)
    }

    pub(crate) fn mul_dense_acc(&self, dense: &[f64], out: &mut [f64], width: usize) {
        for r in 0..self.rows {
            let out_row = &mut out[r * width..(r + 1) * width];
            for (c, v) in self.row(r) {
                let src = &dense[c * width..(c + 1) * width];
                for (o, &s) in out_row.iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
    }

    /// `out += selfᵀ · dense` where `dense` has `rows` rows.
    pub(crate) fn tmul_dense_acc(&self, dense: &[f64], out: &mut [f64], width: usize) {
        for r in 0..self.rows {
            let src = &dense[r * width..(r + 1) * width];
            for (c, v) in self.row(r) {
                let out_row = &mut out[c * width..(c + 1) * width];
                for (o, &s) in out_row.iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        }
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|r| self.row(r).all(|(c, v)| (self.get(c, r) - v).abs() <= tol))
    }
}
