//! Compressed sparse row matrices.

use crate::error::{Error, Result};

/// CSR matrix of `f64`. Column indices are strictly increasing within each
/// row and no explicit zeros are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds a matrix from raw CSR arrays, validating every invariant.
    pub fn from_csr(
        rows: usize,
        cols: usize,
        offsets: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if offsets.len() != rows + 1 || offsets[0] != 0 {
            return Err(Error::InvalidMesh(format!(
                "sparse offsets must have length {} and start at 0",
                rows + 1
            )));
        }
        if indices.len() != values.len() || *offsets.last().unwrap() != indices.len() {
            return Err(Error::InvalidMesh("sparse offsets/indices/values disagree".into()));
        }
        for r in 0..rows {
            let (lo, hi) = (offsets[r], offsets[r + 1]);
            if lo > hi {
                return Err(Error::InvalidMesh(format!("sparse offsets decrease at row {r}")));
            }
            for k in lo..hi {
                if indices[k] >= cols {
                    return Err(Error::InvalidMesh(format!("column {} out of range", indices[k])));
                }
                if k > lo && indices[k] <= indices[k - 1] {
                    return Err(Error::InvalidMesh(format!(
                        "columns not strictly increasing in row {r}"
                    )));
                }
                if values[k] == 0.0 {
                    return Err(Error::InvalidMesh(format!("explicit zero stored in row {r}")));
                }
            }
        }
        Ok(SparseMatrix { rows, cols, offsets, indices, values })
    }

    /// Builds a matrix from `(row, col, value)` triplets. Duplicates are
    /// summed and entries that end up exactly zero are dropped.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        for &(r, c, _) in &sorted {
            if r >= rows || c >= cols {
                return Err(Error::shape(
                    "sparse triplets",
                    format!("entry ({r}, {c}) outside {rows}x{cols}"),
                ));
            }
        }
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut offsets = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut i = 0;
        for r in 0..rows {
            while i < sorted.len() && sorted[i].0 == r {
                let c = sorted[i].1;
                let mut v = 0.0;
                while i < sorted.len() && sorted[i].0 == r && sorted[i].1 == c {
                    v += sorted[i].2;
                    i += 1;
                }
                if v != 0.0 {
                    indices.push(c);
                    values.push(v);
                }
            }
            offsets[r + 1] = indices.len();
        }
        Ok(SparseMatrix { rows, cols, offsets, indices, values })
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            rows: n,
            cols: n,
            offsets: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Dense row-major matrix to CSR, dropping zeros.
    pub fn from_dense(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("sparse from_dense", "data length != rows*cols"));
        }
        let triplets: Vec<_> = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .filter_map(|(r, c)| {
                let v = data[r * cols + c];
                (v != 0.0).then_some((r, c, v))
            })
            .collect();
        Self::from_triplets(rows, cols, &triplets)
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

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of row `r`.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.offsets[r], self.offsets[r + 1]);
        (&self.indices[lo..hi], &self.values[lo..hi])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (idx, vals) = self.row(r);
        match idx.binary_search(&c) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).1.iter().sum()).collect()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                out[r * self.cols + c] = v;
            }
        }
        out
    }

    pub fn transpose(&self) -> SparseMatrix {
        let triplets: Vec<_> = (0..self.rows)
            .flat_map(|r| {
                let (idx, vals) = self.row(r);
                idx.iter().zip(vals).map(move |(&c, &v)| (c, r, v)).collect::<Vec<_>>()
            })
            .collect();
        SparseMatrix::from_triplets(self.cols, self.rows, &triplets)
            .expect("transpose of a valid matrix is valid")
    }

    /// Sparse-sparse product, used for checking coarsening algebra.
    pub fn matmul_sparse(&self, other: &SparseMatrix) -> Result<SparseMatrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "sparse matmul",
                format!("{}x{} times {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut triplets = Vec::new();
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            for (&k, &a) in idx.iter().zip(vals) {
                let (idx2, vals2) = other.row(k);
                for (&c, &b) in idx2.iter().zip(vals2) {
                    triplets.push((r, c, a * b));
                }
            }
        }
        SparseMatrix::from_triplets(self.rows, other.cols, &triplets)
    }

    /// Relabels rows and columns: entry `(i, j)` moves to `(perm[i], perm[j])`.
    /// Only valid for square matrices.
    pub fn permute_symmetric(&self, perm: &[usize]) -> Result<SparseMatrix> {
        if self.rows != self.cols || perm.len() != self.rows {
            return Err(Error::shape("permute", "square matrix and full permutation required"));
        }
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            let (idx, vals) = self.row(r);
            for (&c, &v) in idx.iter().zip(vals) {
                triplets.push((perm[r], perm[c], v));
            }
        }
        SparseMatrix::from_triplets(self.rows, self.cols, &triplets)
    }
}

/// Computes `S · X` for a dense row-major `X` with `x_cols` columns.
///
/// Each output row is accumulated in ascending column order of `S`, so the
/// result is bit-reproducible.
pub fn sparse_dense_multiply(s: &SparseMatrix, x: &[f64], x_rows: usize, x_cols: usize) -> Result<Vec<f64>> {
    if s.cols != x_rows || x.len() != x_rows * x_cols {
        return Err(Error::shape(
            "sparse_dense_multiply",
            format!("{}x{} times {}x{}", s.rows, s.cols, x_rows, x_cols),
        ));
    }
    let mut out = vec![0.0; s.rows * x_cols];
    for r in 0..s.rows {
        let (idx, vals) = s.row(r);
        let dst = &mut out[r * x_cols..(r + 1) * x_cols];
        for (&c, &v) in idx.iter().zip(vals) {
            let src = &x[c * x_cols..(c + 1) * x_cols];
            for (d, &xv) in dst.iter_mut().zip(src) {
                *d += v * xv;
            }
        }
    }
    Ok(out)
}

/// Computes `Sᵀ · Y` without materializing the transpose.
pub fn sparse_transpose_dense_multiply(
    s: &SparseMatrix,
    y: &[f64],
    y_rows: usize,
    y_cols: usize,
) -> Result<Vec<f64>> {
    if s.rows != y_rows || y.len() != y_rows * y_cols {
        return Err(Error::shape(
            "sparse_transpose_dense_multiply",
            format!("({}x{})ᵀ times {}x{}", s.rows, s.cols, y_rows, y_cols),
        ));
    }
    let mut out = vec![0.0; s.cols * y_cols];
    for r in 0..s.rows {
        let (idx, vals) = s.row(r);
        let src = &y[r * y_cols..(r + 1) * y_cols];
        for (&c, &v) in idx.iter().zip(vals) {
            let dst = &mut out[c * y_cols..(c + 1) * y_cols];
            for (d, &yv) in dst.iter_mut().zip(src) {
                *d += v * yv;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sum_duplicates_and_drop_zeros() {
        let m = SparseMatrix::from_triplets(2, 3, &[(0, 2, 1.0), (0, 0, 2.0), (0, 2, -1.0), (1, 1, 3.0)])
            .unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.row(0).0, &[0]);
        assert_eq!(m.get(1, 1), 3.0);
        assert_eq!(m.get(0, 2), 0.0);
    }

    #[test]
    fn from_csr_rejects_unsorted_columns() {
        let err = SparseMatrix::from_csr(1, 3, vec![0, 2], vec![2, 1], vec![1.0, 1.0]);
        assert!(err.is_err());
        let err = SparseMatrix::from_csr(1, 3, vec![0, 1], vec![1], vec![0.0]);
        assert!(err.is_err());
    }

    #[test]
    fn identity_times_x_is_x() {
        let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
        let y = sparse_dense_multiply(&SparseMatrix::identity(4), &x, 4, 3).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn row_stochastic_preserves_constant_rows() {
        let s = SparseMatrix::from_triplets(
            3,
            3,
            &[(0, 0, 0.5), (0, 1, 0.5), (1, 0, 0.25), (1, 1, 0.25), (1, 2, 0.5), (2, 2, 1.0)],
        )
        .unwrap();
        let row = [1.5, -2.0, 4.0];
        let x: Vec<f64> = row.iter().cycle().take(9).copied().collect();
        let y = sparse_dense_multiply(&s, &x, 3, 3).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert!((y[r * 3 + c] - row[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let s = SparseMatrix::identity(3);
        assert!(sparse_dense_multiply(&s, &[0.0; 8], 4, 2).is_err());
    }

    #[test]
    fn transpose_product_matches_explicit_transpose() {
        let s = SparseMatrix::from_triplets(2, 3, &[(0, 1, 2.0), (1, 0, -1.0), (1, 2, 0.5)]).unwrap();
        let y = [1.0, 2.0, 3.0, 4.0];
        let a = sparse_transpose_dense_multiply(&s, &y, 2, 2).unwrap();
        let b = sparse_dense_multiply(&s.transpose(), &y, 2, 2).unwrap();
        assert_eq!(a, b);
    }
}
