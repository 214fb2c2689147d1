//! Compressed sparse row matrices for the fixed linear stencils of the solver.

use num_traits::Float;

/// A CSR matrix. Rows map to output samples, columns to input samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix<T> {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<T>,
}

impl<T: Float> SparseMatrix<T> {
    /// Builds a matrix from `(row, col, value)` triplets. Duplicates are summed,
    /// explicit zeros are dropped.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, T)]) -> Self {
        let mut per_row: Vec<Vec<(usize, T)>> = vec![Vec::new(); rows];
        for &(r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) outside {rows}x{cols}");
            per_row[r].push((c, v));
        }
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        indptr.push(0);
        for mut row in per_row {
            row.sort_by_key(|&(c, _)| c);
            let mut k = 0;
            while k < row.len() {
                let c = row[k].0;
                let mut v = row[k].1;
                k += 1;
                while k < row.len() && row[k].0 == c {
                    v = v + row[k].1;
                    k += 1;
                }
                if v != T::zero() {
                    indices.push(c);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self { rows, cols, indptr, indices, values }
    }

    pub fn identity(n: usize) -> Self {
        let t: Vec<_> = (0..n).map(|i| (i, i, T::one())).collect();
        Self::from_triplets(n, n, &t)
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

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn triplets(&self) -> Vec<(usize, usize, T)> {
        (0..self.rows).flat_map(|r| self.row(r).map(move |(c, v)| (r, c, v))).collect()
    }

    /// `y = A x`
    pub fn apply(&self, x: &[T], y: &mut [T]) {
        assert_eq!(x.len(), self.cols);
        assert_eq!(y.len(), self.rows);
        for (r, out) in y.iter_mut().enumerate() {
            let mut acc = T::zero();
            for k in self.indptr[r]..self.indptr[r + 1] {
                acc = acc + self.values[k] * x[self.indices[k]];
            }
            *out = acc;
        }
    }

    /// `x += Aᵀ y`
    pub fn apply_transpose_add(&self, y: &[T], x: &mut [T]) {
        assert_eq!(y.len(), self.rows);
        assert_eq!(x.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr == T::zero() {
                continue;
            }
            for k in self.indptr[r]..self.indptr[r + 1] {
                x[self.indices[k]] = x[self.indices[k]] + self.values[k] * yr;
            }
        }
    }

    pub fn transpose(&self) -> Self {
        let t: Vec<_> = self.triplets().into_iter().map(|(r, c, v)| (c, r, v)).collect();
        Self::from_triplets(self.cols, self.rows, &t)
    }

    /// `A B`
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows);
        let mut t = Vec::new();
        for r in 0..self.rows {
            for (k, a) in self.row(r) {
                for (c, b) in other.row(k) {
                    t.push((r, c, a * b));
                }
            }
        }
        Self::from_triplets(self.rows, other.cols, &t)
    }

    /// `αA + βB`
    pub fn combine(&self, alpha: T, other: &Self, beta: T) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let mut t: Vec<_> = self.triplets().into_iter().map(|(r, c, v)| (r, c, alpha * v)).collect();
        t.extend(other.triplets().into_iter().map(|(r, c, v)| (r, c, beta * v)));
        Self::from_triplets(self.rows, self.cols, &t)
    }

    /// Block-diagonal matrix `diag(A, B)`.
    pub fn block_diag(a: &Self, b: &Self) -> Self {
        let mut t = a.triplets();
        t.extend(b.triplets().into_iter().map(|(r, c, v)| (r + a.rows, c + a.cols, v)));
        Self::from_triplets(a.rows + b.rows, a.cols + b.cols, &t)
    }

    /// Stacks `A` on top of `B` (same column count).
    pub fn vstack(a: &Self, b: &Self) -> Self {
        assert_eq!(a.cols, b.cols);
        let mut t = a.triplets();
        t.extend(b.triplets().into_iter().map(|(r, c, v)| (r + a.rows, c, v)));
        Self::from_triplets(a.rows + b.rows, a.cols, &t)
    }

    /// Places `A` and `B` side by side (same row count).
    pub fn hstack(a: &Self, b: &Self) -> Self {
        assert_eq!(a.rows, b.rows);
        let mut t = a.triplets();
        t.extend(b.triplets().into_iter().map(|(r, c, v)| (r, c + a.cols, v)));
        Self::from_triplets(a.rows, a.cols + b.cols, &t)
    }

    pub fn scaled(&self, s: T) -> Self {
        let mut m = self.clone();
        m.values.iter_mut().for_each(|v| *v = *v * s);
        m
    }

    pub fn cast<U: Float>(&self) -> SparseMatrix<U> {
        SparseMatrix {
            rows: self.rows,
            cols: self.cols,
            indptr: self.indptr.clone(),
            indices: self.indices.clone(),
            values: self.values.iter().map(|v| U::from(*v).expect("representable")).collect(),
        }
    }
}
