//! Compressed sparse row matrices and a sparse LU wrapper.
//!
//! Assembly goes through [`TripletBuilder`], which sums duplicate entries on
//! finalization so every [`SparseMatrix`] has unique `(row, col)` pairs with
//! column indices sorted inside each row.

use std::sync::Once;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use faer::Mat;
use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    Dimension {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("LU factorization failed: {0}")]
    Factorization(String),
    #[error("matrix is numerically singular (relative residual {residual:.3e})")]
    Singular { residual: f64 },
}

/// Accumulates coordinate entries; duplicates are summed by [`TripletBuilder::build`].
#[derive(Debug, Clone)]
pub struct TripletBuilder {
    nrows: usize,
    ncols: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl TripletBuilder {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        Self {
            nrows,
            ncols,
            entries: Vec::with_capacity(cap),
        }
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.nrows && col < self.ncols);
        self.entries.push((row, col, value));
    }

    /// Copies every entry of `block` shifted by `(row_offset, col_offset)`, scaled by `scale`.
    pub fn push_block(
        &mut self,
        block: &SparseMatrix,
        row_offset: usize,
        col_offset: usize,
        scale: f64,
    ) {
        for (i, j, v) in block.iter() {
            self.push(row_offset + i, col_offset + j, scale * v);
        }
    }

    /// Same as [`push_block`](Self::push_block) with the block transposed.
    pub fn push_block_transposed(
        &mut self,
        block: &SparseMatrix,
        row_offset: usize,
        col_offset: usize,
        scale: f64,
    ) {
        for (i, j, v) in block.iter() {
            self.push(row_offset + j, col_offset + i, scale * v);
        }
    }

    pub fn build(mut self) -> SparseMatrix {
        // Stable sort keeps insertion order among duplicates, so the summation
        // order only depends on the order entries were pushed.
        self.entries.sort_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0usize; self.nrows + 1];
        let mut col_idx = Vec::with_capacity(self.entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(self.entries.len());
        let mut last: Option<(usize, usize)> = None;
        for &(i, j, v) in &self.entries {
            if last == Some((i, j)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(j);
                values.push(v);
                row_ptr[i + 1] += 1;
                last = Some((i, j));
            }
        }
        for i in 0..self.nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseMatrix {
            nrows: self.nrows,
            ncols: self.ncols,
            row_ptr,
            col_idx,
            values,
        }
    }
}

/// Finalized CSR matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        TripletBuilder::new(nrows, ncols).build()
    }

    pub fn identity(n: usize) -> Self {
        let mut b = TripletBuilder::with_capacity(n, n, n);
        for i in 0..n {
            b.push(i, i, 1.0);
        }
        b.build()
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut b = TripletBuilder::new(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let v = m[(i, j)];
                if v != 0.0 {
                    b.push(i, j, v);
                }
            }
        }
        b.build()
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nrows, self.ncols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates `(row, col, value)` in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.nrows).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (i, self.col_idx[k], self.values[k]))
        })
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (self.col_idx[k], self.values[k]))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.col_idx[range.clone()].binary_search(&j) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for (i, yi) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            *yi = acc;
        }
    }

    /// `selfᵀ x`
    pub fn mul_vec_transposed(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = vec![0.0; self.ncols];
        for (i, &xi) in x.iter().enumerate() {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                y[self.col_idx[k]] += self.values[k] * xi;
            }
        }
        y
    }

    /// `xᵀ A y`
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        assert_eq!(x.len(), self.nrows);
        self.mul_vec(y).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.bilinear(x, x)
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut b = TripletBuilder::with_capacity(self.ncols, self.nrows, self.nnz());
        for (i, j, v) in self.iter() {
            b.push(j, i, v);
        }
        b.build()
    }

    pub fn scaled(&self, s: f64) -> SparseMatrix {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// `Σ_q c_q A_q`, accumulated term by term in the given order.
    pub fn linear_combination(
        terms: &[(f64, &SparseMatrix)],
        nrows: usize,
        ncols: usize,
    ) -> Result<SparseMatrix, SparseError> {
        let cap = terms.iter().map(|(_, m)| m.nnz()).sum();
        let mut b = TripletBuilder::with_capacity(nrows, ncols, cap);
        for (c, m) in terms {
            if m.shape() != (nrows, ncols) {
                return Err(SparseError::Dimension {
                    expected: (nrows, ncols),
                    got: m.shape(),
                });
            }
            for (i, j, v) in m.iter() {
                b.push(i, j, c * v);
            }
        }
        Ok(b.build())
    }

    pub fn add(&self, other: &SparseMatrix) -> Result<SparseMatrix, SparseError> {
        Self::linear_combination(&[(1.0, self), (1.0, other)], self.nrows, self.ncols)
    }

    /// Submatrix on the given row and column index lists (in list order).
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> SparseMatrix {
        let mut col_map = vec![usize::MAX; self.ncols];
        for (new, &old) in cols.iter().enumerate() {
            col_map[old] = new;
        }
        let mut b = TripletBuilder::new(rows.len(), cols.len());
        for (new_i, &old_i) in rows.iter().enumerate() {
            for (j, v) in self.row(old_i) {
                let nj = col_map[j];
                if nj != usize::MAX {
                    b.push(new_i, nj, v);
                }
            }
        }
        b.build()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (i, j, v) in self.iter() {
            m[(i, j)] += v;
        }
        m
    }

    /// Sparse times dense.
    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.ncols);
        let mut out = DMatrix::zeros(self.nrows, x.ncols());
        for c in 0..x.ncols() {
            let col = x.column(c);
            for i in 0..self.nrows {
                let mut acc = 0.0;
                for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                    acc += self.values[k] * col[self.col_idx[k]];
                }
                out[(i, c)] = acc;
            }
        }
        out
    }

    /// `Lᵀ A R` for dense `L`, `R`.
    pub fn project(&self, left: &DMatrix<f64>, right: &DMatrix<f64>) -> DMatrix<f64> {
        left.transpose() * self.mul_dense(right)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `‖A − Aᵀ‖_max ≤ tol · ‖A‖_max`
    pub fn is_symmetric(&self, tol: f64) -> bool {
        if self.nrows != self.ncols {
            return false;
        }
        let scale = self.max_abs();
        self.iter()
            .all(|(i, j, v)| (v - self.get(j, i)).abs() <= tol * scale)
            && self
                .transpose()
                .iter()
                .all(|(i, j, v)| (v - self.get(i, j)).abs() <= tol * scale)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.nrows).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    fn to_faer(&self) -> Result<SparseColMat<usize, f64>, SparseError> {
        let triplets: Vec<Triplet<usize, usize, f64>> =
            self.iter().map(|(i, j, v)| Triplet::new(i, j, v)).collect();
        SparseColMat::try_new_from_triplets(self.nrows, self.ncols, &triplets)
            .map_err(|e| SparseError::Factorization(format!("{e:?}")))
    }
}

static SEQUENTIAL: Once = Once::new();

/// Sparse LU with partial pivoting (faer supernodal/simplicial backend).
pub struct SparseLu {
    n: usize,
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
}

impl std::fmt::Debug for SparseLu {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SparseLu").field("n", &self.n).finish()
    }
}

impl SparseLu {
    pub fn factor(a: &SparseMatrix) -> Result<Self, SparseError> {
        // Outer loops parallelize over parameters; keep the factorization
        // single-threaded so results do not depend on thread scheduling.
        SEQUENTIAL.call_once(|| faer::set_global_parallelism(faer::Par::Seq));
        if a.nrows != a.ncols {
            return Err(SparseError::Dimension {
                expected: (a.nrows, a.nrows),
                got: a.shape(),
            });
        }
        let lu = a
            .to_faer()?
            .sp_lu()
            .map_err(|e| SparseError::Factorization(format!("{e:?}")))?;
        Ok(Self { n: a.nrows, lu })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut rhs = Mat::<f64>::from_fn(self.n, 1, |i, _| b[i]);
        self.lu.solve_in_place(rhs.as_mut());
        (0..self.n).map(|i| rhs[(i, 0)]).collect()
    }

    /// Solves `Aᵀ x = b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut rhs = Mat::<f64>::from_fn(self.n, 1, |i, _| b[i]);
        self.lu.solve_transpose_in_place(rhs.as_mut());
        (0..self.n).map(|i| rhs[(i, 0)]).collect()
    }
}

/// Solves `A x = b` and checks `‖Ax − b‖ ≤ tol · max(‖b‖, ‖A‖_max ‖x‖)`.
pub fn solve_checked(a: &SparseMatrix, b: &[f64], tol: f64) -> Result<Vec<f64>, SparseError> {
    let lu = SparseLu::factor(a)?;
    let x = lu.solve(b);
    let residual = relative_residual(a, &x, b);
    if !residual.is_finite() || residual > tol {
        return Err(SparseError::Singular { residual });
    }
    Ok(x)
}

/// `‖Ax − b‖ / ‖b‖`, or the absolute residual scaled by `‖A‖_max ‖x‖` when `b = 0`.
pub fn relative_residual(a: &SparseMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.mul_vec(x);
    let r = norm2(&ax.iter().zip(b).map(|(p, q)| p - q).collect::<Vec<_>>());
    let bn = norm2(b);
    if bn > 0.0 {
        r / bn
    } else {
        let xn = norm2(x);
        if xn == 0.0 {
            r
        } else {
            r / (a.max_abs() * xn)
        }
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}
