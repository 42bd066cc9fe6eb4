//! Weighted proper orthogonal decomposition.
//!
//! The discrete correlation operator `C_d v = Σ_i w_i ⟨v, χ_i⟩_X χ_i` is diagonalized
//! either in the snapshot basis (any nonzero weights) or in the weighted snapshot
//! basis `√w_i χ_i` (positive weights only).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sparse::SparseMatrix;

/// Relative eigenvalue cutoff defining the number `K` of positive eigenvalues when the
/// eigenvalues come from a Gram matrix (absolute accuracy about `1e-16 λ₁`).
pub const EIGEN_REL_TOL: f64 = 1e-13;
/// Cutoff for eigenvalues obtained as squared singular values, which resolve
/// `σ_k / σ₁` down to roughly machine precision.
pub const WEIGHTED_EIGEN_REL_TOL: f64 = 1e-30;
/// Drop tolerance of the X-Gram–Schmidt passes (relative to the incoming norm).
pub const GS_DROP_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum PodError {
    #[error("snapshot set is empty")]
    Empty,
    #[error("snapshot {index} has length {got}, expected {expected}")]
    Dimension { index: usize, expected: usize, got: usize },
    #[error("{snapshots} snapshots but {weights} weights")]
    CountMismatch { snapshots: usize, weights: usize },
    #[error("weight {index} is {value}; only nonzero finite weights are admitted")]
    ZeroWeight { index: usize, value: f64 },
    #[error("weight {index} is {value}; the weighted-snapshot formulation needs positive weights, use the snapshot formulation")]
    NonPositiveWeight { index: usize, value: f64 },
    #[error("snapshot sets disagree on the number of parameters ({0} vs {1})")]
    InconsistentSets(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PodFormulation {
    /// Generalized eigenproblem in the snapshot basis; admits negative weights.
    Snapshot,
    /// Weighted snapshot basis; positive weights only.
    #[default]
    Weighted,
}

impl std::str::FromStr for PodFormulation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "snapshot" => Ok(Self::Snapshot),
            "weighted" => Ok(Self::Weighted),
            other => Err(format!("unknown POD formulation `{other}` (snapshot|weighted)")),
        }
    }
}

/// Snapshots as columns, their quadrature weights and the inner product.
#[derive(Debug, Clone)]
pub struct SnapshotSet {
    pub snapshots: DMatrix<f64>,
    pub weights: Vec<f64>,
    pub norm: SparseMatrix,
}

impl SnapshotSet {
    pub fn new(columns: &[Vec<f64>], weights: Vec<f64>, norm: SparseMatrix) -> Result<Self, PodError> {
        if columns.is_empty() {
            return Err(PodError::Empty);
        }
        let n = norm.nrows();
        for (index, c) in columns.iter().enumerate() {
            if c.len() != n {
                return Err(PodError::Dimension {
                    index,
                    expected: n,
                    got: c.len(),
                });
            }
        }
        let snapshots = DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i]);
        Self::from_matrix(snapshots, weights, norm)
    }

    pub fn from_matrix(snapshots: DMatrix<f64>, weights: Vec<f64>, norm: SparseMatrix) -> Result<Self, PodError> {
        if snapshots.ncols() == 0 {
            return Err(PodError::Empty);
        }
        if snapshots.ncols() != weights.len() {
            return Err(PodError::CountMismatch {
                snapshots: snapshots.ncols(),
                weights: weights.len(),
            });
        }
        if snapshots.nrows() != norm.nrows() {
            return Err(PodError::Dimension {
                index: 0,
                expected: norm.nrows(),
                got: snapshots.nrows(),
            });
        }
        if let Some((index, &value)) = weights.iter().enumerate().find(|(_, w)| **w == 0.0 || !w.is_finite()) {
            return Err(PodError::ZeroWeight { index, value });
        }
        Ok(Self {
            snapshots,
            weights,
            norm,
        })
    }

    pub fn len(&self) -> usize {
        self.snapshots.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.snapshots.nrows()
    }

    /// `Σ_i w_i ‖χ_i − P_V χ_i‖²_X` for an X-orthonormal basis `V`.
    pub fn projection_error(&self, basis: &DMatrix<f64>) -> f64 {
        (0..self.len())
            .map(|i| {
                let chi = self.snapshots.column(i).into_owned();
                let r = &chi - project(basis, &self.norm, &chi);
                self.weights[i] * x_norm_sq(&self.norm, &r)
            })
            .sum()
    }
}

/// Leading modes of a weighted POD.
#[derive(Debug, Clone, PartialEq)]
pub struct PodBasis {
    /// X-orthonormal columns.
    pub vectors: DMatrix<f64>,
    /// Every eigenvalue of `C_d` in the snapshot span, nonincreasing.
    pub eigenvalues: Vec<f64>,
    /// Number of eigenvalues above the relative cutoff.
    pub positive_count: usize,
    /// Sum of the eigenvalues not retained.
    pub truncation_energy: f64,
    pub formulation: PodFormulation,
}

impl PodBasis {
    pub fn empty(n: usize, formulation: PodFormulation) -> Self {
        Self {
            vectors: DMatrix::zeros(n, 0),
            eigenvalues: Vec::new(),
            positive_count: 0,
            truncation_energy: 0.0,
            formulation,
        }
    }

    pub fn retained(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn dim(&self) -> usize {
        self.vectors.nrows()
    }

    /// First `n` modes (no recomputation).
    pub fn truncate(&self, n: usize) -> PodBasis {
        let k = n.min(self.retained());
        PodBasis {
            vectors: self.vectors.columns(0, k).into_owned(),
            eigenvalues: self.eigenvalues.clone(),
            positive_count: self.positive_count,
            truncation_energy: self.eigenvalues.iter().skip(k).sum(),
            formulation: self.formulation,
        }
    }
}

/// Tunables of the POD; defaults follow the documented cutoffs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PodOptions {
    pub eigen_rel_tol: f64,
    pub weighted_eigen_rel_tol: f64,
    pub drop_tol: f64,
}

impl Default for PodOptions {
    fn default() -> Self {
        Self {
            eigen_rel_tol: EIGEN_REL_TOL,
            weighted_eigen_rel_tol: WEIGHTED_EIGEN_REL_TOL,
            drop_tol: GS_DROP_TOL,
        }
    }
}

pub fn x_inner(x: &SparseMatrix, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.dot(&DVector::from_vec(x.mul_vec(b.as_slice())))
}

fn x_norm_sq(x: &SparseMatrix, a: &DVector<f64>) -> f64 {
    x_inner(x, a, a)
}

/// `V Vᵀ X v`.
pub fn project(basis: &DMatrix<f64>, x: &SparseMatrix, v: &DVector<f64>) -> DVector<f64> {
    if basis.ncols() == 0 {
        return DVector::zeros(v.len());
    }
    let xv = DVector::from_vec(x.mul_vec(v.as_slice()));
    basis * (basis.transpose() * xv)
}

/// Two passes of modified Gram–Schmidt in the X-inner product. A column whose norm
/// falls below `drop_tol` times its incoming norm is discarded.
pub fn x_orthonormalize(vectors: &DMatrix<f64>, x: &SparseMatrix, drop_tol: f64) -> DMatrix<f64> {
    let mut kept: Vec<DVector<f64>> = Vec::with_capacity(vectors.ncols());
    let mut kept_x: Vec<DVector<f64>> = Vec::with_capacity(vectors.ncols());
    for j in 0..vectors.ncols() {
        let mut v = vectors.column(j).into_owned();
        let n0 = x_norm_sq(x, &v).max(0.0).sqrt();
        if n0 == 0.0 || !n0.is_finite() {
            continue;
        }
        for _ in 0..2 {
            for (q, xq) in kept.iter().zip(&kept_x) {
                let c = xq.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let n1 = x_norm_sq(x, &v).max(0.0).sqrt();
        if n1 <= drop_tol * n0 {
            continue;
        }
        v /= n1;
        kept_x.push(DVector::from_vec(x.mul_vec(v.as_slice())));
        kept.push(v);
    }
    if kept.is_empty() {
        DMatrix::zeros(vectors.nrows(), 0)
    } else {
        DMatrix::from_columns(&kept)
    }
}

fn sorted_desc(values: &[f64], vectors: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let vals = idx.iter().map(|&i| values[i]).collect();
    let cols: Vec<_> = idx.iter().map(|&i| vectors.column(i).into_owned()).collect();
    let vecs = if cols.is_empty() {
        DMatrix::zeros(vectors.nrows(), 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    (vals, vecs)
}

fn count_positive(eigenvalues: &[f64], rel_tol: f64) -> usize {
    match eigenvalues.first() {
        Some(&l1) if l1 > 0.0 => eigenvalues.iter().take_while(|&&l| l > rel_tol * l1).count(),
        _ => 0,
    }
}

fn finish(
    set: &SnapshotSet,
    eigenvalues: Vec<f64>,
    raw: DMatrix<f64>,
    n: usize,
    opts: &PodOptions,
    formulation: PodFormulation,
) -> PodBasis {
    let tol = match formulation {
        PodFormulation::Snapshot => opts.eigen_rel_tol,
        PodFormulation::Weighted => opts.weighted_eigen_rel_tol,
    };
    let k = count_positive(&eigenvalues, tol);
    if k == 0 {
        log::warn!("weighted POD: snapshot set has no positive eigenvalue, returning an empty basis");
        let mut b = PodBasis::empty(set.dim(), formulation);
        b.truncation_energy = eigenvalues.iter().sum();
        b.eigenvalues = eigenvalues;
        return b;
    }
    let keep = n.min(k).min(raw.ncols());
    let vectors = x_orthonormalize(&raw.columns(0, keep).into_owned(), &set.norm, opts.drop_tol);
    let truncation_energy = eigenvalues.iter().skip(vectors.ncols()).sum();
    PodBasis {
        vectors,
        eigenvalues,
        positive_count: k,
        truncation_energy,
        formulation,
    }
}

/// Diagonalizes `C = P G` (`G` the X-Gram matrix, `P = diag(w)`) through the
/// equivalent generalized problem `G x = λ P⁻¹ x`, written as a symmetric problem
/// in a square-root factor of `G` so that negative weights are handled too.
pub fn pod_snapshot_basis(set: &SnapshotSet, n: usize, opts: &PodOptions) -> PodBasis {
    if n == 0 {
        return PodBasis::empty(set.dim(), PodFormulation::Snapshot);
    }
    let s = &set.snapshots;
    let xs = set.norm.mul_dense(s);
    let g = s.transpose() * &xs;
    let g = (&g + g.transpose()) * 0.5;
    let eg = SymmetricEigen::new(g);
    let gmax = eg.eigenvalues.iter().cloned().fold(0.0, f64::max);
    if gmax <= 0.0 {
        return finish(set, Vec::new(), DMatrix::zeros(set.dim(), 0), n, opts, PodFormulation::Snapshot);
    }
    // G = R Rᵀ on its numerically positive part.
    let cols: Vec<DVector<f64>> = (0..eg.eigenvalues.len())
        .filter(|&k| eg.eigenvalues[k] > 1e-15 * gmax)
        .map(|k| eg.eigenvectors.column(k) * eg.eigenvalues[k].sqrt())
        .collect();
    let r = DMatrix::from_columns(&cols);
    let p = DMatrix::from_diagonal(&DVector::from_vec(set.weights.clone()));
    let h = r.transpose() * &p * &r;
    let h = (&h + h.transpose()) * 0.5;
    let eh = SymmetricEigen::new(h);
    let (vals, z) = sorted_desc(eh.eigenvalues.as_slice(), &eh.eigenvectors);
    // x = P R z solves P G x = λ x; the mode is ξ = S x.
    let x = &p * &r * z;
    let raw = s * x;
    finish(set, vals, raw, n, opts, PodFormulation::Snapshot)
}

/// X-orthonormal QR by classical Gram–Schmidt with reorthogonalization.
fn x_qr(w: &DMatrix<f64>, x: &SparseMatrix) -> (DMatrix<f64>, DMatrix<f64>) {
    let (nr, m) = w.shape();
    let mut q = DMatrix::zeros(nr, m);
    let mut xq = DMatrix::zeros(nr, m);
    let mut r = DMatrix::zeros(m, m);
    for j in 0..m {
        let mut v = w.column(j).into_owned();
        let n0 = x_norm_sq(x, &v).max(0.0).sqrt();
        for _ in 0..2 {
            if j > 0 {
                let c = xq.columns(0, j).transpose() * &v;
                v -= q.columns(0, j) * &c;
                for i in 0..j {
                    r[(i, j)] += c[i];
                }
            }
        }
        let xv = DVector::from_vec(x.mul_vec(v.as_slice()));
        let nv = v.dot(&xv).max(0.0).sqrt();
        if nv > 1e-14 * n0 && nv > 0.0 {
            r[(j, j)] = nv;
            q.set_column(j, &(v / nv));
            xq.set_column(j, &(xv / nv));
        }
    }
    (q, r)
}

/// Diagonalizes `C_w = (√w_i √w_j ⟨χ_j, χ_i⟩_X)` through an X-orthonormal QR of
/// the weighted snapshots, `C_w = RᵀR`, and an SVD of the small factor `R`.
/// Eigenvalues of `C_w` are the squared singular values of `R`.
pub fn pod_weighted_snapshot_basis(set: &SnapshotSet, n: usize, opts: &PodOptions) -> Result<PodBasis, PodError> {
    if let Some((index, &value)) = set.weights.iter().enumerate().find(|(_, w)| **w <= 0.0) {
        return Err(PodError::NonPositiveWeight { index, value });
    }
    if n == 0 {
        return Ok(PodBasis::empty(set.dim(), PodFormulation::Weighted));
    }
    let sw = DVector::from_iterator(set.len(), set.weights.iter().map(|w| w.sqrt()));
    let mut w = set.snapshots.clone();
    for (j, s) in sw.iter().enumerate() {
        w.column_mut(j).scale_mut(*s);
    }
    let (q, r) = x_qr(&w, &set.norm);
    let svd = r.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let lambdas: Vec<f64> = svd.singular_values.iter().map(|s| s * s).collect();
    let (vals, u) = sorted_desc(&lambdas, &u);
    let raw = q * u;
    Ok(finish(set, vals, raw, n, opts, PodFormulation::Weighted))
}

pub fn pod_basis(set: &SnapshotSet, n: usize, formulation: PodFormulation, opts: &PodOptions) -> Result<PodBasis, PodError> {
    match formulation {
        PodFormulation::Snapshot => Ok(pod_snapshot_basis(set, n, opts)),
        PodFormulation::Weighted => pod_weighted_snapshot_basis(set, n, opts),
    }
}

/// Independent POD per field. A field whose snapshot span has dimension at most
/// `n` keeps that whole span.
pub fn pod_partitioned(
    sets: &[SnapshotSet],
    n: &[usize],
    formulation: PodFormulation,
    opts: &PodOptions,
) -> Result<Vec<PodBasis>, PodError> {
    if let Some(first) = sets.first() {
        for s in sets {
            if s.len() != first.len() {
                return Err(PodError::InconsistentSets(first.len(), s.len()));
            }
        }
    }
    sets.iter()
        .zip(n)
        .map(|(s, &k)| pod_basis(s, k, formulation, opts))
        .collect()
}

/// `Z = span{state, adjoint}`, X-orthonormalized with drop tolerance.
pub fn aggregate(state: &DMatrix<f64>, adjoint: &DMatrix<f64>, x: &SparseMatrix, drop_tol: f64) -> DMatrix<f64> {
    let mut cols: Vec<DVector<f64>> = state.column_iter().map(|c| c.into_owned()).collect();
    cols.extend(adjoint.column_iter().map(|c| c.into_owned()));
    if cols.is_empty() {
        return DMatrix::zeros(state.nrows(), 0);
    }
    x_orthonormalize(&DMatrix::from_columns(&cols), x, drop_tol)
}

/// Principal angles (radians, ascending) between the spans of two X-orthonormal
/// bases, from the sines so that small angles are resolved to machine precision.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>, x: &SparseMatrix) -> Vec<f64> {
    let (small, big) = if a.ncols() <= b.ncols() { (a, b) } else { (b, a) };
    if small.ncols() == 0 {
        return Vec::new();
    }
    let xs = x.mul_dense(small);
    let resid = small - big * (big.transpose() * &xs);
    let g = resid.transpose() * x.mul_dense(&resid);
    let g = (&g + g.transpose()) * 0.5;
    let mut s2: Vec<f64> = SymmetricEigen::new(g).eigenvalues.iter().map(|v| v.max(0.0)).collect();
    s2.sort_by(f64::total_cmp);
    s2.into_iter().map(|v| v.sqrt().min(1.0).asin()).collect()
}
