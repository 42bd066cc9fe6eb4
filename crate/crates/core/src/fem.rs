//! P1 Lagrange assembly on triangles.
//!
//! All element integrals are exact: gradients are constant per element and the
//! remaining integrands are products of at most two linear functions.

use log::warn;
use thiserror::Error;

use crate::mesh::{BoundaryTag, Mesh};
use crate::sparse::{dot, SparseError, SparseLu, SparseMatrix, TripletBuilder};

#[derive(Debug, Error)]
pub enum FemError {
    #[error("unknown subdomain label '{0}'")]
    UnknownLabel(String),
    #[error("invalid axis {0}; expected 1 or 2")]
    InvalidAxis(usize),
    #[error("no free degrees of freedom")]
    NoFreeDofs,
    #[error("eigenvalue iteration did not converge in {iterations} iterations (last change {change:.3e})")]
    EigenNotConverged { iterations: usize, change: f64 },
    #[error(transparent)]
    Sparse(#[from] SparseError),
}

/// Coordinate direction for first-order terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X1,
    X2,
}

impl TryFrom<usize> for Axis {
    type Error = FemError;

    fn try_from(value: usize) -> Result<Self, Self::Error> {
        match value {
            1 => Ok(Axis::X1),
            2 => Ok(Axis::X2),
            other => Err(FemError::InvalidAxis(other)),
        }
    }
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::X1 => 0,
            Axis::X2 => 1,
        }
    }
}

/// Split of the vertex dofs into homogeneous-Dirichlet and free sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DofMap {
    total: usize,
    dirichlet: Vec<usize>,
    free: Vec<usize>,
    free_index: Vec<Option<usize>>,
}

impl DofMap {
    /// Dirichlet dofs are exactly the vertices of DIRICHLET edges.
    pub fn new(mesh: &Mesh) -> Self {
        Self::with_dirichlet(mesh.num_vertices(), mesh.boundary_vertices(BoundaryTag::Dirichlet))
    }

    /// Every boundary vertex constrained, regardless of tag.
    pub fn all_boundary(mesh: &Mesh) -> Self {
        let mut d: Vec<usize> = mesh.boundary_edges().iter().flat_map(|e| e.vertices).collect();
        d.sort_unstable();
        d.dedup();
        Self::with_dirichlet(mesh.num_vertices(), d)
    }

    pub fn unconstrained(total: usize) -> Self {
        Self::with_dirichlet(total, Vec::new())
    }

    fn with_dirichlet(total: usize, dirichlet: Vec<usize>) -> Self {
        let mut is_d = vec![false; total];
        for &d in &dirichlet {
            is_d[d] = true;
        }
        let free: Vec<usize> = (0..total).filter(|&i| !is_d[i]).collect();
        let mut free_index = vec![None; total];
        for (k, &i) in free.iter().enumerate() {
            free_index[i] = Some(k);
        }
        Self {
            total,
            dirichlet,
            free,
            free_index,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn num_free(&self) -> usize {
        self.free.len()
    }

    pub fn free(&self) -> &[usize] {
        &self.free
    }

    pub fn dirichlet(&self) -> &[usize] {
        &self.dirichlet
    }

    pub fn free_index(&self, vertex: usize) -> Option<usize> {
        self.free_index[vertex]
    }

    /// Free-dof block of a vertex-indexed matrix.
    pub fn restrict(&self, a: &SparseMatrix) -> SparseMatrix {
        a.select(&self.free, &self.free)
    }

    pub fn restrict_vec(&self, v: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&i| v[i]).collect()
    }

    /// Free-dof vector extended by zeros on the Dirichlet vertices.
    pub fn extend(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.free.len());
        let mut out = vec![0.0; self.total];
        for (k, &i) in self.free.iter().enumerate() {
            out[i] = v[k];
        }
        out
    }

    /// `total × free` injection matrix.
    pub fn injection(&self) -> SparseMatrix {
        let mut b = TripletBuilder::with_capacity(self.total, self.free.len(), self.free.len());
        for (k, &i) in self.free.iter().enumerate() {
            b.push(i, k, 1.0);
        }
        b.build()
    }
}

/// Per-element geometry: vertices, area and the (constant) basis gradients.
#[derive(Debug, Clone, Copy)]
struct Element {
    v: [usize; 3],
    area: f64,
    grad: [[f64; 2]; 3],
}

fn elements(mesh: &Mesh) -> impl Iterator<Item = (usize, Element)> + '_ {
    mesh.triangles().iter().enumerate().map(move |(t, &v)| {
        let p = v.map(|i| mesh.vertices()[i]);
        let area2 = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
        let mut grad = [[0.0; 2]; 3];
        for k in 0..3 {
            let (j, l) = ((k + 1) % 3, (k + 2) % 3);
            grad[k] = [(p[j][1] - p[l][1]) / area2, (p[l][0] - p[j][0]) / area2];
        }
        (
            t,
            Element {
                v,
                area: 0.5 * area2,
                grad,
            },
        )
    })
}

fn check_label(mesh: &Mesh, label: Option<&str>) -> Result<(), FemError> {
    match label {
        Some(l) if !mesh.has_label(l) => Err(FemError::UnknownLabel(l.to_string())),
        _ => Ok(()),
    }
}

/// `∫ φ_j φ_i`, optionally restricted to the triangles labelled `restriction`.
pub fn assemble_mass(mesh: &Mesh, restriction: Option<&str>) -> Result<SparseMatrix, FemError> {
    check_label(mesh, restriction)?;
    let n = mesh.num_vertices();
    let mut b = TripletBuilder::with_capacity(n, n, 9 * mesh.num_triangles());
    for (t, e) in elements(mesh) {
        if restriction.is_some_and(|l| mesh.labels()[t] != l) {
            continue;
        }
        for i in 0..3 {
            for j in 0..3 {
                let f = if i == j { 2.0 } else { 1.0 };
                b.push(e.v[i], e.v[j], e.area * f / 12.0);
            }
        }
    }
    Ok(b.build())
}

/// `∫ ∇φ_j · ∇φ_i`
pub fn assemble_stiffness(mesh: &Mesh) -> SparseMatrix {
    let n = mesh.num_vertices();
    let mut b = TripletBuilder::with_capacity(n, n, 9 * mesh.num_triangles());
    for (_, e) in elements(mesh) {
        for i in 0..3 {
            for j in 0..3 {
                let g = e.grad[i][0] * e.grad[j][0] + e.grad[i][1] * e.grad[j][1];
                b.push(e.v[i], e.v[j], e.area * g);
            }
        }
    }
    b.build()
}

/// Entry `(i, j) = ∫ (∂φ_j/∂x_d) φ_i`.
pub fn assemble_advection(mesh: &Mesh, axis: Axis) -> SparseMatrix {
    let d = axis.index();
    let n = mesh.num_vertices();
    let mut b = TripletBuilder::with_capacity(n, n, 9 * mesh.num_triangles());
    for (_, e) in elements(mesh) {
        for i in 0..3 {
            for j in 0..3 {
                b.push(e.v[i], e.v[j], e.grad[j][d] * e.area / 3.0);
            }
        }
    }
    b.build()
}

/// `∫_{Γ_tag} φ_j φ_i ds`
pub fn assemble_boundary_mass(mesh: &Mesh, tag: BoundaryTag) -> SparseMatrix {
    let n = mesh.num_vertices();
    let mut b = TripletBuilder::new(n, n);
    let mut count = 0;
    for e in mesh.boundary_edges().iter().filter(|e| e.tag == tag) {
        count += 1;
        let [p, q] = e.vertices.map(|i| mesh.vertices()[i]);
        let h = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt();
        for i in 0..2 {
            for j in 0..2 {
                let f = if i == j { 2.0 } else { 1.0 };
                b.push(e.vertices[i], e.vertices[j], h * f / 6.0);
            }
        }
    }
    if count == 0 {
        warn!("no boundary edges tagged {tag:?}; boundary mass is zero");
    }
    b.build()
}

/// `∫ φ_i`, optionally over one labelled region.
pub fn assemble_load(mesh: &Mesh, restriction: Option<&str>) -> Result<Vec<f64>, FemError> {
    check_label(mesh, restriction)?;
    let mut f = vec![0.0; mesh.num_vertices()];
    for (t, e) in elements(mesh) {
        if restriction.is_some_and(|l| mesh.labels()[t] != l) {
            continue;
        }
        for &v in &e.v {
            f[v] += e.area / 3.0;
        }
    }
    Ok(f)
}

/// Nodal interpolant of `f`.
pub fn interpolate(mesh: &Mesh, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    mesh.vertices().iter().map(|p| f(p[0], p[1])).collect()
}

/// `t(v, ρ, w) = ∫ F(v, ρ) w` with `F(v, ρ) = ∂v/∂x₁ ∂ρ/∂x₂ − ∂v/∂x₂ ∂ρ/∂x₁`,
/// all arguments vertex-indexed P1 coefficient vectors.
#[derive(Debug, Clone)]
pub struct TrilinearForm {
    elements: Vec<Element>,
    n: usize,
}

impl TrilinearForm {
    pub fn new(mesh: &Mesh) -> Self {
        Self {
            elements: elements(mesh).map(|(_, e)| e).collect(),
            n: mesh.num_vertices(),
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn gradient(e: &Element, u: &[f64]) -> [f64; 2] {
        let mut g = [0.0; 2];
        for k in 0..3 {
            g[0] += u[e.v[k]] * e.grad[k][0];
            g[1] += u[e.v[k]] * e.grad[k][1];
        }
        g
    }

    #[inline]
    fn jac(a: [f64; 2], b: [f64; 2]) -> f64 {
        a[0] * b[1] - a[1] * b[0]
    }

    pub fn evaluate(&self, v: &[f64], rho: &[f64], w: &[f64]) -> f64 {
        self.elements
            .iter()
            .map(|e| {
                let f = Self::jac(Self::gradient(e, v), Self::gradient(e, rho));
                f * e.area / 3.0 * (w[e.v[0]] + w[e.v[1]] + w[e.v[2]])
            })
            .sum()
    }

    /// Vector `[t(v, ρ, φ_i)]_i`.
    pub fn apply(&self, v: &[f64], rho: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for e in &self.elements {
            let f = Self::jac(Self::gradient(e, v), Self::gradient(e, rho)) * e.area / 3.0;
            for &i in &e.v {
                out[i] += f;
            }
        }
        out
    }

    /// Matrix `[t(φ_j, ρ, φ_i)]_{ij}`, the derivative in the first slot.
    pub fn derivative_first(&self, rho: &[f64]) -> SparseMatrix {
        let mut b = TripletBuilder::with_capacity(self.n, self.n, 9 * self.elements.len());
        for e in &self.elements {
            let gr = Self::gradient(e, rho);
            for j in 0..3 {
                let f = Self::jac(e.grad[j], gr) * e.area / 3.0;
                for i in 0..3 {
                    b.push(e.v[i], e.v[j], f);
                }
            }
        }
        b.build()
    }

    /// Matrix `[t(v, φ_j, φ_i)]_{ij}`, the derivative in the second slot.
    pub fn derivative_second(&self, v: &[f64]) -> SparseMatrix {
        let mut b = TripletBuilder::with_capacity(self.n, self.n, 9 * self.elements.len());
        for e in &self.elements {
            let gv = Self::gradient(e, v);
            for j in 0..3 {
                let f = Self::jac(gv, e.grad[j]) * e.area / 3.0;
                for i in 0..3 {
                    b.push(e.v[i], e.v[j], f);
                }
            }
        }
        b.build()
    }

    /// Matrix `[t(φ_j, φ_k, w)]_{jk}`, the mixed second derivative of `t(·, ·, w)`.
    pub fn mixed_hessian(&self, w: &[f64]) -> SparseMatrix {
        let mut b = TripletBuilder::with_capacity(self.n, self.n, 9 * self.elements.len());
        for e in &self.elements {
            let wi = e.area / 3.0 * (w[e.v[0]] + w[e.v[1]] + w[e.v[2]]);
            for j in 0..3 {
                for k in 0..3 {
                    if j != k {
                        b.push(e.v[j], e.v[k], Self::jac(e.grad[j], e.grad[k]) * wi);
                    }
                }
            }
        }
        b.build()
    }

    /// Vector `[t(φ_j, ρ, w)]_j`.
    pub fn gradient_first(&self, rho: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for e in &self.elements {
            let gr = Self::gradient(e, rho);
            let wi = e.area / 3.0 * (w[e.v[0]] + w[e.v[1]] + w[e.v[2]]);
            for j in 0..3 {
                out[e.v[j]] += Self::jac(e.grad[j], gr) * wi;
            }
        }
        out
    }

    /// Vector `[t(v, φ_j, w)]_j`.
    pub fn gradient_second(&self, v: &[f64], w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for e in &self.elements {
            let gv = Self::gradient(e, v);
            let wi = e.area / 3.0 * (w[e.v[0]] + w[e.v[1]] + w[e.v[2]]);
            for j in 0..3 {
                out[e.v[j]] += Self::jac(gv, e.grad[j]) * wi;
            }
        }
        out
    }
}

const EIGEN_TOL: f64 = 1e-10;
const EIGEN_MAX_ITER: usize = 20_000;

/// Largest `λ` of `B x = λ A x` (`A` SPD, `B` SPSD) by inverse power iteration.
pub fn max_generalized_eigenvalue(a: &SparseMatrix, b: &SparseMatrix) -> Result<f64, FemError> {
    let n = a.nrows();
    if n == 0 {
        return Err(FemError::NoFreeDofs);
    }
    let lu = SparseLu::factor(a)?;
    // Deterministic, non-degenerate start.
    let mut x: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * ((i * 7919) % 13) as f64).collect();
    let mut lambda = 0.0;
    let mut change = f64::INFINITY;
    for it in 0..EIGEN_MAX_ITER {
        let bx = b.mul_vec(&x);
        let y = lu.solve(&bx);
        let ay = a.mul_vec(&y);
        let num = dot(&y, &b.mul_vec(&y));
        let den = dot(&y, &ay);
        if den <= 0.0 {
            return Ok(0.0);
        }
        let next = num / den;
        let scale = den.sqrt();
        x = y.iter().map(|v| v / scale).collect();
        change = (next - lambda).abs();
        if it > 0 && change <= EIGEN_TOL * next.abs().max(f64::MIN_POSITIVE) {
            return Ok(next);
        }
        if next == 0.0 {
            return Ok(0.0);
        }
        lambda = next;
    }
    Err(FemError::EigenNotConverged {
        iterations: EIGEN_MAX_ITER,
        change,
    })
}

/// Smallest `C_p` with `‖u‖²_{L²} ≤ C_p ‖∇u‖²_{L²}` on the Dirichlet-constrained P1 space.
pub fn compute_poincare_constant(mesh: &Mesh) -> Result<f64, FemError> {
    let dofs = DofMap::new(mesh);
    if dofs.num_free() == 0 {
        return Err(FemError::NoFreeDofs);
    }
    let k = dofs.restrict(&assemble_stiffness(mesh));
    let m = dofs.restrict(&assemble_mass(mesh, None)?);
    max_generalized_eigenvalue(&k, &m)
}

/// Smallest `C_t` with `‖u‖²_{L²(Γ_N)} ≤ C_t ‖u‖²_{H¹}` on the Dirichlet-constrained P1 space.
pub fn compute_trace_constant(mesh: &Mesh) -> Result<f64, FemError> {
    let dofs = DofMap::new(mesh);
    if dofs.num_free() == 0 {
        return Err(FemError::NoFreeDofs);
    }
    let h1 = dofs.restrict(&assemble_stiffness(mesh).add(&assemble_mass(mesh, None)?)?);
    let g = dofs.restrict(&assemble_boundary_mass(mesh, BoundaryTag::Neumann));
    max_generalized_eigenvalue(&h1, &g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{generate_structured_rectangle, BoundaryEdge, Rect, TaggingPolicy, BULK};
    use nalgebra::DMatrix;

    fn right_triangle() -> Mesh {
        let v = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let b = [[0, 1], [1, 2], [2, 0]]
            .into_iter()
            .map(|vertices| BoundaryEdge { vertices, tag: BoundaryTag::Neumann })
            .collect();
        Mesh::new(v, vec![[0, 1, 2]], b, vec![BULK.into()]).unwrap()
    }

    #[test]
    fn element_mass_matrix() {
        let m = assemble_mass(&right_triangle(), None).unwrap().to_dense();
        let expected = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 1.0, 1.0, 2.0, 1.0, 1.0, 1.0, 2.0]) / 24.0;
        assert!((m - expected).amax() < 1e-15);
    }

    #[test]
    fn element_stiffness_matrix() {
        let k = assemble_stiffness(&right_triangle()).to_dense();
        let expected = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, -1.0, -1.0, 1.0, 0.0, -1.0, 0.0, 1.0]) * 0.5;
        assert!((k - expected).amax() < 1e-15);
    }

    #[test]
    fn invalid_axis_rejected() {
        assert!(matches!(Axis::try_from(3), Err(FemError::InvalidAxis(3))));
        assert_eq!(Axis::try_from(2).unwrap(), Axis::X2);
    }

    #[test]
    fn unknown_label_rejected() {
        let m = right_triangle();
        assert!(matches!(assemble_mass(&m, Some("nowhere")), Err(FemError::UnknownLabel(_))));
    }

    #[test]
    fn dofmap_partitions_vertices() {
        let m = generate_structured_rectangle(3, 3, Rect::unit(), &TaggingPolicy::open_south_west(), &[])
            .unwrap();
        let d = DofMap::new(&m);
        assert_eq!(d.num_free() + d.dirichlet().len(), d.total());
        // East and north sides: 4 + 4 - 1 shared corner.
        assert_eq!(d.dirichlet().len(), 7);
        let v: Vec<f64> = (0..d.num_free()).map(|i| i as f64).collect();
        assert_eq!(d.restrict_vec(&d.extend(&v)), v);
    }

    #[test]
    fn boundary_mass_single_edge() {
        let m = right_triangle();
        let g = assemble_boundary_mass(&m, BoundaryTag::Neumann);
        // Edge 0-1 has length 1 and only it touches the (0,1) pair.
        assert!((g.get(0, 1) - 1.0 / 6.0).abs() < 1e-15);
        let total: f64 = g.values().iter().sum();
        assert!((total - (2.0 + 2f64.sqrt())).abs() < 1e-14);
    }
}
