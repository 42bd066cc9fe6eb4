//! Linear-quadratic optimal control problems with affine parameter dependence,
//! their truth KKT systems, and the three built-in cases.
//!
//! Unknowns are ordered `(y, u, p)`. The block rows are the adjoint equation,
//! the optimality condition and the state equation:
//!
//! ```text
//! [ CᵀMC   0    Aᵀ ] [y]   [ CᵀM z_d ]
//! [  0    αQ    Bᵀ ] [u] = [    0    ]
//! [  A     B    0  ] [p]   [    g    ]
//! ```

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fem::{self, Axis, DofMap, FemError, TrilinearForm};
use crate::mesh::{
    generate_structured_rectangle, Mesh, MeshError, Rect, SubdomainBox, TaggingPolicy, CONTROL_REGION,
    OBSERVATION_REGION,
};
use crate::sparse::{dot, norm2, SparseError, SparseLu, SparseMatrix, TripletBuilder};

/// KKT systems are accepted when the relative residual is below this.
pub const KKT_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum OcpError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("parameter has {got} components, case expects {expected}")]
    ParameterDimension { expected: usize, got: usize },
    #[error("KKT system is singular or ill-posed at mu = {mu:?}: {detail}")]
    Singular { mu: Vec<f64>, detail: String },
    #[error("Newton diverged at mu = {mu:?}; residual trace {trace:?}")]
    NewtonDiverged { mu: Vec<f64>, trace: Vec<f64> },
    #[error("Newton did not reach tolerance in {iterations} iterations at mu = {mu:?}; residual trace {trace:?}")]
    NewtonMaxIter {
        mu: Vec<f64>,
        iterations: usize,
        trace: Vec<f64>,
    },
    #[error("case `{0}` has an active nonlinear term; use the Newton solver")]
    Nonlinear(String),
    #[error("unknown case `{0}` (expected gulf, stommel_munk or qg_nonlinear)")]
    UnknownCase(String),
    #[error("mesh lacks subdomain label `{0}`")]
    MissingLabel(String),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

/// Scalar coefficient `Λ(μ)` of one affine term.
#[derive(Clone)]
pub enum Coefficient {
    One,
    Param(usize),
    Const(f64),
    Custom(String, Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl Coefficient {
    pub fn eval(&self, mu: &[f64]) -> f64 {
        match self {
            Coefficient::One => 1.0,
            Coefficient::Param(i) => mu[*i],
            Coefficient::Const(c) => *c,
            Coefficient::Custom(_, f) => f(mu),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Coefficient::One | Coefficient::Const(_))
    }

    /// Text form used in model manifests: `1`, `mu<k>` (1-based) or `const:<value>`.
    /// Custom closures have none.
    pub fn to_spec(&self) -> Option<String> {
        match self {
            Coefficient::One => Some("1".into()),
            Coefficient::Param(i) => Some(format!("mu{}", i + 1)),
            Coefficient::Const(c) => Some(format!("const:{c:e}")),
            Coefficient::Custom(..) => None,
        }
    }

    pub fn from_spec(s: &str) -> Option<Self> {
        if s == "1" {
            return Some(Coefficient::One);
        }
        if let Some(k) = s.strip_prefix("mu") {
            return k.parse::<usize>().ok().filter(|&k| k >= 1).map(|k| Coefficient::Param(k - 1));
        }
        s.strip_prefix("const:")?.parse().ok().map(Coefficient::Const)
    }
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Coefficient::One => write!(f, "1"),
            Coefficient::Param(i) => write!(f, "mu{}", i + 1),
            Coefficient::Const(c) => write!(f, "{c}"),
            Coefficient::Custom(name, _) => write!(f, "{name}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AffineTerm<T> {
    pub name: String,
    pub coefficient: Coefficient,
    pub value: T,
}

/// `Σ_q Λ_q(μ) A_q` with sparse blocks of a common shape.
#[derive(Debug, Clone)]
pub struct AffineMatrix {
    nrows: usize,
    ncols: usize,
    terms: Vec<AffineTerm<SparseMatrix>>,
}

impl AffineMatrix {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            terms: Vec::new(),
        }
    }

    pub fn single(name: &str, coefficient: Coefficient, value: SparseMatrix) -> Result<Self, OcpError> {
        let (r, c) = value.shape();
        Self::new(r, c).with_term(name, coefficient, value)
    }

    pub fn with_term(mut self, name: &str, coefficient: Coefficient, value: SparseMatrix) -> Result<Self, OcpError> {
        if value.shape() != (self.nrows, self.ncols) {
            return Err(SparseError::Dimension {
                expected: (self.nrows, self.ncols),
                got: value.shape(),
            }
            .into());
        }
        self.terms.push(AffineTerm {
            name: name.to_string(),
            coefficient,
            value,
        });
        Ok(self)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nrows, self.ncols)
    }

    pub fn terms(&self) -> &[AffineTerm<SparseMatrix>] {
        &self.terms
    }

    pub fn coefficients(&self, mu: &[f64]) -> Vec<f64> {
        self.terms.iter().map(|t| t.coefficient.eval(mu)).collect()
    }

    /// Terms are accumulated in declaration order, so the result is reproducible bit for bit.
    pub fn evaluate(&self, mu: &[f64]) -> SparseMatrix {
        let c = self.coefficients(mu);
        let terms: Vec<(f64, &SparseMatrix)> = c.iter().copied().zip(self.terms.iter().map(|t| &t.value)).collect();
        SparseMatrix::linear_combination(&terms, self.nrows, self.ncols).expect("shapes checked on insertion")
    }

    pub fn is_parameter_independent(&self) -> bool {
        self.terms.iter().all(|t| t.coefficient.is_constant())
    }
}

/// `Σ_q Λ_q(μ) v_q`.
#[derive(Debug, Clone)]
pub struct AffineVector {
    len: usize,
    terms: Vec<AffineTerm<Vec<f64>>>,
}

impl AffineVector {
    pub fn new(len: usize) -> Self {
        Self { len, terms: Vec::new() }
    }

    pub fn single(name: &str, coefficient: Coefficient, value: Vec<f64>) -> Self {
        Self {
            len: value.len(),
            terms: vec![AffineTerm {
                name: name.to_string(),
                coefficient,
                value,
            }],
        }
    }

    pub fn with_term(mut self, name: &str, coefficient: Coefficient, value: Vec<f64>) -> Result<Self, OcpError> {
        if value.len() != self.len {
            return Err(OcpError::Dimension {
                what: format!("vector term {name}"),
                expected: self.len,
                got: value.len(),
            });
        }
        self.terms.push(AffineTerm {
            name: name.to_string(),
            coefficient,
            value,
        });
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn terms(&self) -> &[AffineTerm<Vec<f64>>] {
        &self.terms
    }

    pub fn evaluate(&self, mu: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for t in &self.terms {
            let c = t.coefficient.eval(mu);
            for (o, v) in out.iter_mut().zip(&t.value) {
                *o += c * v;
            }
        }
        out
    }
}

/// A named block of one unknown group, with the matrix of its inner product.
#[derive(Debug, Clone)]
pub struct Field {
    pub name: String,
    pub range: Range<usize>,
    pub norm: SparseMatrix,
}

impl Field {
    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }

    pub fn slice<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        &x[self.range.clone()]
    }

    pub fn norm_of(&self, x: &[f64]) -> f64 {
        self.norm.quad_form(x).max(0.0).sqrt()
    }
}

/// Partition of state, control and adjoint vectors into fields. The i-th state
/// field and the i-th adjoint field share a dof layout (needed for aggregation).
#[derive(Debug, Clone)]
pub struct FieldLayout {
    pub state: Vec<Field>,
    pub control: Vec<Field>,
    pub adjoint: Vec<Field>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldGroup {
    State,
    Control,
    Adjoint,
}

impl FieldLayout {
    fn build(specs: &[(&str, SparseMatrix)]) -> Vec<Field> {
        let mut offset = 0;
        specs
            .iter()
            .map(|(name, norm)| {
                let f = Field {
                    name: name.to_string(),
                    range: offset..offset + norm.nrows(),
                    norm: norm.clone(),
                };
                offset += norm.nrows();
                f
            })
            .collect()
    }

    pub fn new(
        state: &[(&str, SparseMatrix)],
        control: &[(&str, SparseMatrix)],
        adjoint: &[(&str, SparseMatrix)],
    ) -> Self {
        Self {
            state: Self::build(state),
            control: Self::build(control),
            adjoint: Self::build(adjoint),
        }
    }

    pub fn group(&self, g: FieldGroup) -> &[Field] {
        match g {
            FieldGroup::State => &self.state,
            FieldGroup::Control => &self.control,
            FieldGroup::Adjoint => &self.adjoint,
        }
    }

    pub fn dim(&self, g: FieldGroup) -> usize {
        self.group(g).last().map_or(0, |f| f.range.end)
    }

    /// Block-diagonal inner-product matrix of a whole group.
    pub fn norm_matrix(&self, g: FieldGroup) -> SparseMatrix {
        let n = self.dim(g);
        let mut b = TripletBuilder::new(n, n);
        for f in self.group(g) {
            b.push_block(&f.norm, f.range.start, f.range.start, 1.0);
        }
        b.build()
    }
}

/// `μ_k · t(v, ρ, ṽ)` added to the state equation, with `v`, `ρ` two state fields
/// and `ṽ` ranging over the test functions of one adjoint field.
#[derive(Debug, Clone)]
pub struct Nonlinearity {
    pub form: TrilinearForm,
    pub dofs: DofMap,
    pub coefficient: Coefficient,
    /// State field in the first slot.
    pub first: usize,
    /// State field in the second slot.
    pub second: usize,
    /// Adjoint field whose equation rows receive the term.
    pub test: usize,
}

/// Slots of the nonlinearity, as vertex vectors.
struct Slots {
    v: Vec<f64>,
    rho: Vec<f64>,
    w: Vec<f64>,
}

impl Nonlinearity {
    fn slots(&self, layout: &FieldLayout, y: &[f64], p: &[f64]) -> Slots {
        Slots {
            v: self.dofs.extend(layout.state[self.first].slice(y)),
            rho: self.dofs.extend(layout.state[self.second].slice(y)),
            w: self.dofs.extend(layout.adjoint[self.test].slice(p)),
        }
    }

    /// `N(y)` in equation (adjoint-indexed) coordinates.
    pub fn state_term(&self, layout: &FieldLayout, y: &[f64]) -> Vec<f64> {
        let v = self.dofs.extend(layout.state[self.first].slice(y));
        let rho = self.dofs.extend(layout.state[self.second].slice(y));
        let mut out = vec![0.0; layout.dim(FieldGroup::Adjoint)];
        let r = self.dofs.restrict_vec(&self.form.apply(&v, &rho));
        out[layout.adjoint[self.test].range.clone()].copy_from_slice(&r);
        out
    }

    /// `∇_y ⟨p, N(y)⟩` in state coordinates.
    pub fn adjoint_term(&self, layout: &FieldLayout, y: &[f64], p: &[f64]) -> Vec<f64> {
        let s = self.slots(layout, y, p);
        let mut out = vec![0.0; layout.dim(FieldGroup::State)];
        let g1 = self.dofs.restrict_vec(&self.form.gradient_first(&s.rho, &s.w));
        let g2 = self.dofs.restrict_vec(&self.form.gradient_second(&s.v, &s.w));
        for (o, g) in out[layout.state[self.first].range.clone()].iter_mut().zip(&g1) {
            *o += g;
        }
        for (o, g) in out[layout.state[self.second].range.clone()].iter_mut().zip(&g2) {
            *o += g;
        }
        out
    }

    /// Jacobian `DN(y)` (equation rows × state columns).
    pub fn jacobian(&self, layout: &FieldLayout, y: &[f64]) -> SparseMatrix {
        let v = self.dofs.extend(layout.state[self.first].slice(y));
        let rho = self.dofs.extend(layout.state[self.second].slice(y));
        let d1 = self.dofs.restrict(&self.form.derivative_first(&rho));
        let d2 = self.dofs.restrict(&self.form.derivative_second(&v));
        let mut b = TripletBuilder::new(layout.dim(FieldGroup::Adjoint), layout.dim(FieldGroup::State));
        let row = layout.adjoint[self.test].range.start;
        b.push_block(&d1, row, layout.state[self.first].range.start, 1.0);
        b.push_block(&d2, row, layout.state[self.second].range.start, 1.0);
        b.build()
    }

    /// Hessian of `⟨p, N(y)⟩` in `y` (state × state, symmetric).
    pub fn hessian(&self, layout: &FieldLayout, p: &[f64]) -> SparseMatrix {
        let w = self.dofs.extend(layout.adjoint[self.test].slice(p));
        let h = self.dofs.restrict(&self.form.mixed_hessian(&w));
        let n = layout.dim(FieldGroup::State);
        let mut b = TripletBuilder::new(n, n);
        let (r1, r2) = (layout.state[self.first].range.start, layout.state[self.second].range.start);
        b.push_block(&h, r1, r2, 1.0);
        b.push_block_transposed(&h, r2, r1, 1.0);
        b.build()
    }
}

/// The sextuple `(A, B, M, Q, g, z_d)` plus observation map, norms and scalars.
#[derive(Debug, Clone)]
pub struct OcpDefinition {
    pub name: String,
    /// Equation (adjoint) space × state space.
    pub a: AffineMatrix,
    /// Equation space × control space.
    pub b: AffineMatrix,
    /// Observation map, observation space × state space.
    pub c: SparseMatrix,
    pub m: AffineMatrix,
    /// Control Gram matrix; the KKT uses `α Q`.
    pub q: AffineMatrix,
    pub g: AffineVector,
    pub z_d: AffineVector,
    pub alpha: f64,
    pub l0: f64,
    pub layout: FieldLayout,
    pub parameter_box: Vec<(f64, f64)>,
    pub nonlinearity: Option<Nonlinearity>,
}

/// Truth solution at one parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSolution {
    pub mu: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub p: Vec<f64>,
    pub objective: f64,
    /// Relative residual of the full KKT system.
    pub residual: f64,
    /// Newton iterations (0 for a direct linear solve).
    pub iterations: usize,
    pub residual_trace: Vec<f64>,
}

impl TruthSolution {
    pub fn group(&self, g: FieldGroup) -> &[f64] {
        match g {
            FieldGroup::State => &self.y,
            FieldGroup::Control => &self.u,
            FieldGroup::Adjoint => &self.p,
        }
    }
}

/// Assembled saddle system.
#[derive(Debug, Clone)]
pub struct KktSystem {
    pub matrix: SparseMatrix,
    pub rhs: Vec<f64>,
    pub ny: usize,
    pub nu: usize,
    pub np: usize,
}

impl KktSystem {
    pub fn split(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (ny, nu) = (self.ny, self.nu);
        (x[..ny].to_vec(), x[ny..ny + nu].to_vec(), x[ny + nu..].to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Halve the step (up to 10 times) while the residual increases.
    pub damping: bool,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 25,
            damping: false,
        }
    }
}

/// Saddle matrix `[[H, 0, Jᵀ], [0, R, Bᵀ], [J, B, 0]]`.
pub fn assemble_saddle(h: &SparseMatrix, r: &SparseMatrix, j: &SparseMatrix, b: &SparseMatrix) -> SparseMatrix {
    let (ny, nu, np) = (h.nrows(), r.nrows(), j.nrows());
    let n = ny + nu + np;
    let mut t = TripletBuilder::with_capacity(n, n, h.nnz() + r.nnz() + 2 * (j.nnz() + b.nnz()));
    t.push_block(h, 0, 0, 1.0);
    t.push_block_transposed(j, 0, ny + nu, 1.0);
    t.push_block(r, ny, ny, 1.0);
    t.push_block_transposed(b, ny, ny + nu, 1.0);
    t.push_block(j, ny + nu, 0, 1.0);
    t.push_block(b, ny + nu, ny, 1.0);
    t.build()
}

/// `Σ (Cx)ᵀ M (Cx)`-type helpers on sparse operators.
fn ctmc(c: &SparseMatrix, m: &SparseMatrix) -> SparseMatrix {
    // Small enough to go through dense-free sparse products by rows.
    let ct = c.transpose();
    let mc = sparse_product(m, c);
    sparse_product(&ct, &mc)
}

/// Sparse × sparse product.
pub fn sparse_product(a: &SparseMatrix, b: &SparseMatrix) -> SparseMatrix {
    assert_eq!(a.ncols(), b.nrows());
    let mut t = TripletBuilder::new(a.nrows(), b.ncols());
    for i in 0..a.nrows() {
        for (k, av) in a.row(i) {
            for (j, bv) in b.row(k) {
                t.push(i, j, av * bv);
            }
        }
    }
    t.build()
}

impl OcpDefinition {
    pub fn num_parameters(&self) -> usize {
        self.parameter_box.len()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (
            self.layout.dim(FieldGroup::State),
            self.layout.dim(FieldGroup::Control),
            self.layout.dim(FieldGroup::Adjoint),
        )
    }

    pub fn contains(&self, mu: &[f64]) -> bool {
        mu.len() == self.parameter_box.len()
            && mu.iter().zip(&self.parameter_box).all(|(x, (lo, hi))| x >= lo && x <= hi)
    }

    pub fn check_parameter(&self, mu: &[f64]) -> Result<(), OcpError> {
        if mu.len() != self.num_parameters() {
            return Err(OcpError::ParameterDimension {
                expected: self.num_parameters(),
                got: mu.len(),
            });
        }
        Ok(())
    }

    /// Consistency of every block with the field layout.
    pub fn validate(&self) -> Result<(), OcpError> {
        let (ny, nu, np) = self.dims();
        let nz = self.c.nrows();
        let checks = [
            ("A rows", np, self.a.shape().0),
            ("A cols", ny, self.a.shape().1),
            ("B rows", np, self.b.shape().0),
            ("B cols", nu, self.b.shape().1),
            ("C cols", ny, self.c.ncols()),
            ("M rows", nz, self.m.shape().0),
            ("M cols", nz, self.m.shape().1),
            ("Q rows", nu, self.q.shape().0),
            ("Q cols", nu, self.q.shape().1),
            ("g", np, self.g.len()),
            ("z_d", nz, self.z_d.len()),
            ("square state/adjoint", ny, np),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(OcpError::Dimension {
                    what: what.into(),
                    expected,
                    got,
                });
            }
        }
        Ok(())
    }

    pub fn nonlinear_coefficient(&self, mu: &[f64]) -> f64 {
        self.nonlinearity.as_ref().map_or(0.0, |n| n.coefficient.eval(mu))
    }

    pub fn is_nonlinear_at(&self, mu: &[f64]) -> bool {
        self.nonlinear_coefficient(mu) != 0.0
    }

    /// `J = ½ (Cy − z_d)ᵀ M (Cy − z_d) + ½ α uᵀ Q u`.
    pub fn objective(&self, mu: &[f64], y: &[f64], u: &[f64]) -> f64 {
        let zd = self.z_d.evaluate(mu);
        let r: Vec<f64> = self.c.mul_vec(y).iter().zip(&zd).map(|(a, b)| a - b).collect();
        0.5 * self.m.evaluate(mu).quad_form(&r) + 0.5 * self.alpha * self.q.evaluate(mu).quad_form(u)
    }

    /// Linear KKT system at `μ` (any nonlinear term is left out).
    pub fn assemble_kkt(&self, mu: &[f64]) -> Result<KktSystem, OcpError> {
        self.check_parameter(mu)?;
        self.validate()?;
        let (ny, nu, np) = self.dims();
        let m = self.m.evaluate(mu);
        let h = ctmc(&self.c, &m);
        let r = self.q.evaluate(mu).scaled(self.alpha);
        let a = self.a.evaluate(mu);
        let b = self.b.evaluate(mu);
        let matrix = assemble_saddle(&h, &r, &a, &b);
        let mut rhs = vec![0.0; ny + nu + np];
        let ctmz = self.c.mul_vec_transposed(&m.mul_vec(&self.z_d.evaluate(mu)));
        rhs[..ny].copy_from_slice(&ctmz);
        rhs[ny + nu..].copy_from_slice(&self.g.evaluate(mu));
        Ok(KktSystem { matrix, rhs, ny, nu, np })
    }

    /// Full KKT residual `F(y, u, p)` including the nonlinear term, and `‖F(0)‖`.
    pub fn kkt_residual(&self, mu: &[f64], y: &[f64], u: &[f64], p: &[f64]) -> Result<(Vec<f64>, f64), OcpError> {
        let sys = self.assemble_kkt(mu)?;
        let x: Vec<f64> = y.iter().chain(u).chain(p).copied().collect();
        let mut r: Vec<f64> = sys.matrix.mul_vec(&x).iter().zip(&sys.rhs).map(|(a, b)| a - b).collect();
        if let Some(nl) = &self.nonlinearity {
            let c = nl.coefficient.eval(mu);
            if c != 0.0 {
                let adj = nl.adjoint_term(&self.layout, y, p);
                let st = nl.state_term(&self.layout, y);
                for (ri, a) in r[..sys.ny].iter_mut().zip(&adj) {
                    *ri += c * a;
                }
                for (ri, s) in r[sys.ny + sys.nu..].iter_mut().zip(&st) {
                    *ri += c * s;
                }
            }
        }
        Ok((r, norm2(&sys.rhs)))
    }
}

fn relative(r: f64, scale: f64) -> f64 {
    if scale > 0.0 {
        r / scale
    } else {
        r
    }
}

/// Direct sparse LU solve of the linear KKT system.
pub fn solve_truth(def: &OcpDefinition, mu: &[f64]) -> Result<TruthSolution, OcpError> {
    if def.is_nonlinear_at(mu) {
        return Err(OcpError::Nonlinear(def.name.clone()));
    }
    let sys = def.assemble_kkt(mu)?;
    let singular = |detail: String| OcpError::Singular {
        mu: mu.to_vec(),
        detail,
    };
    let lu = SparseLu::factor(&sys.matrix).map_err(|e| singular(e.to_string()))?;
    let mut x = lu.solve(&sys.rhs);
    // One step of iterative refinement; the blocks differ in scale by many orders.
    let r: Vec<f64> = sys.matrix.mul_vec(&x).iter().zip(&sys.rhs).map(|(a, b)| b - a).collect();
    x.iter_mut().zip(lu.solve(&r)).for_each(|(a, d)| *a += d);
    let res = crate::sparse::relative_residual(&sys.matrix, &x, &sys.rhs);
    if !res.is_finite() || res > KKT_TOL {
        return Err(singular(format!("relative KKT residual {res:.3e}")));
    }
    let (y, u, p) = sys.split(&x);
    Ok(TruthSolution {
        mu: mu.to_vec(),
        objective: def.objective(mu, &y, &u),
        y,
        u,
        p,
        residual: res,
        iterations: 0,
        residual_trace: vec![res],
    })
}

/// Newton on the coupled nonlinear KKT system, starting from zero.
pub fn solve_truth_nonlinear(def: &OcpDefinition, mu: &[f64], opts: &NewtonOptions) -> Result<TruthSolution, OcpError> {
    let sys = def.assemble_kkt(mu)?;
    let n = sys.matrix.nrows();
    let coeff = def.nonlinear_coefficient(mu);
    let h0 = ctmc(&def.c, &def.m.evaluate(mu));
    let r = def.q.evaluate(mu).scaled(def.alpha);
    let a0 = def.a.evaluate(mu);
    let b = def.b.evaluate(mu);

    let residual = |x: &[f64]| -> Result<Vec<f64>, OcpError> {
        let (y, u, p) = sys.split(x);
        Ok(def.kkt_residual(mu, &y, &u, &p)?.0)
    };
    let scale = norm2(&sys.rhs);
    let mut x = vec![0.0; n];
    let mut f = residual(&x)?;
    let mut trace = vec![relative(norm2(&f), scale)];
    let mut growth = 0;
    for it in 1..=opts.max_iter {
        if *trace.last().unwrap() <= opts.tol {
            return finish(def, mu, &sys, x, trace, it - 1);
        }
        let jac = match (&def.nonlinearity, coeff != 0.0) {
            (Some(nl), true) => {
                let (y, _, p) = sys.split(&x);
                let hn = h0.add(&nl.hessian(&def.layout, &p).scaled(coeff))?;
                let jn = a0.add(&nl.jacobian(&def.layout, &y).scaled(coeff))?;
                assemble_saddle(&hn, &r, &jn, &b)
            }
            _ => sys.matrix.clone(),
        };
        let lu = SparseLu::factor(&jac).map_err(|e| OcpError::Singular {
            mu: mu.to_vec(),
            detail: format!("Newton Jacobian at iteration {it}: {e}"),
        })?;
        let mut dx = lu.solve(&f);
        // Same refinement step as the linear solve.
        let r: Vec<f64> = jac.mul_vec(&dx).iter().zip(&f).map(|(a, b)| b - a).collect();
        dx.iter_mut().zip(lu.solve(&r)).for_each(|(a, d)| *a += d);
        let prev = norm2(&f);
        let mut step = 1.0;
        let mut trial: Vec<f64>;
        let mut ft: Vec<f64>;
        let mut halvings = 0;
        loop {
            trial = x.iter().zip(&dx).map(|(a, d)| a - step * d).collect();
            ft = residual(&trial)?;
            if !opts.damping || norm2(&ft) <= prev || halvings >= 10 {
                break;
            }
            step *= 0.5;
            halvings += 1;
        }
        x = trial;
        f = ft;
        let rel = relative(norm2(&f), scale);
        if !rel.is_finite() {
            trace.push(rel);
            return Err(OcpError::NewtonDiverged { mu: mu.to_vec(), trace });
        }
        growth = if rel > *trace.last().unwrap() { growth + 1 } else { 0 };
        trace.push(rel);
        if growth >= 3 {
            return Err(OcpError::NewtonDiverged { mu: mu.to_vec(), trace });
        }
    }
    if *trace.last().unwrap() <= opts.tol {
        return finish(def, mu, &sys, x, trace, opts.max_iter);
    }
    Err(OcpError::NewtonMaxIter {
        mu: mu.to_vec(),
        iterations: opts.max_iter,
        trace,
    })
}

fn finish(
    def: &OcpDefinition,
    mu: &[f64],
    sys: &KktSystem,
    x: Vec<f64>,
    trace: Vec<f64>,
    iterations: usize,
) -> Result<TruthSolution, OcpError> {
    let (y, u, p) = sys.split(&x);
    Ok(TruthSolution {
        mu: mu.to_vec(),
        objective: def.objective(mu, &y, &u),
        y,
        u,
        p,
        residual: *trace.last().unwrap(),
        iterations,
        residual_trace: trace,
    })
}

/// Linear or Newton solve depending on whether the nonlinear term is active.
pub fn solve(def: &OcpDefinition, mu: &[f64], opts: &NewtonOptions) -> Result<TruthSolution, OcpError> {
    if def.is_nonlinear_at(mu) {
        solve_truth_nonlinear(def, mu, opts)
    } else {
        solve_truth(def, mu)
    }
}

/// Solves the state equation `A(μ) y + N(y) + B u = g` for a given control.
pub fn solve_state(def: &OcpDefinition, mu: &[f64], u: &[f64], opts: &NewtonOptions) -> Result<Vec<f64>, OcpError> {
    def.check_parameter(mu)?;
    let a0 = def.a.evaluate(mu);
    let bu = def.b.evaluate(mu).mul_vec(u);
    let rhs: Vec<f64> = def.g.evaluate(mu).iter().zip(&bu).map(|(g, b)| g - b).collect();
    let singular = |detail: String| OcpError::Singular {
        mu: mu.to_vec(),
        detail,
    };
    let lu = SparseLu::factor(&a0).map_err(|e| singular(e.to_string()))?;
    let mut y = lu.solve(&rhs);
    let coeff = def.nonlinear_coefficient(mu);
    let nl = match (&def.nonlinearity, coeff != 0.0) {
        (Some(nl), true) => nl,
        _ => {
            let res = crate::sparse::relative_residual(&a0, &y, &rhs);
            if !res.is_finite() || res > KKT_TOL {
                return Err(singular(format!("state residual {res:.3e}")));
            }
            return Ok(y);
        }
    };
    let scale = norm2(&rhs).max(f64::MIN_POSITIVE);
    let state_res = |y: &[f64]| -> Vec<f64> {
        let ay = a0.mul_vec(y);
        let ny = nl.state_term(&def.layout, y);
        ay.iter().zip(&ny).zip(&rhs).map(|((a, n), r)| a + coeff * n - r).collect()
    };
    let mut f = state_res(&y);
    let mut trace = vec![norm2(&f) / scale];
    for _ in 0..opts.max_iter {
        if *trace.last().unwrap() <= opts.tol {
            return Ok(y);
        }
        let jac = a0.add(&nl.jacobian(&def.layout, &y).scaled(coeff))?;
        let lu = SparseLu::factor(&jac).map_err(|e| singular(e.to_string()))?;
        let dy = lu.solve(&f);
        y.iter_mut().zip(&dy).for_each(|(a, d)| *a -= d);
        f = state_res(&y);
        trace.push(norm2(&f) / scale);
        let n = trace.len();
        if n >= 4 && trace[n - 1] > trace[n - 2] && trace[n - 2] > trace[n - 3] && trace[n - 3] > trace[n - 4] {
            return Err(OcpError::NewtonDiverged { mu: mu.to_vec(), trace });
        }
    }
    if *trace.last().unwrap() <= opts.tol {
        return Ok(y);
    }
    Err(OcpError::NewtonMaxIter {
        mu: mu.to_vec(),
        iterations: opts.max_iter,
        trace,
    })
}

/// Observation `C y` of the state driven by `forcing` at `μ_gen`.
pub fn generate_desired_state(
    def: &OcpDefinition,
    forcing: &[f64],
    mu_gen: &[f64],
    opts: &NewtonOptions,
) -> Result<Vec<f64>, OcpError> {
    let y = solve_state(def, mu_gen, forcing, opts)?;
    Ok(def.c.mul_vec(&y))
}

/// Reduced objective `Ĵ(u) = J(y(u), u)` for the linear state equation.
pub fn reduced_cost(def: &OcpDefinition, mu: &[f64], u: &[f64]) -> Result<f64, OcpError> {
    let y = solve_state(def, mu, u, &NewtonOptions::default())?;
    Ok(def.objective(mu, &y, u))
}

/// `∇Ĵ(u) = αQu + Bᵀp` with `Aᵀp = −CᵀM(Cy(u) − z_d)` (linear state equation).
pub fn reduced_gradient(def: &OcpDefinition, mu: &[f64], u: &[f64]) -> Result<Vec<f64>, OcpError> {
    let y = solve_state(def, mu, u, &NewtonOptions::default())?;
    let m = def.m.evaluate(mu);
    let r: Vec<f64> = def.c.mul_vec(&y).iter().zip(&def.z_d.evaluate(mu)).map(|(a, b)| b - a).collect();
    let rhs = def.c.mul_vec_transposed(&m.mul_vec(&r));
    let lu = SparseLu::factor(&def.a.evaluate(mu))?;
    let p = lu.solve_transpose(&rhs);
    let qu = def.q.evaluate(mu).mul_vec(u);
    let btp = def.b.evaluate(mu).mul_vec_transposed(&p);
    Ok(qu.iter().zip(&btp).map(|(q, b)| def.alpha * q + b).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseName {
    Gulf,
    StommelMunk,
    QgNonlinear,
}

impl CaseName {
    pub fn as_str(&self) -> &'static str {
        match self {
            CaseName::Gulf => "gulf",
            CaseName::StommelMunk => "stommel_munk",
            CaseName::QgNonlinear => "qg_nonlinear",
        }
    }

    /// Synthetic mesh matching the case geometry with `n × n` cells.
    pub fn analog_mesh(&self, n: usize) -> Result<Mesh, OcpError> {
        match self {
            CaseName::Gulf => gulf_analog_mesh(n),
            CaseName::StommelMunk | CaseName::QgNonlinear => atlantic_analog_mesh(n),
        }
    }
}

impl fmt::Display for CaseName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CaseName {
    type Err = OcpError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gulf" => Ok(CaseName::Gulf),
            "stommel_munk" | "stommel-munk" => Ok(CaseName::StommelMunk),
            "qg_nonlinear" | "qg-nonlinear" => Ok(CaseName::QgNonlinear),
            other => Err(OcpError::UnknownCase(other.into())),
        }
    }
}

/// Side length of the square Gulf analog; small enough that `(C_p + 1) C_t < √2/2`.
pub const GULF_EXTENT: f64 = 0.5;
pub const GULF_ALPHA: f64 = 1e-7;
pub const GULF_L0: f64 = 1000.0;
pub const GULF_TARGET: f64 = 0.2;
pub const OCEAN_ALPHA: f64 = 1e-5;

/// Square with Neumann west and south sides, a control box in the south-east
/// and an observation box in the north-west.
pub fn gulf_analog_mesh(n: usize) -> Result<Mesh, OcpError> {
    let l = GULF_EXTENT;
    let boxes = [
        SubdomainBox::new(CONTROL_REGION, Rect::new(0.625 * l, 0.125 * l, 0.875 * l, 0.375 * l)),
        SubdomainBox::new(OBSERVATION_REGION, Rect::new(0.125 * l, 0.625 * l, 0.375 * l, 0.875 * l)),
    ];
    Ok(generate_structured_rectangle(
        n,
        n,
        Rect::new(0.0, 0.0, l, l),
        &TaggingPolicy::open_south_west(),
        &boxes,
    )?)
}

/// Unit square, homogeneous Dirichlet everywhere.
pub fn atlantic_analog_mesh(n: usize) -> Result<Mesh, OcpError> {
    Ok(generate_structured_rectangle(
        n,
        n,
        Rect::unit(),
        &TaggingPolicy::all_dirichlet(),
        &[],
    )?)
}

pub fn builtin_case(name: CaseName, mesh: &Mesh) -> Result<OcpDefinition, OcpError> {
    match name {
        CaseName::Gulf => gulf_case(mesh),
        CaseName::StommelMunk => ocean_case(mesh, false),
        CaseName::QgNonlinear => ocean_case(mesh, true),
    }
}

fn require_label(mesh: &Mesh, label: &str) -> Result<(), OcpError> {
    if mesh.has_label(label) {
        Ok(())
    } else {
        Err(OcpError::MissingLabel(label.into()))
    }
}

fn gulf_case(mesh: &Mesh) -> Result<OcpDefinition, OcpError> {
    require_label(mesh, CONTROL_REGION)?;
    require_label(mesh, OBSERVATION_REGION)?;
    let dofs = DofMap::new(mesh);
    let k = dofs.restrict(&fem::assemble_stiffness(mesh));
    let a1 = dofs.restrict(&fem::assemble_advection(mesh, Axis::X1));
    let a2 = dofs.restrict(&fem::assemble_advection(mesh, Axis::X2));
    let mass = fem::assemble_mass(mesh, None)?;
    let h1 = dofs.restrict(&mass).add(&k)?;
    let nf = dofs.num_free();

    let a = AffineMatrix::single("stiffness", Coefficient::Param(0), k)?
        .with_term("advection_x1", Coefficient::Param(1), a1)?
        .with_term("advection_x2", Coefficient::Param(2), a2)?;

    let load = dofs.restrict_vec(&fem::assemble_load(mesh, Some(CONTROL_REGION))?);
    let mut bb = TripletBuilder::new(nf, 1);
    for (i, v) in load.iter().enumerate() {
        if *v != 0.0 {
            bb.push(i, 0, -GULF_L0 * v);
        }
    }
    let b = AffineMatrix::single("control_source", Coefficient::One, bb.build())?;
    let m_obs = fem::assemble_mass(mesh, Some(OBSERVATION_REGION))?;
    let m = AffineMatrix::single("observation_mass", Coefficient::One, m_obs)?;
    let q = AffineMatrix::single(
        "control_gram",
        Coefficient::One,
        SparseMatrix::from_dense(&nalgebra::DMatrix::from_element(1, 1, mesh.label_area(CONTROL_REGION))),
    )?;

    let mut in_obs = vec![false; mesh.num_vertices()];
    for (t, tri) in mesh.triangles().iter().enumerate() {
        if mesh.labels()[t] == OBSERVATION_REGION {
            tri.iter().for_each(|&v| in_obs[v] = true);
        }
    }
    let zd: Vec<f64> = in_obs.iter().map(|&b| if b { GULF_TARGET } else { 0.0 }).collect();

    let layout = FieldLayout::new(
        &[("y", h1.clone())],
        &[("u", SparseMatrix::identity(1))],
        &[("p", h1)],
    );
    let def = OcpDefinition {
        name: CaseName::Gulf.to_string(),
        a,
        b,
        c: dofs.injection(),
        m,
        q,
        g: AffineVector::single("g", Coefficient::One, vec![0.0; nf]),
        z_d: AffineVector::single("z_d", Coefficient::One, zd),
        alpha: GULF_ALPHA,
        l0: GULF_L0,
        layout,
        parameter_box: vec![(0.5, 1.0), (-1.0, 1.0), (-1.0, 1.0)],
        nonlinearity: None,
    };
    def.validate()?;
    Ok(def)
}

/// Parameter box of the ocean cases (the mild nonlinear setting).
pub fn ocean_parameter_box() -> Vec<(f64, f64)> {
    vec![(1e-4, 1.0), (0.07f64.powi(3), 1.0), (1e-4, 0.045f64.powi(2))]
}

fn ocean_case(mesh: &Mesh, nonlinear: bool) -> Result<OcpDefinition, OcpError> {
    let dofs = DofMap::new(mesh);
    let nf = dofs.num_free();
    let nv = mesh.num_vertices();
    let k = dofs.restrict(&fem::assemble_stiffness(mesh));
    let mass = fem::assemble_mass(mesh, None)?;
    let mf = dofs.restrict(&mass);
    let adv = dofs.restrict(&fem::assemble_advection(mesh, Axis::X1));
    let h1 = mf.add(&k)?;

    // Rows: (ṽ, ρ̃); columns: (v, ρ).
    let block = |tl: Option<&SparseMatrix>, tr: Option<&SparseMatrix>, bl: Option<&SparseMatrix>, br: Option<&SparseMatrix>| {
        let mut t = TripletBuilder::new(2 * nf, 2 * nf);
        for (m, r, c) in [(tl, 0, 0), (tr, 0, nf), (bl, nf, 0), (br, nf, nf)] {
            if let Some(m) = m {
                t.push_block(m, r, c, 1.0);
            }
        }
        t.build()
    };
    let a = AffineMatrix::single("constant", Coefficient::One, block(Some(&adv), None, Some(&k), Some(&mf)))?
        .with_term("friction", Coefficient::Param(0), block(None, Some(&mf), None, None))?
        .with_term("viscosity", Coefficient::Param(1), block(None, Some(&k), None, None))?;

    let mut bb = TripletBuilder::new(2 * nf, nv);
    let m_fa = mass.select(dofs.free(), &(0..nv).collect::<Vec<_>>());
    bb.push_block(&m_fa, 0, 0, -1.0);
    let b = AffineMatrix::single("wind", Coefficient::One, bb.build())?;

    let mut cb = TripletBuilder::new(nv, 2 * nf);
    cb.push_block(&dofs.injection(), 0, 0, 1.0);
    let c = cb.build();

    let layout = FieldLayout::new(
        &[("v", h1.clone()), ("rho", h1.clone())],
        &[("u", mass.clone())],
        &[("w", h1.clone()), ("q", h1)],
    );
    let nonlinearity = nonlinear.then(|| Nonlinearity {
        form: TrilinearForm::new(mesh),
        dofs: dofs.clone(),
        coefficient: Coefficient::Param(2),
        first: 0,
        second: 1,
        test: 0,
    });
    let name = if nonlinear { CaseName::QgNonlinear } else { CaseName::StommelMunk };
    let mut def = OcpDefinition {
        name: name.to_string(),
        a,
        b,
        c,
        m: AffineMatrix::single("observation_mass", Coefficient::One, mass.clone())?,
        q: AffineMatrix::single("control_gram", Coefficient::One, mass)?,
        g: AffineVector::single("g", Coefficient::One, vec![0.0; 2 * nf]),
        z_d: AffineVector::single("z_d", Coefficient::One, vec![0.0; nv]),
        alpha: OCEAN_ALPHA,
        l0: 1.0,
        layout,
        parameter_box: ocean_parameter_box(),
        nonlinearity,
    };
    def.validate()?;
    let forcing = fem::interpolate(mesh, |_, x2| -(std::f64::consts::PI * x2).sin());
    let mu_gen = desired_state_parameter(name);
    let zd = generate_desired_state(&def, &forcing, &mu_gen, &NewtonOptions::default())?;
    def.z_d = AffineVector::single("z_d", Coefficient::One, zd);
    Ok(def)
}

/// Parameter at which the ocean cases simulate their desired state.
pub fn desired_state_parameter(case: CaseName) -> Vec<f64> {
    let mu3 = if case == CaseName::QgNonlinear { 0.07f64.powi(2) } else { 0.0 };
    vec![0.0, 0.07f64.powi(3), mu3]
}

/// Convenience: `‖x‖_X` for a group vector.
pub fn group_norm(def: &OcpDefinition, g: FieldGroup, x: &[f64]) -> f64 {
    def.layout.norm_matrix(g).quad_form(x).max(0.0).sqrt()
}

/// Inner product under `X` (dense helper for tests and diagnostics).
pub fn x_inner(x: &SparseMatrix, a: &[f64], b: &[f64]) -> f64 {
    dot(a, &x.mul_vec(b))
}
