//! Offline projection of the affine blocks onto reduced bases and the online
//! reduced KKT solves.

use std::fs;
use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{read_block, read_dense_matrix_market, write_block, write_dense_matrix_market, IoError};
use crate::ocp::{Coefficient, FieldGroup, NewtonOptions, OcpDefinition, OcpError};
use crate::sparse::SparseMatrix;
use crate::wpod::{aggregate, GS_DROP_TOL};

#[derive(Debug, Error)]
pub enum RomError {
    #[error("basis for {group:?} field `{field}` has {got} rows, field has {expected} dofs")]
    BasisDimension {
        group: FieldGroup,
        field: String,
        expected: usize,
        got: usize,
    },
    #[error("expected {expected} bases for {group:?}, got {got}")]
    BasisCount { group: FieldGroup, expected: usize, got: usize },
    #[error("reduced system is singular at mu = {mu:?}: {detail}")]
    Singular { mu: Vec<f64>, detail: String },
    #[error("reduced Newton diverged at mu = {mu:?}; residual trace {trace:?}")]
    NewtonDiverged { mu: Vec<f64>, trace: Vec<f64> },
    #[error("reduced Newton did not converge at mu = {mu:?}; residual trace {trace:?}")]
    NewtonMaxIter { mu: Vec<f64>, trace: Vec<f64> },
    #[error("model has a nonlinear term; use the Newton solver")]
    Nonlinear,
    #[error("full-order online mode needs the model's own problem definition")]
    MissingDefinition,
    #[error("coefficient `{0}` cannot be written to a manifest")]
    Unserializable(String),
    #[error("malformed model directory: {0}")]
    Manifest(String),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Std(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How the nonlinear term is evaluated online.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnlineMode {
    /// Precomputed reduced trilinear tensor, cost independent of the truth dimension.
    #[default]
    Tensor,
    /// Lift, assemble at full order and project again every Newton iteration.
    FullOrder,
}

impl std::str::FromStr for OnlineMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tensor" => Ok(Self::Tensor),
            "full" | "full_order" => Ok(Self::FullOrder),
            other => Err(format!("unknown online mode `{other}` (tensor|full)")),
        }
    }
}

/// One basis matrix per field (columns X-orthonormal in the field norm).
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedBases {
    pub state: Vec<DMatrix<f64>>,
    pub control: Vec<DMatrix<f64>>,
    pub adjoint: Vec<DMatrix<f64>>,
    pub aggregated: bool,
}

impl ReducedBases {
    /// With `aggregated`, the i-th state and adjoint fields both get `span{state_i, adjoint_i}`.
    pub fn new(
        def: &OcpDefinition,
        state: Vec<DMatrix<f64>>,
        control: Vec<DMatrix<f64>>,
        adjoint: Vec<DMatrix<f64>>,
        aggregated: bool,
    ) -> Result<Self, RomError> {
        let mut b = Self {
            state,
            control,
            adjoint,
            aggregated: false,
        };
        b.check(def)?;
        if aggregated {
            let z: Vec<DMatrix<f64>> = (0..b.state.len())
                .map(|i| aggregate(&b.state[i], &b.adjoint[i], &def.layout.state[i].norm, GS_DROP_TOL))
                .collect();
            b.state = z.clone();
            b.adjoint = z;
            b.aggregated = true;
        }
        Ok(b)
    }

    fn check(&self, def: &OcpDefinition) -> Result<(), RomError> {
        for g in [FieldGroup::State, FieldGroup::Control, FieldGroup::Adjoint] {
            let fields = def.layout.group(g);
            let bases = self.group(g);
            if fields.len() != bases.len() {
                return Err(RomError::BasisCount {
                    group: g,
                    expected: fields.len(),
                    got: bases.len(),
                });
            }
            for (f, b) in fields.iter().zip(bases) {
                if f.len() != b.nrows() {
                    return Err(RomError::BasisDimension {
                        group: g,
                        field: f.name.clone(),
                        expected: f.len(),
                        got: b.nrows(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn group(&self, g: FieldGroup) -> &[DMatrix<f64>] {
        match g {
            FieldGroup::State => &self.state,
            FieldGroup::Control => &self.control,
            FieldGroup::Adjoint => &self.adjoint,
        }
    }

    pub fn dim(&self, g: FieldGroup) -> usize {
        self.group(g).iter().map(|b| b.ncols()).sum()
    }

    /// Reduced coordinate range of each field.
    pub fn ranges(&self, g: FieldGroup) -> Vec<Range<usize>> {
        let mut off = 0;
        self.group(g)
            .iter()
            .map(|b| {
                let r = off..off + b.ncols();
                off += b.ncols();
                r
            })
            .collect()
    }

    /// Block-diagonal lift of a whole group.
    pub fn lift_matrix(&self, g: FieldGroup) -> DMatrix<f64> {
        let bases = self.group(g);
        let rows: usize = bases.iter().map(|b| b.nrows()).sum();
        let mut v = DMatrix::zeros(rows, self.dim(g));
        let (mut r, mut c) = (0, 0);
        for b in bases {
            v.view_mut((r, c), b.shape()).copy_from(b);
            r += b.nrows();
            c += b.ncols();
        }
        v
    }
}

/// Projected affine term; its coefficient is the product of `coefficients`.
#[derive(Debug, Clone)]
pub struct ReducedTerm {
    pub name: String,
    pub coefficients: Vec<Coefficient>,
    pub block: DMatrix<f64>,
}

impl ReducedTerm {
    fn coefficient(&self, mu: &[f64]) -> f64 {
        self.coefficients.iter().map(|c| c.eval(mu)).product()
    }
}

fn affine_sum(terms: &[ReducedTerm], mu: &[f64], shape: (usize, usize)) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(shape.0, shape.1);
    for t in terms {
        out += &t.block * t.coefficient(mu);
    }
    out
}

/// `T[i][j][k] = t(ξ^v_j, ξ^ρ_k, ξ^w_i)` over the bases of the two state slots and
/// the adjoint test field.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedTensor {
    pub dims: [usize; 3],
    pub data: Vec<f64>,
}

impl ReducedTensor {
    #[inline]
    fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.dims[1] + j) * self.dims[2] + k]
    }
}

/// Reduced nonlinearity: coefficient, slot ranges in reduced coordinates and the tensor.
#[derive(Debug, Clone)]
pub struct ReducedNonlinearity {
    pub coefficient: Coefficient,
    pub first: Range<usize>,
    pub second: Range<usize>,
    pub test: Range<usize>,
    pub tensor: Option<ReducedTensor>,
}

#[derive(Debug, Clone)]
pub struct ReducedModel {
    pub case: String,
    pub bases: ReducedBases,
    pub alpha: f64,
    pub mode: OnlineMode,
    /// `V_yᵀ CᵀM_q C V_y`.
    pub h_terms: Vec<ReducedTerm>,
    /// `V_uᵀ Q_q V_u` (without `α`).
    pub q_terms: Vec<ReducedTerm>,
    /// `V_pᵀ A_q V_y`.
    pub a_terms: Vec<ReducedTerm>,
    /// `V_pᵀ B_q V_u`.
    pub b_terms: Vec<ReducedTerm>,
    /// `V_yᵀ CᵀM_q (z_d)_r`, one column.
    pub f_terms: Vec<ReducedTerm>,
    /// `V_pᵀ g_q`, one column.
    pub g_terms: Vec<ReducedTerm>,
    /// `(z_d)_rᵀ M_q (z_d)_s`, 1×1.
    pub zz_terms: Vec<ReducedTerm>,
    pub nonlinearity: Option<ReducedNonlinearity>,
    vy: DMatrix<f64>,
    vu: DMatrix<f64>,
    vp: DMatrix<f64>,
}

/// Reduced solution with lifted full-order vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedSolution {
    pub mu: Vec<f64>,
    pub y_n: Vec<f64>,
    pub u_n: Vec<f64>,
    pub p_n: Vec<f64>,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub p: Vec<f64>,
    pub objective: f64,
    /// Seconds spent assembling and solving the reduced system.
    pub online_time: f64,
    pub iterations: usize,
    pub residual_trace: Vec<f64>,
}

fn sparse_project(left: &DMatrix<f64>, a: &SparseMatrix, right: &DMatrix<f64>) -> DMatrix<f64> {
    a.project(left, right)
}

/// Projects every affine term once.
pub fn project_offline(def: &OcpDefinition, bases: ReducedBases, mode: OnlineMode) -> Result<ReducedModel, RomError> {
    bases.check(def)?;
    def.validate()?;
    let vy = bases.lift_matrix(FieldGroup::State);
    let vu = bases.lift_matrix(FieldGroup::Control);
    let vp = bases.lift_matrix(FieldGroup::Adjoint);
    let cvy = def.c.mul_dense(&vy);

    let term = |name: &str, coefficients: Vec<Coefficient>, block: DMatrix<f64>| ReducedTerm {
        name: name.to_string(),
        coefficients,
        block,
    };
    let h_terms = def
        .m
        .terms()
        .iter()
        .map(|t| term(&t.name, vec![t.coefficient.clone()], sparse_project(&cvy, &t.value, &cvy)))
        .collect();
    let q_terms = def
        .q
        .terms()
        .iter()
        .map(|t| term(&t.name, vec![t.coefficient.clone()], sparse_project(&vu, &t.value, &vu)))
        .collect();
    let a_terms = def
        .a
        .terms()
        .iter()
        .map(|t| term(&t.name, vec![t.coefficient.clone()], sparse_project(&vp, &t.value, &vy)))
        .collect();
    let b_terms = def
        .b
        .terms()
        .iter()
        .map(|t| term(&t.name, vec![t.coefficient.clone()], sparse_project(&vp, &t.value, &vu)))
        .collect();
    let mut f_terms = Vec::new();
    let mut zz_terms = Vec::new();
    for mt in def.m.terms() {
        for zt in def.z_d.terms() {
            let mz = mt.value.mul_vec(&zt.value);
            let col = cvy.transpose() * DVector::from_vec(mz.clone());
            f_terms.push(term(
                &format!("{}*{}", mt.name, zt.name),
                vec![mt.coefficient.clone(), zt.coefficient.clone()],
                DMatrix::from_column_slice(col.len(), 1, col.as_slice()),
            ));
            for zs in def.z_d.terms() {
                let v: f64 = zs.value.iter().zip(&mz).map(|(a, b)| a * b).sum();
                zz_terms.push(term(
                    &format!("{}*{}*{}", zs.name, mt.name, zt.name),
                    vec![zs.coefficient.clone(), mt.coefficient.clone(), zt.coefficient.clone()],
                    DMatrix::from_element(1, 1, v),
                ));
            }
        }
    }
    let g_terms = def
        .g
        .terms()
        .iter()
        .map(|t| {
            let col = vp.transpose() * DVector::from_vec(t.value.clone());
            term(&t.name, vec![t.coefficient.clone()], DMatrix::from_column_slice(col.len(), 1, col.as_slice()))
        })
        .collect();

    let nonlinearity = def.nonlinearity.as_ref().map(|nl| {
        let yr = bases.ranges(FieldGroup::State);
        let pr = bases.ranges(FieldGroup::Adjoint);
        let tensor = (mode == OnlineMode::Tensor).then(|| {
            let bv = &bases.state[nl.first];
            let br = &bases.state[nl.second];
            let bw = &bases.adjoint[nl.test];
            let dims = [bw.ncols(), bv.ncols(), br.ncols()];
            let mut data = vec![0.0; dims[0] * dims[1] * dims[2]];
            let rho_full: Vec<Vec<f64>> = (0..dims[2])
                .map(|k| nl.dofs.extend(br.column(k).as_slice()))
                .collect();
            for j in 0..dims[1] {
                let v = nl.dofs.extend(bv.column(j).as_slice());
                for (k, rho) in rho_full.iter().enumerate() {
                    let t = DVector::from_vec(nl.dofs.restrict_vec(&nl.form.apply(&v, rho)));
                    let col = bw.transpose() * t;
                    for i in 0..dims[0] {
                        data[(i * dims[1] + j) * dims[2] + k] = col[i];
                    }
                }
            }
            ReducedTensor { dims, data }
        });
        ReducedNonlinearity {
            coefficient: nl.coefficient.clone(),
            first: yr[nl.first].clone(),
            second: yr[nl.second].clone(),
            test: pr[nl.test].clone(),
            tensor,
        }
    });

    Ok(ReducedModel {
        case: def.name.clone(),
        alpha: def.alpha,
        mode,
        h_terms,
        q_terms,
        a_terms,
        b_terms,
        f_terms,
        g_terms,
        zz_terms,
        nonlinearity,
        vy,
        vu,
        vp,
        bases,
    })
}

/// Dense linear part of a reduced KKT system.
struct ReducedSystem {
    h: DMatrix<f64>,
    r: DMatrix<f64>,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    rhs: DVector<f64>,
}

fn saddle(h: &DMatrix<f64>, r: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ky, ku, kp) = (h.nrows(), r.nrows(), a.nrows());
    let n = ky + ku + kp;
    let mut k = DMatrix::zeros(n, n);
    k.view_mut((0, 0), (ky, ky)).copy_from(h);
    k.view_mut((0, ky + ku), (ky, kp)).copy_from(&a.transpose());
    k.view_mut((ky, ky), (ku, ku)).copy_from(r);
    k.view_mut((ky, ky + ku), (ku, kp)).copy_from(&b.transpose());
    k.view_mut((ky + ku, 0), (kp, ky)).copy_from(a);
    k.view_mut((ky + ku, ky), (kp, ku)).copy_from(b);
    k
}

impl ReducedModel {
    pub fn dims(&self) -> (usize, usize, usize) {
        (
            self.bases.dim(FieldGroup::State),
            self.bases.dim(FieldGroup::Control),
            self.bases.dim(FieldGroup::Adjoint),
        )
    }

    /// Size of the online system.
    pub fn system_size(&self) -> usize {
        let (a, b, c) = self.dims();
        a + b + c
    }

    pub fn lift(&self, g: FieldGroup, coeffs: &[f64]) -> Vec<f64> {
        let v = match g {
            FieldGroup::State => &self.vy,
            FieldGroup::Control => &self.vu,
            FieldGroup::Adjoint => &self.vp,
        };
        (v * DVector::from_column_slice(coeffs)).as_slice().to_vec()
    }

    pub fn lift_matrix(&self, g: FieldGroup) -> &DMatrix<f64> {
        match g {
            FieldGroup::State => &self.vy,
            FieldGroup::Control => &self.vu,
            FieldGroup::Adjoint => &self.vp,
        }
    }

    fn system(&self, mu: &[f64]) -> ReducedSystem {
        let (ky, ku, kp) = self.dims();
        let h = affine_sum(&self.h_terms, mu, (ky, ky));
        let r = affine_sum(&self.q_terms, mu, (ku, ku)) * self.alpha;
        let a = affine_sum(&self.a_terms, mu, (kp, ky));
        let b = affine_sum(&self.b_terms, mu, (kp, ku));
        let f = affine_sum(&self.f_terms, mu, (ky, 1));
        let g = affine_sum(&self.g_terms, mu, (kp, 1));
        let mut rhs = DVector::zeros(ky + ku + kp);
        rhs.rows_mut(0, ky).copy_from(&f.column(0));
        rhs.rows_mut(ky + ku, kp).copy_from(&g.column(0));
        ReducedSystem { h, r, a, b, rhs }
    }

    /// Reduced KKT matrix and right-hand side at `μ` (linear part only).
    pub fn assemble(&self, mu: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let s = self.system(mu);
        (saddle(&s.h, &s.r, &s.a, &s.b), s.rhs)
    }

    fn objective(&self, mu: &[f64], sys: &ReducedSystem, yn: &DVector<f64>, un: &DVector<f64>) -> f64 {
        let ky = yn.len();
        let zz = affine_sum(&self.zz_terms, mu, (1, 1))[(0, 0)];
        let f = sys.rhs.rows(0, ky);
        0.5 * (yn.dot(&(&sys.h * yn)) - 2.0 * f.dot(yn) + zz) + 0.5 * un.dot(&(&sys.r * un))
    }

    fn package(
        &self,
        mu: &[f64],
        sys: &ReducedSystem,
        x: &DVector<f64>,
        online_time: f64,
        iterations: usize,
        residual_trace: Vec<f64>,
    ) -> ReducedSolution {
        let (ky, ku, kp) = self.dims();
        let yn = x.rows(0, ky).into_owned();
        let un = x.rows(ky, ku).into_owned();
        let pn = x.rows(ky + ku, kp).into_owned();
        ReducedSolution {
            mu: mu.to_vec(),
            objective: self.objective(mu, sys, &yn, &un),
            y: self.lift(FieldGroup::State, yn.as_slice()),
            u: self.lift(FieldGroup::Control, un.as_slice()),
            p: self.lift(FieldGroup::Adjoint, pn.as_slice()),
            y_n: yn.as_slice().to_vec(),
            u_n: un.as_slice().to_vec(),
            p_n: pn.as_slice().to_vec(),
            online_time,
            iterations,
            residual_trace,
        }
    }

    fn nonlinear_active(&self, mu: &[f64]) -> Option<(&ReducedNonlinearity, f64)> {
        let nl = self.nonlinearity.as_ref()?;
        let c = nl.coefficient.eval(mu);
        (c != 0.0).then_some((nl, c))
    }
}

fn dense_solve(k: DMatrix<f64>, rhs: &DVector<f64>, mu: &[f64]) -> Result<DVector<f64>, RomError> {
    let singular = |detail: String| RomError::Singular {
        mu: mu.to_vec(),
        detail,
    };
    if log::log_enabled!(log::Level::Debug) {
        if let Some(inv) = k.clone().try_inverse() {
            let norm1 = |m: &DMatrix<f64>| m.column_iter().map(|c| c.abs().sum()).fold(0.0, f64::max);
            log::debug!("reduced system size {}, 1-norm condition {:.3e}", k.nrows(), norm1(&k) * norm1(&inv));
        }
    }
    let kc = k.clone();
    let x = k.lu().solve(rhs).ok_or_else(|| singular("zero pivot in LU".into()))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(singular("non-finite solution".into()));
    }
    let r = (&kc * &x - rhs).norm();
    let scale = rhs.norm().max(kc.amax() * x.norm());
    if scale > 0.0 && r > 1e-6 * scale {
        return Err(singular(format!("relative residual {:.3e}", r / scale)));
    }
    Ok(x)
}

/// Linear online solve: dense reduced KKT assembled from the affine terms.
pub fn solve_reduced(model: &ReducedModel, mu: &[f64]) -> Result<ReducedSolution, RomError> {
    if model.nonlinear_active(mu).is_some() {
        return Err(RomError::Nonlinear);
    }
    let t0 = Instant::now();
    let sys = model.system(mu);
    let k = saddle(&sys.h, &sys.r, &sys.a, &sys.b);
    let x = dense_solve(k, &sys.rhs, mu)?;
    let elapsed = t0.elapsed().as_secs_f64();
    Ok(model.package(mu, &sys, &x, elapsed, 0, Vec::new()))
}

/// Nonlinear contributions at the reduced iterate: residual additions and Jacobian blocks.
struct NlEval {
    /// Added to the state-equation rows.
    state: DVector<f64>,
    /// Added to the adjoint-equation rows.
    adjoint: DVector<f64>,
    /// `D N` (equation × state).
    jac: DMatrix<f64>,
    /// Hessian of `⟨p, N(y)⟩` (state × state).
    hess: DMatrix<f64>,
}

fn tensor_eval(nl: &ReducedNonlinearity, t: &ReducedTensor, y: &DVector<f64>, p: &DVector<f64>) -> NlEval {
    let (ky, kp) = (y.len(), p.len());
    let [ni, nj, nk] = t.dims;
    let v = y.rows(nl.first.start, nj);
    let r = y.rows(nl.second.start, nk);
    let w = p.rows(nl.test.start, ni);
    let mut state = DVector::zeros(kp);
    let mut adjoint = DVector::zeros(ky);
    let mut jac = DMatrix::zeros(kp, ky);
    let mut hess = DMatrix::zeros(ky, ky);
    for i in 0..ni {
        let row = nl.test.start + i;
        for j in 0..nj {
            let mut tr = 0.0;
            for k in 0..nk {
                let tijk = t.at(i, j, k);
                tr += tijk * r[k];
                jac[(row, nl.second.start + k)] += tijk * v[j];
                hess[(nl.first.start + j, nl.second.start + k)] += tijk * w[i];
                adjoint[nl.second.start + k] += tijk * w[i] * v[j];
            }
            state[row] += tr * v[j];
            jac[(row, nl.first.start + j)] += tr;
            adjoint[nl.first.start + j] += tr * w[i];
        }
    }
    for j in 0..nj {
        for k in 0..nk {
            let h = hess[(nl.first.start + j, nl.second.start + k)];
            hess[(nl.second.start + k, nl.first.start + j)] = h;
        }
    }
    NlEval {
        state,
        adjoint,
        jac,
        hess,
    }
}

fn full_order_eval(model: &ReducedModel, def: &OcpDefinition, y: &DVector<f64>, p: &DVector<f64>) -> NlEval {
    let nl = def.nonlinearity.as_ref().expect("checked by caller");
    let yf = model.lift(FieldGroup::State, y.as_slice());
    let pf = model.lift(FieldGroup::Adjoint, p.as_slice());
    let st = DVector::from_vec(nl.state_term(&def.layout, &yf));
    let ad = DVector::from_vec(nl.adjoint_term(&def.layout, &yf, &pf));
    NlEval {
        state: model.vp.transpose() * st,
        adjoint: model.vy.transpose() * ad,
        jac: nl.jacobian(&def.layout, &yf).project(&model.vp, &model.vy),
        hess: nl.hessian(&def.layout, &pf).project(&model.vy, &model.vy),
    }
}

/// Newton on the reduced nonlinear KKT system, starting from zero. The full-order
/// mode needs the definition the model was built from.
pub fn solve_reduced_nonlinear(
    model: &ReducedModel,
    def: Option<&OcpDefinition>,
    mu: &[f64],
    opts: &NewtonOptions,
) -> Result<ReducedSolution, RomError> {
    let Some((nl, coeff)) = model.nonlinear_active(mu) else {
        return solve_reduced(model, mu);
    };
    let tensor = match model.mode {
        OnlineMode::Tensor => Some(nl.tensor.as_ref().ok_or(RomError::Manifest("tensor missing".into()))?),
        OnlineMode::FullOrder => {
            if def.and_then(|d| d.nonlinearity.as_ref()).is_none() {
                return Err(RomError::MissingDefinition);
            }
            None
        }
    };
    let t0 = Instant::now();
    let (ky, ku, kp) = model.dims();
    let sys = model.system(mu);
    let k_lin = saddle(&sys.h, &sys.r, &sys.a, &sys.b);
    let eval = |x: &DVector<f64>| -> NlEval {
        let y = x.rows(0, ky).into_owned();
        let p = x.rows(ky + ku, kp).into_owned();
        match tensor {
            Some(t) => tensor_eval(nl, t, &y, &p),
            None => full_order_eval(model, def.expect("checked"), &y, &p),
        }
    };
    let residual = |x: &DVector<f64>, e: &NlEval| -> DVector<f64> {
        let mut f = &k_lin * x - &sys.rhs;
        for i in 0..ky {
            f[i] += coeff * e.adjoint[i];
        }
        for i in 0..kp {
            f[ky + ku + i] += coeff * e.state[i];
        }
        f
    };
    let scale = sys.rhs.norm();
    let rel = |f: &DVector<f64>| if scale > 0.0 { f.norm() / scale } else { f.norm() };
    let mut x = DVector::zeros(ky + ku + kp);
    let mut e = eval(&x);
    let mut f = residual(&x, &e);
    let mut trace = vec![rel(&f)];
    let mut growth = 0;
    let mut iterations = 0;
    while *trace.last().unwrap() > opts.tol {
        if iterations >= opts.max_iter {
            return Err(RomError::NewtonMaxIter { mu: mu.to_vec(), trace });
        }
        iterations += 1;
        let h = &sys.h + &e.hess * coeff;
        let a = &sys.a + &e.jac * coeff;
        let jac = saddle(&h, &sys.r, &a, &sys.b);
        let dx = jac.lu().solve(&f).ok_or_else(|| RomError::Singular {
            mu: mu.to_vec(),
            detail: format!("Newton Jacobian at iteration {iterations}"),
        })?;
        let prev = f.norm();
        let mut step = 1.0;
        let mut halvings = 0;
        loop {
            let trial = &x - &dx * step;
            let et = eval(&trial);
            let ft = residual(&trial, &et);
            if !opts.damping || ft.norm() <= prev || halvings >= 10 {
                x = trial;
                e = et;
                f = ft;
                break;
            }
            step *= 0.5;
            halvings += 1;
        }
        let r = rel(&f);
        if !r.is_finite() {
            trace.push(r);
            return Err(RomError::NewtonDiverged { mu: mu.to_vec(), trace });
        }
        growth = if r > *trace.last().unwrap() { growth + 1 } else { 0 };
        trace.push(r);
        if growth >= 3 {
            return Err(RomError::NewtonDiverged { mu: mu.to_vec(), trace });
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    Ok(model.package(mu, &sys, &x, elapsed, iterations, trace))
}

/// Linear or Newton online solve depending on the model.
pub fn solve_online(
    model: &ReducedModel,
    def: Option<&OcpDefinition>,
    mu: &[f64],
    opts: &NewtonOptions,
) -> Result<ReducedSolution, RomError> {
    if model.nonlinear_active(mu).is_some() {
        solve_reduced_nonlinear(model, def, mu, opts)
    } else {
        solve_reduced(model, mu)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TermEntry {
    name: String,
    coefficients: Vec<String>,
    file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BasisEntry {
    group: FieldGroup,
    index: usize,
    file: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NonlinearEntry {
    coefficient: String,
    first: [usize; 2],
    second: [usize; 2],
    test: [usize; 2],
    tensor_file: Option<String>,
    tensor_dims: Option<[usize; 3]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    case: String,
    aggregated: bool,
    online_mode: OnlineMode,
    alpha: f64,
    dims: [usize; 3],
    bases: Vec<BasisEntry>,
    terms: std::collections::BTreeMap<String, Vec<TermEntry>>,
    nonlinearity: Option<NonlinearEntry>,
}

const FAMILIES: [&str; 7] = ["H", "Q", "A", "B", "F", "G", "ZZ"];

impl ReducedModel {
    fn family(&self, name: &str) -> &[ReducedTerm] {
        match name {
            "H" => &self.h_terms,
            "Q" => &self.q_terms,
            "A" => &self.a_terms,
            "B" => &self.b_terms,
            "F" => &self.f_terms,
            "G" => &self.g_terms,
            _ => &self.zz_terms,
        }
    }

    /// Writes bases (Matrix Market), reduced blocks (binary) and `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<(), RomError> {
        fs::create_dir_all(dir)?;
        let mut bases = Vec::new();
        for g in [FieldGroup::State, FieldGroup::Control, FieldGroup::Adjoint] {
            for (index, b) in self.bases.group(g).iter().enumerate() {
                let file = format!("basis_{}_{index}.mtx", serde_json::to_string(&g)?.trim_matches('"'));
                write_dense_matrix_market(&dir.join(&file), b)?;
                bases.push(BasisEntry {
                    group: g,
                    index,
                    file,
                    rows: b.nrows(),
                    cols: b.ncols(),
                });
            }
        }
        let mut terms = std::collections::BTreeMap::new();
        for fam in FAMILIES {
            let mut entries = Vec::new();
            for (q, t) in self.family(fam).iter().enumerate() {
                let coefficients = t
                    .coefficients
                    .iter()
                    .map(|c| c.to_spec().ok_or_else(|| RomError::Unserializable(c.to_string())))
                    .collect::<Result<Vec<_>, _>>()?;
                let file = format!("{fam}_{q}.bin");
                write_block(&dir.join(&file), &format!("{fam}_{q}"), &t.block)?;
                entries.push(TermEntry {
                    name: t.name.clone(),
                    coefficients,
                    file,
                });
            }
            terms.insert(fam.to_string(), entries);
        }
        let nonlinearity = match &self.nonlinearity {
            Some(nl) => {
                let coefficient = nl
                    .coefficient
                    .to_spec()
                    .ok_or_else(|| RomError::Unserializable(nl.coefficient.to_string()))?;
                let (tensor_file, tensor_dims) = match &nl.tensor {
                    Some(t) => {
                        let m = DMatrix::from_row_slice(t.dims[0], t.dims[1] * t.dims[2], &t.data);
                        write_block(&dir.join("T.bin"), "T", &m)?;
                        (Some("T.bin".to_string()), Some(t.dims))
                    }
                    None => (None, None),
                };
                Some(NonlinearEntry {
                    coefficient,
                    first: [nl.first.start, nl.first.end],
                    second: [nl.second.start, nl.second.end],
                    test: [nl.test.start, nl.test.end],
                    tensor_file,
                    tensor_dims,
                })
            }
            None => None,
        };
        let (a, b, c) = self.dims();
        let manifest = Manifest {
            case: self.case.clone(),
            aggregated: self.bases.aggregated,
            online_mode: self.mode,
            alpha: self.alpha,
            dims: [a, b, c],
            bases,
            terms,
            nonlinearity,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<ReducedModel, RomError> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let bad = |m: String| RomError::Manifest(m);
        let mut state = Vec::new();
        let mut control = Vec::new();
        let mut adjoint = Vec::new();
        for e in &manifest.bases {
            let b = read_dense_matrix_market(&dir.join(&e.file))?;
            if b.shape() != (e.rows, e.cols) {
                return Err(bad(format!("basis {} has shape {:?}", e.file, b.shape())));
            }
            let target = match e.group {
                FieldGroup::State => &mut state,
                FieldGroup::Control => &mut control,
                FieldGroup::Adjoint => &mut adjoint,
            };
            if target.len() != e.index {
                return Err(bad(format!("basis {} out of order", e.file)));
            }
            target.push(b);
        }
        let bases = ReducedBases {
            state,
            control,
            adjoint,
            aggregated: manifest.aggregated,
        };
        let mut fams: Vec<Vec<ReducedTerm>> = Vec::new();
        for fam in FAMILIES {
            let entries = manifest
                .terms
                .get(fam)
                .ok_or_else(|| bad(format!("missing term family {fam}")))?;
            let mut out = Vec::new();
            for e in entries {
                let coefficients = e
                    .coefficients
                    .iter()
                    .map(|s| Coefficient::from_spec(s).ok_or_else(|| bad(format!("bad coefficient `{s}`"))))
                    .collect::<Result<Vec<_>, _>>()?;
                let (_, block) = read_block(&dir.join(&e.file))?;
                out.push(ReducedTerm {
                    name: e.name.clone(),
                    coefficients,
                    block,
                });
            }
            fams.push(out);
        }
        let nonlinearity = match manifest.nonlinearity {
            Some(n) => {
                let tensor = match (n.tensor_file, n.tensor_dims) {
                    (Some(f), Some(dims)) => {
                        let (_, m) = read_block(&dir.join(f))?;
                        if m.shape() != (dims[0], dims[1] * dims[2]) {
                            return Err(bad("tensor shape mismatch".into()));
                        }
                        let data = (0..dims[0])
                            .flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>())
                            .collect();
                        Some(ReducedTensor { dims, data })
                    }
                    _ => None,
                };
                Some(ReducedNonlinearity {
                    coefficient: Coefficient::from_spec(&n.coefficient)
                        .ok_or_else(|| bad(format!("bad coefficient `{}`", n.coefficient)))?,
                    first: n.first[0]..n.first[1],
                    second: n.second[0]..n.second[1],
                    test: n.test[0]..n.test[1],
                    tensor,
                })
            }
            None => None,
        };
        let mut fams = fams.into_iter();
        let mut next = || fams.next().expect("seven families");
        let model = ReducedModel {
            case: manifest.case,
            alpha: manifest.alpha,
            mode: manifest.online_mode,
            h_terms: next(),
            q_terms: next(),
            a_terms: next(),
            b_terms: next(),
            f_terms: next(),
            g_terms: next(),
            zz_terms: next(),
            nonlinearity,
            vy: bases.lift_matrix(FieldGroup::State),
            vu: bases.lift_matrix(FieldGroup::Control),
            vp: bases.lift_matrix(FieldGroup::Adjoint),
            bases,
        };
        let (a, b, c) = model.dims();
        if [a, b, c] != manifest.dims {
            return Err(bad(format!("dims {:?} do not match bases {:?}", manifest.dims, [a, b, c])));
        }
        Ok(model)
    }
}
