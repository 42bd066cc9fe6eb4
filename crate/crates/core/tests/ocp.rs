use approx::assert_relative_eq;
use nalgebra::DMatrix;
use ocp_rom::fem::TrilinearForm;
use ocp_rom::ocp::{
    builtin_case, desired_state_parameter, generate_desired_state, reduced_cost, reduced_gradient, solve, solve_truth,
    solve_truth_nonlinear, AffineVector, CaseName, Coefficient, NewtonOptions, OcpDefinition, OcpError, KKT_TOL,
};
use ocp_rom::sparse::SparseMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn case(name: CaseName, cells: usize) -> OcpDefinition {
    builtin_case(name, &name.analog_mesh(cells).unwrap()).unwrap()
}

fn random_mu(def: &OcpDefinition, rng: &mut ChaCha8Rng) -> Vec<f64> {
    def.parameter_box.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect()
}

fn relative_kkt_residual(def: &OcpDefinition, mu: &[f64], y: &[f64], u: &[f64], p: &[f64]) -> f64 {
    let (r, scale) = def.kkt_residual(mu, y, u, p).unwrap();
    r.iter().map(|x| x * x).sum::<f64>().sqrt() / scale
}

fn dense_sum(terms: &[(f64, &SparseMatrix)], shape: (usize, usize)) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(shape.0, shape.1);
    for (c, m) in terms {
        for (i, j, v) in m.iter() {
            out[(i, j)] += c * v;
        }
    }
    out
}

#[test]
fn gulf_structure() {
    let def = case(CaseName::Gulf, 16);
    assert_eq!(def.a.terms().len(), 3);
    let coeffs: Vec<_> = def.a.terms().iter().map(|t| t.coefficient.to_spec().unwrap()).collect();
    assert_eq!(coeffs, ["mu1", "mu2", "mu3"]);
    assert_eq!(def.dims().1, 1);
    assert_eq!(def.alpha, 1e-7);
    assert_eq!(def.l0, 1000.0);
    assert_eq!(def.parameter_box, vec![(0.5, 1.0), (-1.0, 1.0), (-1.0, 1.0)]);
    assert!(def.b.is_parameter_independent() && def.m.is_parameter_independent() && def.q.is_parameter_independent());
    let zd = def.z_d.evaluate(&[0.7, 0.0, 0.0]);
    assert!(zd.iter().all(|&z| z == 0.0 || z == 0.2));
    assert!(zd.iter().any(|&z| z == 0.2));
}

#[test]
fn ocean_structure() {
    let lin = case(CaseName::StommelMunk, 8);
    let nl = case(CaseName::QgNonlinear, 8);
    assert!(lin.nonlinearity.is_none());
    assert_eq!(nl.nonlinearity.as_ref().unwrap().coefficient.to_spec().as_deref(), Some("mu3"));
    assert_eq!(lin.alpha, 1e-5);
    let b = lin.parameter_box.clone();
    assert_eq!(b[0], (1e-4, 1.0));
    assert_relative_eq!(b[1].0, 0.07f64.powi(3));
    assert_relative_eq!(b[2].1, 0.045f64.powi(2));
    assert_eq!(lin.layout.state.len(), 2);
    assert_eq!(lin.layout.adjoint.len(), 2);
    assert_eq!(desired_state_parameter(CaseName::StommelMunk), vec![0.0, 0.07f64.powi(3), 0.0]);
    assert_eq!(desired_state_parameter(CaseName::QgNonlinear), vec![0.0, 0.07f64.powi(3), 0.07f64.powi(2)]);
}

#[test]
fn missing_label_rejected() {
    let mesh = CaseName::StommelMunk.analog_mesh(4).unwrap();
    assert!(matches!(builtin_case(CaseName::Gulf, &mesh), Err(OcpError::MissingLabel(_))));
}

#[test]
fn gulf_affine_a_equals_sum_of_terms_exactly() {
    let def = case(CaseName::Gulf, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let mu = random_mu(&def, &mut rng);
        let terms: Vec<(f64, &SparseMatrix)> = def.a.terms().iter().enumerate().map(|(q, t)| (mu[q], &t.value)).collect();
        assert_eq!(def.a.evaluate(&mu).to_dense(), dense_sum(&terms, def.a.shape()));
    }
}

#[test]
fn affine_evaluation_consistent_for_all_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for name in [CaseName::Gulf, CaseName::StommelMunk, CaseName::QgNonlinear] {
        let def = case(name, 8);
        for _ in 0..20 {
            let mu = random_mu(&def, &mut rng);
            for fam in [&def.a, &def.b, &def.m, &def.q] {
                let terms: Vec<(f64, &SparseMatrix)> =
                    fam.terms().iter().map(|t| (t.coefficient.eval(&mu), &t.value)).collect();
                assert_eq!(fam.evaluate(&mu).to_dense(), dense_sum(&terms, fam.shape()));
            }
        }
    }
}

#[test]
fn homogeneous_data_gives_zero_solution() {
    for name in [CaseName::Gulf, CaseName::StommelMunk] {
        let mut def = case(name, 8);
        def.z_d = AffineVector::single("z_d", Coefficient::One, vec![0.0; def.z_d.len()]);
        def.g = AffineVector::single("g", Coefficient::One, vec![0.0; def.g.len()]);
        let mu = def.parameter_box.iter().map(|(lo, hi)| 0.5 * (lo + hi)).collect::<Vec<_>>();
        let s = solve_truth(&def, &mu).unwrap();
        assert!(s.y.iter().chain(&s.u).chain(&s.p).all(|&x| x == 0.0));
        assert_eq!(s.objective, 0.0);
    }
}

#[test]
fn truth_kkt_residual_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for name in [CaseName::Gulf, CaseName::StommelMunk] {
        let def = case(name, 16);
        for _ in 0..5 {
            let mu = random_mu(&def, &mut rng);
            let s = solve_truth(&def, &mu).unwrap();
            assert!(s.residual <= KKT_TOL);
            assert!(relative_kkt_residual(&def, &mu, &s.y, &s.u, &s.p) <= KKT_TOL);
            assert_relative_eq!(s.objective, def.objective(&mu, &s.y, &s.u));
        }
    }
}

#[test]
fn nonlinear_solve_rejected_by_linear_solver() {
    let def = case(CaseName::QgNonlinear, 6);
    assert!(matches!(solve_truth(&def, &[0.5, 0.5, 1e-3]), Err(OcpError::Nonlinear(_))));
}

#[test]
fn parameter_dimension_checked() {
    let def = case(CaseName::Gulf, 6);
    assert!(matches!(solve_truth(&def, &[0.5, 0.0]), Err(OcpError::ParameterDimension { .. })));
}

#[test]
fn gulf_adjoint_gradient_matches_central_differences() {
    let def = case(CaseName::Gulf, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..3 {
        let mu = random_mu(&def, &mut rng);
        let u = vec![rng.random_range(-0.5..0.5)];
        let g = reduced_gradient(&def, &mu, &u).unwrap()[0];
        let best = [1e-3, 1e-4, 1e-5, 1e-6]
            .iter()
            .map(|&h| {
                let fd = (reduced_cost(&def, &mu, &[u[0] + h]).unwrap() - reduced_cost(&def, &mu, &[u[0] - h]).unwrap()) / (2.0 * h);
                ((fd - g) / g).abs()
            })
            .fold(f64::INFINITY, f64::min);
        assert!(best <= 1e-6, "{mu:?}: {best:e}");
    }
}

#[test]
fn gradient_vanishes_at_truth_control() {
    let def = case(CaseName::Gulf, 16);
    let mu = [0.75, 0.2, -0.4];
    let s = solve_truth(&def, &mu).unwrap();
    let g = reduced_gradient(&def, &mu, &s.u).unwrap()[0];
    let g0 = reduced_gradient(&def, &mu, &[0.0]).unwrap()[0];
    assert!(g.abs() <= 1e-8 * g0.abs(), "{g:e} vs {g0:e}");
}

#[test]
fn control_norm_decreases_with_alpha() {
    let mut def = case(CaseName::Gulf, 12);
    let mu = [0.75, 0.5, 0.5];
    let mut last = f64::INFINITY;
    for alpha in [1e-1, 1.0, 10.0] {
        def.alpha = alpha;
        let s = solve_truth(&def, &mu).unwrap();
        let n = s.u[0].abs();
        assert!(n < last, "alpha {alpha}: {n} >= {last}");
        last = n;
    }
}

#[test]
fn truth_minimizes_objective_under_perturbation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for name in [CaseName::Gulf, CaseName::StommelMunk] {
        let def = case(name, 12);
        let mu = random_mu(&def, &mut rng);
        let s = solve_truth(&def, &mu).unwrap();
        let j_star = reduced_cost(&def, &mu, &s.u).unwrap();
        assert_relative_eq!(j_star, s.objective, max_relative = 1e-9);
        let scale = s.u.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-3);
        for _ in 0..10 {
            let du: Vec<f64> = s.u.iter().map(|_| rng.random_range(-0.1..0.1) * scale).collect();
            for sign in [1.0, -1.0] {
                let u: Vec<f64> = s.u.iter().zip(&du).map(|(a, d)| a + sign * d).collect();
                assert!(reduced_cost(&def, &mu, &u).unwrap() >= j_star);
            }
        }
    }
}

#[test]
fn nonlinear_with_zero_coefficient_matches_linear() {
    let lin = case(CaseName::StommelMunk, 12);
    let nl = case(CaseName::QgNonlinear, 12);
    // Same desired state for both, so only the trilinear coefficient differs.
    let mut nl = nl;
    nl.z_d = lin.z_d.clone();
    let mu = [0.3, 0.01, 0.0];
    let a = solve_truth(&lin, &mu).unwrap();
    let b = solve_truth_nonlinear(&nl, &mu, &NewtonOptions::default()).unwrap();
    for (x, y) in [(&a.y, &b.y), (&a.u, &b.u), (&a.p, &b.p)] {
        let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (p, q) in x.iter().zip(y) {
            assert!((p - q).abs() <= 1e-12 * scale, "{:e}", (p - q).abs() / scale);
        }
    }
}

#[test]
fn newton_converges_quadratically() {
    let def = case(CaseName::QgNonlinear, 16);
    let mu = [1e-3, 0.07f64.powi(3), 0.045f64.powi(2)];
    let s = solve_truth_nonlinear(&def, &mu, &NewtonOptions::default()).unwrap();
    assert!(s.residual <= 1e-10);
    assert!(relative_kkt_residual(&def, &mu, &s.y, &s.u, &s.p) <= 1e-10);
    let t: Vec<f64> = s.residual_trace.iter().map(|r| r.log10()).collect();
    // Digits double near the root: log r_{k+1} <= 2 log r_k up to the constant of the
    // quadratic bound, checked on the last three steps that start from r_k < 1e-3.
    let pairs: Vec<(f64, f64)> = t.windows(2).map(|w| (w[0], w[1])).filter(|(a, _)| *a < -3.0).collect();
    assert!(!pairs.is_empty(), "{t:?}");
    for &(a, b) in pairs.iter().rev().take(3) {
        if b > -14.0 {
            assert!(b <= 1.8 * a, "{t:?}");
        }
    }
}

#[test]
fn newton_iteration_counts_reasonable() {
    let def = case(CaseName::QgNonlinear, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..5 {
        let mu = random_mu(&def, &mut rng);
        let s = solve(&def, &mu, &NewtonOptions::default()).unwrap();
        assert!(s.iterations <= 15, "{mu:?}: {}", s.iterations);
    }
}

#[test]
fn newton_reports_max_iterations() {
    let def = case(CaseName::QgNonlinear, 8);
    let opts = NewtonOptions {
        tol: 1e-30,
        max_iter: 2,
        damping: false,
    };
    let r = solve_truth_nonlinear(&def, &[0.5, 0.5, 2e-3], &opts);
    assert!(matches!(r, Err(OcpError::NewtonMaxIter { iterations: 2, .. })), "{r:?}");
}

#[test]
fn trilinear_is_linear_in_each_slot() {
    let mesh = CaseName::QgNonlinear.analog_mesh(8).unwrap();
    let t = TrilinearForm::new(&mesh);
    let n = mesh.num_vertices();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut vec = || (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let (v, rho, w, d) = (vec(), vec(), vec(), vec());
    let eps = 0.37;
    let shift = |x: &[f64]| x.iter().zip(&d).map(|(a, b)| a + eps * b).collect::<Vec<_>>();
    let base = t.evaluate(&v, &rho, &w);
    let scale = base.abs().max(1.0);
    assert!((t.evaluate(&shift(&v), &rho, &w) - base - eps * t.evaluate(&d, &rho, &w)).abs() <= 1e-13 * scale);
    assert!((t.evaluate(&v, &shift(&rho), &w) - base - eps * t.evaluate(&v, &d, &w)).abs() <= 1e-13 * scale);
    assert!((t.evaluate(&v, &rho, &shift(&w)) - base - eps * t.evaluate(&v, &rho, &d)).abs() <= 1e-13 * scale);
}

#[test]
fn desired_state_zero_forcing_is_zero() {
    let def = case(CaseName::QgNonlinear, 8);
    let nu = def.dims().1;
    for case in [CaseName::StommelMunk, CaseName::QgNonlinear] {
        let z = generate_desired_state(&def, &vec![0.0; nu], &desired_state_parameter(case), &NewtonOptions::default()).unwrap();
        assert!(z.iter().all(|&x| x == 0.0));
    }
}

#[test]
fn desired_state_is_nontrivial() {
    let def = case(CaseName::StommelMunk, 8);
    let z = def.z_d.evaluate(&[0.5, 0.5, 0.0]);
    assert!(z.iter().any(|&x| x.abs() > 1e-6));
}

/// Largest singular value of `L_rowᵀ⁻¹ A L_col⁻¹` with `X = L Lᵀ`, i.e. the operator norm
/// of `A` from the column space (norm `X_col`) into the dual of the row space (norm `X_row`).
fn induced_norm(a: &DMatrix<f64>, x_row: &DMatrix<f64>, x_col: &DMatrix<f64>) -> f64 {
    let lr = x_row.clone().cholesky().unwrap().l();
    let lc = x_col.clone().cholesky().unwrap().l();
    let left = lr.solve_lower_triangular(a).unwrap();
    let t = lc.solve_lower_triangular(&left.transpose()).unwrap();
    t.singular_values().max()
}

#[test]
fn ocean_operator_bounds() {
    let def = case(CaseName::StommelMunk, 6);
    let xy = def.layout.norm_matrix(ocp_rom::ocp::FieldGroup::State).to_dense();
    let xp = def.layout.norm_matrix(ocp_rom::ocp::FieldGroup::Adjoint).to_dense();
    let xu = def.layout.norm_matrix(ocp_rom::ocp::FieldGroup::Control).to_dense();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..5 {
        let mu = random_mu(&def, &mut rng);
        let a = induced_norm(&def.a.evaluate(&mu).to_dense(), &xp, &xy);
        assert!(a <= 3.0 + mu[0].abs() + mu[1].abs(), "{mu:?}: {a}");
        let b = induced_norm(&def.b.evaluate(&mu).to_dense(), &xp, &xu);
        assert!(b <= 1.0 + 1e-12, "{b}");
    }
}
