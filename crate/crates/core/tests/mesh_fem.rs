use approx::assert_relative_eq;
use nalgebra::{DMatrix, SymmetricEigen};
use ocp_rom::fem::{
    assemble_advection, assemble_boundary_mass, assemble_mass, assemble_stiffness, compute_poincare_constant,
    compute_trace_constant, interpolate, Axis, DofMap, TrilinearForm,
};
use ocp_rom::mesh::{
    generate_structured_rectangle, BoundaryEdge, BoundaryTag, Mesh, MeshError, Rect, SubdomainBox, TaggingPolicy,
    BULK,
};
use ocp_rom::ocp::{builtin_case, gulf_analog_mesh, CaseName};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(n: usize) -> Mesh {
    generate_structured_rectangle(n, n, Rect::unit(), &TaggingPolicy::all_dirichlet(), &[]).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

#[test]
fn structured_counts() {
    let m = unit(1);
    assert_eq!((m.num_vertices(), m.num_triangles()), (4, 2));
    let m = unit(4);
    assert_eq!((m.num_vertices(), m.num_triangles()), (25, 32));
    let m = generate_structured_rectangle(3, 5, Rect::new(0.0, 0.0, 2.0, 1.0), &TaggingPolicy::all_dirichlet(), &[]).unwrap();
    assert_eq!((m.num_vertices(), m.num_triangles()), (24, 30));
}

#[test]
fn open_south_west_neumann_count() {
    for (nx, ny) in [(1, 1), (3, 5), (8, 8)] {
        let m = generate_structured_rectangle(nx, ny, Rect::unit(), &TaggingPolicy::open_south_west(), &[]).unwrap();
        assert_eq!(m.count_edges(BoundaryTag::Neumann), nx + ny);
        assert_eq!(m.count_edges(BoundaryTag::Dirichlet), nx + ny);
    }
}

#[test]
fn triangles_labeled_by_first_box() {
    let boxes = [
        SubdomainBox::new("a", Rect::new(0.0, 0.0, 0.5, 0.5)),
        SubdomainBox::new("b", Rect::new(0.0, 0.0, 1.0, 0.5)),
    ];
    let m = generate_structured_rectangle(4, 4, Rect::unit(), &TaggingPolicy::all_dirichlet(), &boxes).unwrap();
    for (t, label) in m.labels().iter().enumerate() {
        let [x, y] = m.barycenter(t);
        let expect = if x < 0.5 && y < 0.5 {
            "a"
        } else if y < 0.5 {
            "b"
        } else {
            BULK
        };
        assert_eq!(label, expect);
    }
    assert_relative_eq!(m.label_area("a"), 0.25, max_relative = 1e-12);
    assert_relative_eq!(m.label_area("b"), 0.25, max_relative = 1e-12);
}

#[test]
fn save_load_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for m in [unit(1), gulf_analog_mesh(7).unwrap()] {
        let p = dir.path().join("m.txt");
        m.save(&p).unwrap();
        let back = Mesh::load(&p).unwrap();
        assert_eq!(back, m);
        for (a, b) in back.vertices().iter().zip(m.vertices()) {
            assert_eq!(a[0].to_bits(), b[0].to_bits());
            assert_eq!(a[1].to_bits(), b[1].to_bits());
        }
    }
}

const SQUARE: &str = "4 2 4\n0 0\n1 0\n0 1\n1 1\n0 1 3 bulk\n0 3 2 bulk\n0 1 D\n1 3 D\n3 2 D\n2 0 D\n";

#[test]
fn parse_errors_are_distinct() {
    assert!(Mesh::from_text(SQUARE).is_ok());
    assert!(matches!(Mesh::from_text("4 2\n"), Err(MeshError::MalformedHeader(_))));
    let dangling = SQUARE.replace("0 3 2 bulk", "0 3 7 bulk");
    assert!(matches!(Mesh::from_text(&dangling), Err(MeshError::VertexIndex { index: 7, .. })));
    let dup = SQUARE.replacen("4 2 4", "4 2 5", 1) + "1 0 N\n";
    assert!(matches!(Mesh::from_text(&dup), Err(MeshError::DuplicateBoundaryEdge(..))));
    let untagged = SQUARE.replacen("4 2 4", "4 2 3", 1).replace("2 0 D\n", "");
    assert!(matches!(Mesh::from_text(&untagged), Err(MeshError::UntaggedBoundaryEdge(..))));
    let interior = SQUARE.replacen("4 2 4", "4 2 5", 1) + "0 3 D\n";
    assert!(matches!(Mesh::from_text(&interior), Err(MeshError::TaggedInteriorEdge(..))));
}

#[test]
fn corrupted_fixtures_fail_validation() {
    let m = unit(2);
    let v = m.vertices().to_vec();
    let labels = m.labels().to_vec();
    let b = m.boundary_edges().to_vec();

    let mut t = m.triangles().to_vec();
    t[0] = [t[0][0], t[0][0], t[0][2]];
    assert!(Mesh::new(v.clone(), t, b.clone(), labels.clone()).is_err());

    let mut t = m.triangles().to_vec();
    t.push(t[0]);
    let mut l2 = labels.clone();
    l2.push(BULK.into());
    assert!(Mesh::new(v.clone(), t, b.clone(), l2).is_err());

    let mut b2 = b.clone();
    b2.pop();
    assert!(matches!(
        Mesh::new(v.clone(), m.triangles().to_vec(), b2, labels.clone()),
        Err(MeshError::UntaggedBoundaryEdge(..))
    ));

    let mut b3 = b;
    b3.push(BoundaryEdge {
        vertices: b3[0].vertices,
        tag: BoundaryTag::Neumann,
    });
    assert!(Mesh::new(v, m.triangles().to_vec(), b3, labels).is_err());
}

#[test]
fn clockwise_input_is_normalized() {
    let m = Mesh::from_text(&SQUARE.replace("0 1 3 bulk", "0 3 1 bulk")).unwrap();
    for t in 0..m.num_triangles() {
        assert!(m.signed_area(t) > 0.0);
    }
}

#[test]
fn mass_sums_and_partition_of_unity() {
    let m = unit(4);
    let mass = assemble_mass(&m, None).unwrap();
    let ones = vec![1.0; m.num_vertices()];
    assert_relative_eq!(mass.quad_form(&ones), 1.0, epsilon = 1e-13);
    assert!(mass.is_symmetric(1e-14));
    let g = gulf_analog_mesh(8).unwrap();
    for label in ["control", "observation"] {
        let ml = assemble_mass(&g, Some(label)).unwrap();
        let total: f64 = ml.values().iter().sum();
        assert_relative_eq!(total, g.label_area(label), max_relative = 1e-13);
    }
}

#[test]
fn mass_is_positive_definite() {
    let m = unit(3);
    let d = assemble_mass(&m, None).unwrap().to_dense();
    let e = SymmetricEigen::new(d);
    assert!(e.eigenvalues.min() > 0.0);
}

#[test]
fn stiffness_kernel_and_energy() {
    let m = unit(5);
    let k = assemble_stiffness(&m);
    for s in k.row_sums() {
        assert!(s.abs() < 1e-13);
    }
    let x1 = interpolate(&m, |x, _| x);
    assert_relative_eq!(k.quad_form(&x1), 1.0, epsilon = 1e-13);
    let e = SymmetricEigen::new(k.to_dense());
    assert!(e.eigenvalues.min() > -1e-12);
}

#[test]
fn advection_of_constants_and_linear_field() {
    let m = unit(6);
    let ones = vec![1.0; m.num_vertices()];
    for axis in [Axis::X1, Axis::X2] {
        let a = assemble_advection(&m, axis);
        assert!(a.mul_vec(&ones).iter().all(|v| v.abs() < 1e-14));
    }
    let a1 = assemble_advection(&m, Axis::X1);
    let x1 = interpolate(&m, |x, _| x);
    assert_relative_eq!(dot(&a1.mul_vec(&x1), &ones), 1.0, epsilon = 1e-13);
}

/// `½ ∮ n_d y²` along the boundary, integrated exactly edge by edge (Simpson on quadratics).
fn boundary_flux_oracle(m: &Mesh, axis: usize, y: &[f64]) -> f64 {
    let centroid = [0.5 * (m.vertices()[0][0] + m.vertices().last().unwrap()[0]), 0.5 * (m.vertices()[0][1] + m.vertices().last().unwrap()[1])];
    let mut total = 0.0;
    for e in m.boundary_edges() {
        let [a, b] = e.vertices;
        let (pa, pb) = (m.vertices()[a], m.vertices()[b]);
        let (tx, ty) = (pb[0] - pa[0], pb[1] - pa[1]);
        let len = (tx * tx + ty * ty).sqrt();
        let mut n = [ty / len, -tx / len];
        let mid = [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])];
        if (mid[0] - centroid[0]) * n[0] + (mid[1] - centroid[1]) * n[1] < 0.0 {
            n = [-n[0], -n[1]];
        }
        let ym = 0.5 * (y[a] + y[b]);
        let integral = len / 6.0 * (y[a] * y[a] + 4.0 * ym * ym + y[b] * y[b]);
        total += 0.5 * n[axis] * integral;
    }
    total
}

#[test]
fn advection_green_identity_random_vectors() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for m in [unit(5), gulf_analog_mesh(6).unwrap()] {
        let a = [assemble_advection(&m, Axis::X1), assemble_advection(&m, Axis::X2)];
        for _ in 0..100 {
            let y = random_vec(&mut rng, m.num_vertices());
            for (d, ad) in a.iter().enumerate() {
                let lhs = ad.quad_form(&y);
                let rhs = boundary_flux_oracle(&m, d, &y);
                assert!((lhs - rhs).abs() < 1e-12 * (1.0 + rhs.abs()), "{lhs} vs {rhs}");
            }
        }
    }
}

#[test]
fn boundary_mass_totals_and_support() {
    let g = gulf_analog_mesh(8).unwrap();
    for (tag, len) in [(BoundaryTag::Neumann, 1.0), (BoundaryTag::Dirichlet, 1.0)] {
        let b = assemble_boundary_mass(&g, tag);
        let total: f64 = b.values().iter().sum();
        assert_relative_eq!(total, len, max_relative = 1e-13);
        assert!(b.is_symmetric(1e-14));
        let on_edge: std::collections::HashSet<usize> = g.boundary_vertices(tag).into_iter().collect();
        for i in 0..g.num_vertices() {
            if !on_edge.contains(&i) {
                assert_eq!(b.row(i).count(), 0);
            }
        }
    }
    let none = assemble_boundary_mass(&unit(3), BoundaryTag::Neumann);
    assert_eq!(none.nnz(), 0);
}

/// Per-element trilinear integral with the edge-midpoint rule (exact for linear `w`).
fn trilinear_oracle(m: &Mesh, v: &[f64], rho: &[f64], w: &[f64]) -> f64 {
    let mut total = 0.0;
    for tri in m.triangles() {
        let p: Vec<[f64; 2]> = tri.iter().map(|&i| m.vertices()[i]).collect();
        let det = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[2][0] - p[0][0]) * (p[1][1] - p[0][1]);
        let grad = |f: &[f64]| {
            let (f0, f1, f2) = (f[tri[0]], f[tri[1]], f[tri[2]]);
            let gx = ((f1 - f0) * (p[2][1] - p[0][1]) - (f2 - f0) * (p[1][1] - p[0][1])) / det;
            let gy = ((f2 - f0) * (p[1][0] - p[0][0]) - (f1 - f0) * (p[2][0] - p[0][0])) / det;
            (gx, gy)
        };
        let (vx, vy) = grad(v);
        let (rx, ry) = grad(rho);
        let f = vx * ry - vy * rx;
        let area = 0.5 * det.abs();
        let mids = [(0, 1), (1, 2), (2, 0)].map(|(a, b)| 0.5 * (w[tri[a]] + w[tri[b]]));
        total += f * area * mids.iter().sum::<f64>() / 3.0;
    }
    total
}

#[test]
fn trilinear_properties() {
    let m = unit(5);
    let t = TrilinearForm::new(&m);
    let x1 = interpolate(&m, |x, _| x);
    let x2 = interpolate(&m, |_, y| y);
    let ones = vec![1.0; m.num_vertices()];
    assert_relative_eq!(t.evaluate(&x1, &x2, &ones), 1.0, epsilon = 1e-13);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let v = random_vec(&mut rng, m.num_vertices());
        let r = random_vec(&mut rng, m.num_vertices());
        let w = random_vec(&mut rng, m.num_vertices());
        assert!(t.evaluate(&v, &v, &w).abs() < 1e-12);
        assert!((t.evaluate(&v, &r, &w) + t.evaluate(&r, &v, &w)).abs() < 1e-12);
        assert!((t.evaluate(&v, &r, &w) - trilinear_oracle(&m, &v, &r, &w)).abs() < 1e-12);
        let applied = t.apply(&v, &r);
        assert!((dot(&applied, &w) - t.evaluate(&v, &r, &w)).abs() < 1e-12);
        let d1 = t.derivative_first(&r).mul_vec(&v);
        let d2 = t.derivative_second(&v).mul_vec(&r);
        for ((a, b), c) in d1.iter().zip(&d2).zip(&applied) {
            assert!((a - c).abs() < 1e-13 && (b - c).abs() < 1e-13);
        }
    }
}

#[test]
fn gulf_constants_satisfy_coercivity_criterion() {
    let g = gulf_analog_mesh(32).unwrap();
    let cp = compute_poincare_constant(&g).unwrap();
    let ct = compute_trace_constant(&g).unwrap();
    assert!((cp + 1.0) * ct < 0.5 * 2f64.sqrt(), "C_p = {cp}, C_t = {ct}");
}

/// Uniform refinement nests the P1 spaces, so by min-max the smallest Rayleigh quotient
/// of `K` over `M` can only drop and `C_p` can only grow, towards the continuous value.
#[test]
fn poincare_constant_monotone_under_refinement() {
    let c: Vec<f64> = [4, 8, 16]
        .iter()
        .map(|&n| compute_poincare_constant(&gulf_analog_mesh(n).unwrap()).unwrap())
        .collect();
    assert!(c[0] <= c[1] * (1.0 + 1e-10) && c[1] <= c[2] * (1.0 + 1e-10), "{c:?}");
    assert!((c[2] - c[1]) < (c[1] - c[0]), "{c:?}");
}

#[test]
fn poincare_constant_against_dense_oracle() {
    let g = gulf_analog_mesh(6).unwrap();
    let dofs = DofMap::new(&g);
    let m = dofs.restrict(&assemble_mass(&g, None).unwrap()).to_dense();
    let k = dofs.restrict(&assemble_stiffness(&g)).to_dense();
    let l = k.clone().cholesky().unwrap().l();
    let li = l.clone().try_inverse().unwrap();
    let c = &li * m * li.transpose();
    let oracle = SymmetricEigen::new((&c + c.transpose()) * 0.5).eigenvalues.max();
    assert_relative_eq!(compute_poincare_constant(&g).unwrap(), oracle, max_relative = 1e-8);
}

#[test]
fn gulf_operator_symmetric_part_is_positive() {
    let g = gulf_analog_mesh(12).unwrap();
    let def = builtin_case(CaseName::Gulf, &g).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let mu: Vec<f64> = def.parameter_box.iter().map(|&(lo, hi)| rng.random_range(lo..hi)).collect();
        let a = def.a.evaluate(&mu).to_dense();
        let s: DMatrix<f64> = (&a + a.transpose()) * 0.5;
        assert!(SymmetricEigen::new(s).eigenvalues.min() > 0.0, "mu = {mu:?}");
    }
}

#[test]
fn assembly_independent_of_triangle_order() {
    let g = gulf_analog_mesh(6).unwrap();
    let mut perm: Vec<usize> = (0..g.num_triangles()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    let p = g.permute_triangles(&perm).unwrap();
    let close = |a: DMatrix<f64>, b: DMatrix<f64>| (a - b).amax() <= 1e-14;
    assert!(close(assemble_mass(&g, None).unwrap().to_dense(), assemble_mass(&p, None).unwrap().to_dense()));
    assert!(close(
        assemble_mass(&g, Some("observation")).unwrap().to_dense(),
        assemble_mass(&p, Some("observation")).unwrap().to_dense()
    ));
    assert!(close(assemble_stiffness(&g).to_dense(), assemble_stiffness(&p).to_dense()));
    for axis in [Axis::X1, Axis::X2] {
        assert!(close(assemble_advection(&g, axis).to_dense(), assemble_advection(&p, axis).to_dense()));
    }
    assert!(close(
        assemble_boundary_mass(&g, BoundaryTag::Neumann).to_dense(),
        assemble_boundary_mass(&p, BoundaryTag::Neumann).to_dense()
    ));
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = random_vec(&mut rng, g.num_vertices());
    assert!(close(
        TrilinearForm::new(&g).derivative_first(&r).to_dense(),
        TrilinearForm::new(&p).derivative_first(&r).to_dense()
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generated_meshes_validate(nx in 1usize..9, ny in 1usize..9, w in 0.1f64..3.0, h in 0.1f64..3.0, open in any::<bool>()) {
        let policy = if open { TaggingPolicy::open_south_west() } else { TaggingPolicy::all_dirichlet() };
        let m = generate_structured_rectangle(nx, ny, Rect::new(0.0, 0.0, w, h), &policy, &[]).unwrap();
        prop_assert_eq!(m.num_vertices(), (nx + 1) * (ny + 1));
        prop_assert_eq!(m.num_triangles(), 2 * nx * ny);
        prop_assert!(m.validate().is_ok());
        prop_assert!((m.total_area() - w * h).abs() < 1e-12 * w * h);
        prop_assert_eq!(m.boundary_edges().len(), 2 * (nx + ny));
    }

    #[test]
    fn mass_quadratic_form_is_l2_norm_of_linear_fields(a in -2.0f64..2.0, b in -2.0f64..2.0, c in -2.0f64..2.0) {
        // ∫ (a + b x + c y)² over the unit square, exact for P1 interpolants of linear fields.
        let m = unit(3);
        let f = interpolate(&m, |x, y| a + b * x + c * y);
        let exact = a * a + b * b / 3.0 + c * c / 3.0 + a * b + a * c + b * c / 2.0;
        let mass = assemble_mass(&m, None).unwrap();
        prop_assert!((mass.quad_form(&f) - exact).abs() < 1e-12 * (1.0 + exact));
        let k = assemble_stiffness(&m);
        prop_assert!((k.quad_form(&f) - (b * b + c * c)).abs() < 1e-12 * (1.0 + b * b + c * c));
    }
}
