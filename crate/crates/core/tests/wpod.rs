use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ocp_rom::ocp::{builtin_case, solve_truth, CaseName, FieldGroup};
use ocp_rom::sparse::SparseMatrix;
use ocp_rom::wpod::{
    aggregate, pod_basis, pod_partitioned, pod_snapshot_basis, pod_weighted_snapshot_basis, principal_angles, PodError,
    PodFormulation, PodOptions, SnapshotSet, GS_DROP_TOL,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BOTH: [PodFormulation; 2] = [PodFormulation::Snapshot, PodFormulation::Weighted];

/// Tridiagonal SPD inner product (1D `H¹`-like), so X is not the identity.
fn spd_norm(n: usize) -> SparseMatrix {
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        d[(i, i)] = 3.0 + 0.1 * i as f64;
        if i + 1 < n {
            d[(i, i + 1)] = -1.0;
            d[(i + 1, i)] = -1.0;
        }
    }
    SparseMatrix::from_dense(&d)
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0))
}

/// Weighted POD by brute force in the full space: eigenpairs of
/// `Lᵀ S W Sᵀ L` with `X = L Lᵀ`, modes `L⁻ᵀ v`.
fn dense_oracle(s: &DMatrix<f64>, w: &[f64], x: &SparseMatrix) -> (Vec<f64>, DMatrix<f64>) {
    let xd = x.to_dense();
    let l = xd.cholesky().unwrap().l();
    let wd = DMatrix::from_diagonal(&DVector::from_vec(w.to_vec()));
    let k = l.transpose() * s * wd * s.transpose() * &l;
    let e = SymmetricEigen::new((&k + k.transpose()) * 0.5);
    let mut idx: Vec<usize> = (0..e.eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
    let vals = idx.iter().map(|&i| e.eigenvalues[i]).collect();
    let vecs = DMatrix::from_columns(&idx.iter().map(|&i| e.eigenvectors.column(i).into_owned()).collect::<Vec<_>>());
    let modes = l.transpose().solve_upper_triangular(&vecs).unwrap();
    (vals, modes)
}

fn assert_x_orthonormal(v: &DMatrix<f64>, x: &SparseMatrix) {
    let g = v.transpose() * x.mul_dense(v);
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let d = if i == j { 1.0 } else { 0.0 };
            assert!((g[(i, j)] - d).abs() <= 1e-10, "({i},{j}) {}", g[(i, j)]);
        }
    }
}

fn max_angle(a: &DMatrix<f64>, b: &DMatrix<f64>, x: &SparseMatrix) -> f64 {
    assert_eq!(a.ncols(), b.ncols());
    principal_angles(a, b, x).into_iter().fold(0.0, f64::max)
}

#[test]
fn single_snapshot_is_normalized() {
    let x = spd_norm(6);
    let chi: Vec<f64> = (0..6).map(|i| (i as f64 + 1.0).sin()).collect();
    let nx = x.quad_form(&chi);
    let set = SnapshotSet::new(&[chi.clone()], vec![0.3], x.clone()).unwrap();
    let bases: Vec<_> = BOTH.iter().map(|&f| pod_basis(&set, 4, f, &PodOptions::default()).unwrap()).collect();
    for b in &bases {
        assert_eq!(b.retained(), 1);
        assert!((b.eigenvalues[0] - 0.3 * nx).abs() <= 1e-12 * nx);
        let v = b.vectors.column(0);
        let ratio: Vec<f64> = chi.iter().zip(v.iter()).map(|(c, v)| v / c).collect();
        for r in &ratio {
            assert!((r.abs() - 1.0 / nx.sqrt()).abs() <= 1e-12);
        }
    }
    assert!(max_angle(&bases[0].vectors, &bases[1].vectors, &x) <= 1e-12);
}

#[test]
fn duplicated_snapshot_is_rank_one() {
    let x = spd_norm(5);
    let chi: Vec<f64> = vec![1.0, -2.0, 0.5, 3.0, 0.0];
    let set = SnapshotSet::new(&[chi.clone(), chi], vec![0.5, 0.5], x).unwrap();
    for f in BOTH {
        let b = pod_basis(&set, 2, f, &PodOptions::default()).unwrap();
        assert_eq!(b.retained(), 1, "{f:?}");
        let l2 = b.eigenvalues.get(1).copied().unwrap_or(0.0);
        assert!(l2 <= 1e-14 * b.eigenvalues[0]);
    }
}

#[test]
fn matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = spd_norm(12);
    let s = random_matrix(&mut rng, 12, 5);
    let w = vec![0.2; 5];
    let set = SnapshotSet::from_matrix(s.clone(), w.clone(), x.clone()).unwrap();
    let (vals, modes) = dense_oracle(&s, &w, &x);
    for f in BOTH {
        let b = pod_basis(&set, 3, f, &PodOptions::default()).unwrap();
        for k in 0..5 {
            assert!((b.eigenvalues[k] - vals[k]).abs() <= 1e-10 * vals[0], "{f:?} {k}");
        }
        assert!(max_angle(&b.vectors, &modes.columns(0, 3).into_owned(), &x) <= 1e-8);
        assert_x_orthonormal(&b.vectors, &x);
    }
}

#[test]
fn formulations_agree_uniform_and_gauss_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = spd_norm(20);
    for w in [vec![1.0 / 8.0; 8], vec![0.0506, 0.1112, 0.1569, 0.1813, 0.1813, 0.1569, 0.1112, 0.0506]] {
        let s = random_matrix(&mut rng, 20, 8);
        let set = SnapshotSet::from_matrix(s, w, x.clone()).unwrap();
        for n in [1, 4, 8] {
            let a = pod_snapshot_basis(&set, n, &PodOptions::default());
            let b = pod_weighted_snapshot_basis(&set, n, &PodOptions::default()).unwrap();
            assert!(max_angle(&a.vectors, &b.vectors, &x) <= 1e-8);
            for (p, q) in a.eigenvalues.iter().zip(&b.eigenvalues) {
                assert!((p - q).abs() <= 1e-10 * a.eigenvalues[0]);
            }
        }
    }
}

#[test]
fn weighted_route_rejects_nonpositive_weights() {
    let set = SnapshotSet::new(&[vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.7, -0.2], SparseMatrix::identity(2)).unwrap();
    assert!(matches!(
        pod_weighted_snapshot_basis(&set, 1, &PodOptions::default()),
        Err(PodError::NonPositiveWeight { index: 1, .. })
    ));
    assert!(matches!(
        SnapshotSet::new(&[vec![1.0, 0.0]], vec![0.0], SparseMatrix::identity(2)),
        Err(PodError::ZeroWeight { .. })
    ));
}

#[test]
fn snapshot_route_handles_negative_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = spd_norm(10);
    let s = random_matrix(&mut rng, 10, 4);
    let w = vec![0.5, 0.4, 0.3, -0.2];
    let set = SnapshotSet::from_matrix(s.clone(), w.clone(), x.clone()).unwrap();
    let b = pod_snapshot_basis(&set, 4, &PodOptions::default());
    let (vals, _) = dense_oracle(&s, &w, &x);
    // The nonzero spectrum of P G equals that of the full-space operator.
    let mut got = b.eigenvalues.clone();
    let mut want: Vec<f64> = vals.into_iter().filter(|v| v.abs() > 1e-10).collect();
    got.sort_by(f64::total_cmp);
    want.sort_by(f64::total_cmp);
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() <= 1e-10 * want.last().unwrap().abs());
    }
    assert!(got[0] < 0.0);
    assert_eq!(b.retained(), 3);
    assert_x_orthonormal(&b.vectors, &x);
}

#[test]
fn zero_snapshots_give_empty_basis() {
    let set = SnapshotSet::new(&[vec![0.0; 4], vec![0.0; 4]], vec![0.5, 0.5], SparseMatrix::identity(4)).unwrap();
    for f in BOTH {
        assert_eq!(pod_basis(&set, 2, f, &PodOptions::default()).unwrap().retained(), 0);
    }
}

#[test]
fn n_zero_gives_empty_basis() {
    let set = SnapshotSet::new(&[vec![1.0, 2.0]], vec![1.0], SparseMatrix::identity(2)).unwrap();
    for f in BOTH {
        let b = pod_basis(&set, 0, f, &PodOptions::default()).unwrap();
        assert_eq!(b.retained(), 0);
        assert_eq!(b.dim(), 2);
    }
}

#[test]
fn n_equal_k_reproduces_snapshots() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = spd_norm(15);
    let set = SnapshotSet::from_matrix(random_matrix(&mut rng, 15, 6), vec![1.0 / 6.0; 6], x.clone()).unwrap();
    for f in BOTH {
        let b = pod_basis(&set, 6, f, &PodOptions::default()).unwrap();
        assert_eq!(b.retained(), 6);
        for i in 0..6 {
            let chi = set.snapshots.column(i).into_owned();
            let p = &b.vectors * (b.vectors.transpose() * DVector::from_vec(x.mul_vec(chi.as_slice())));
            let r = &chi - p;
            assert!(x.quad_form(r.as_slice()).sqrt() <= 1e-8 * x.quad_form(chi.as_slice()).sqrt());
        }
    }
}

#[test]
fn reordering_leaves_subspace_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = spd_norm(14);
    let s = random_matrix(&mut rng, 14, 7);
    let w: Vec<f64> = (0..7).map(|i| 0.05 + 0.02 * i as f64).collect();
    let perm = [3, 6, 0, 5, 1, 4, 2];
    let sp = DMatrix::from_columns(&perm.iter().map(|&j| s.column(j).into_owned()).collect::<Vec<_>>());
    let wp: Vec<f64> = perm.iter().map(|&j| w[j]).collect();
    let a = SnapshotSet::from_matrix(s, w, x.clone()).unwrap();
    let b = SnapshotSet::from_matrix(sp, wp, x.clone()).unwrap();
    for f in BOTH {
        let ba = pod_basis(&a, 4, f, &PodOptions::default()).unwrap();
        let bb = pod_basis(&b, 4, f, &PodOptions::default()).unwrap();
        assert!(max_angle(&ba.vectors, &bb.vectors, &x) <= 1e-10);
    }
}

#[test]
fn eigenvalues_nonincreasing_and_retained_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = spd_norm(30);
    let set = SnapshotSet::from_matrix(random_matrix(&mut rng, 30, 12), vec![1.0 / 12.0; 12], x).unwrap();
    for f in BOTH {
        let b = pod_basis(&set, 8, f, &PodOptions::default()).unwrap();
        assert!(b.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        assert!(b.eigenvalues[..b.retained()].iter().all(|&l| l > 0.0));
        let tail: f64 = b.eigenvalues[8..].iter().sum();
        assert!((b.truncation_energy - tail).abs() <= 1e-14 * b.eigenvalues[0]);
    }
}

#[test]
fn aggregation_dimensions() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = spd_norm(16);
    let set = SnapshotSet::from_matrix(random_matrix(&mut rng, 16, 10), vec![0.1; 10], x.clone()).unwrap();
    let b = pod_weighted_snapshot_basis(&set, 4, &PodOptions::default()).unwrap();
    let same = aggregate(&b.vectors, &b.vectors, &x, GS_DROP_TOL);
    assert_eq!(same.ncols(), 4);
    assert!(max_angle(&same, &b.vectors, &x) <= 1e-10);
    // Modes 5..8 are X-orthogonal to modes 1..4.
    let other = pod_weighted_snapshot_basis(&set, 8, &PodOptions::default()).unwrap();
    let tail = other.vectors.columns(4, 4).into_owned();
    let z = aggregate(&b.vectors, &tail, &x, GS_DROP_TOL);
    assert_eq!(z.ncols(), 8);
    assert_x_orthonormal(&z, &x);
}

#[test]
fn gulf_partitioned_pod() {
    let def = builtin_case(CaseName::Gulf, &CaseName::Gulf.analog_mesh(8).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let sols: Vec<_> = (0..12)
        .map(|_| {
            let mu: Vec<f64> = def.parameter_box.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect();
            solve_truth(&def, &mu).unwrap()
        })
        .collect();
    let w = vec![1.0 / 12.0; 12];
    let sets: Vec<SnapshotSet> = [FieldGroup::State, FieldGroup::Control, FieldGroup::Adjoint]
        .iter()
        .map(|&g| {
            let cols: Vec<Vec<f64>> = sols.iter().map(|s| s.group(g).to_vec()).collect();
            SnapshotSet::new(&cols, w.clone(), def.layout.norm_matrix(g)).unwrap()
        })
        .collect();
    for f in BOTH {
        let bases = pod_partitioned(&sets, &[5, 5, 5], f, &PodOptions::default()).unwrap();
        assert_eq!(bases[1].retained(), 1);
        assert_eq!(bases[0].retained(), 5);
        // Monolithic POD of the concatenated snapshots under the block-diagonal norm.
        let (ny, nu, np) = def.dims();
        let n = ny + nu + np;
        let mut xb = DMatrix::zeros(n, n);
        let mut off = 0;
        for s in &sets {
            let d = s.norm.to_dense();
            xb.view_mut((off, off), d.shape()).copy_from(&d);
            off += d.nrows();
        }
        let cols: Vec<Vec<f64>> = sols.iter().map(|s| s.y.iter().chain(&s.u).chain(&s.p).copied().collect()).collect();
        let mono = SnapshotSet::new(&cols, w.clone(), SparseMatrix::from_dense(&xb)).unwrap();
        let m = pod_basis(&mono, 5, f, &PodOptions::default()).unwrap();
        let total: f64 = m.eigenvalues.iter().sum();
        for b in &bases {
            assert!(b.truncation_energy <= total);
        }
    }
}

#[test]
fn mismatched_partition_rejected() {
    let a = SnapshotSet::new(&[vec![1.0], vec![2.0]], vec![0.5, 0.5], SparseMatrix::identity(1)).unwrap();
    let b = SnapshotSet::new(&[vec![1.0]], vec![1.0], SparseMatrix::identity(1)).unwrap();
    assert!(matches!(
        pod_partitioned(&[a, b], &[1, 1], PodFormulation::Weighted, &PodOptions::default()),
        Err(PodError::InconsistentSets(2, 1))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn optimality_identity(seed in any::<u64>(), n in 6usize..16, m in 2usize..9, k in 1usize..8) {
        let k = k.min(m - 1).min(n - 1).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = spd_norm(n);
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
        let set = SnapshotSet::from_matrix(random_matrix(&mut rng, n, m), w, x.clone()).unwrap();
        for f in BOTH {
            let b = pod_basis(&set, k, f, &PodOptions::default()).unwrap();
            let err = set.projection_error(&b.vectors);
            let tail: f64 = b.eigenvalues[b.retained()..].iter().sum();
            let total: f64 = b.eigenvalues.iter().sum();
            prop_assert!((err - tail).abs() <= 1e-8 * tail.max(1e-6 * total), "{:?}: {} vs {}", f, err, tail);
            assert_x_orthonormal(&b.vectors, &x);
        }
    }
}
