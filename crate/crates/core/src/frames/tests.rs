use super::*;
use crate::model::pauli;
use proptest::prelude::*;

fn lower(b: [f64; 3]) -> CMat {
    let n = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    (linalg::identity(2) - pauli([b[0] / n, b[1] / n, b[2] / n])) * c(0.5, 0.0)
}

fn block_diag(a: &CMat, b: &CMat) -> CMat {
    let (n, m) = (a.nrows(), b.nrows());
    let mut out = CMat::zeros(n + m, n + m);
    out.view_mut((0, 0), (n, n)).copy_from(a);
    out.view_mut((n, n), (m, m)).copy_from(b);
    out
}

fn sphere(nlat: usize, nlon: usize) -> SurfaceMesh {
    SurfaceMesh::sphere([0.0; 3], 1.0, nlat, nlon).unwrap()
}

/// Charge +1 in the first block and −1 in the second: total charge zero, but
/// the rank-2 obstruction loop is not homotopic to a constant in a trivial
/// way.
fn dipole_field(mesh: &SurfaceMesh) -> Vec<CMat> {
    mesh.nodes.iter().map(|p| block_diag(&lower(*p), &lower([p[0], p[1], -p[2]]))).collect()
}

fn monopole_field(mesh: &SurfaceMesh) -> Vec<CMat> {
    mesh.nodes.iter().map(|p| lower(*p)).collect()
}

/// Largest frame jump over mesh edges.
fn max_edge_jump(mesh: &SurfaceMesh, frames: &[CMat]) -> f64 {
    let mut worst = 0.0f64;
    for q in &mesh.quads {
        for e in 0..4 {
            let (a, b) = (q[e], q[(e + 1) % 4]);
            if a != b {
                worst = worst.max(linalg::fro(&(&frames[a] - &frames[b])));
            }
        }
    }
    worst
}

fn opts() -> FrameOptions {
    FrameOptions { shells: 16, ..FrameOptions::default() }
}

#[test]
fn smoothstep_shape() {
    assert_eq!(smoothstep(-1.0), 0.0);
    assert_eq!(smoothstep(0.0), 0.0);
    assert_eq!(smoothstep(1.0), 1.0);
    assert!((smoothstep(0.5) - 0.5).abs() < 1e-15);
    // flat to all orders at the ends
    assert!(smoothstep(0.02) < 1e-20);
    assert_eq!(cutoff_h(0.25), 0.0);
    assert_eq!(cutoff_h(0.75), 1.0);
    assert!((cutoff_h(0.5) - 0.5).abs() < 1e-15);
}

#[test]
fn contraction_with_spectral_gap() {
    let l = 64;
    let vals: Vec<CMat> = (0..l)
        .map(|j| {
            let a = 0.4 * (2.0 * PI * j as f64 / l as f64).sin();
            CMat::from_diagonal(&CVec::from_vec(vec![C64::from_polar(1.0, a), C64::from_polar(1.0, 0.5 - a)]))
        })
        .collect();
    let lp = ObstructionLoop::new(LoopSamples::uniform(vals.clone())).unwrap();
    assert_eq!(lp.winding, 0);
    let h = contract_unitary_loop(&lp, 9, &opts()).unwrap();
    assert_eq!(h[0], vals);
    for u in &h[8] {
        assert_eq!(*u, linalg::identity(2));
    }
    for row in &h {
        for u in row {
            assert!(linalg::fro(&(u.adjoint() * u - linalg::identity(2))) < 1e-10);
        }
    }
}

#[test]
fn contraction_without_spectral_gap_uses_columns() {
    // Eigenphases ±2πω cover the whole circle, so no single branch cut works.
    let l = 96;
    let vals: Vec<CMat> = (0..l)
        .map(|j| {
            let a = 2.0 * PI * j as f64 / l as f64;
            CMat::from_diagonal(&CVec::from_vec(vec![C64::from_polar(1.0, a), C64::from_polar(1.0, -a)]))
        })
        .collect();
    assert!(common_gap(&vals).is_none());
    let lp = ObstructionLoop::new(LoopSamples::uniform(vals.clone())).unwrap();
    let h = contract_unitary_loop(&lp, 33, &opts()).unwrap();
    assert_eq!(h[0], vals);
    for row in &h {
        for u in row {
            assert!(linalg::fro(&(u.adjoint() * u - linalg::identity(2))) < 1e-9);
        }
    }
    assert!(h[32].iter().all(|u| *u == linalg::identity(2)));
}

#[test]
fn winding_loop_is_rejected() {
    let l = 32;
    let vals: Vec<CMat> = (0..l)
        .map(|j| CMat::from_element(1, 1, C64::from_polar(1.0, 2.0 * PI * j as f64 / l as f64)))
        .collect();
    let lp = ObstructionLoop::new(LoopSamples::uniform(vals)).unwrap();
    assert_eq!(lp.winding, 1);
    assert!(matches!(contract_unitary_loop(&lp, 5, &opts()), Err(Error::Precondition(_))));
}

#[test]
fn obstruction_winding_matches_chern() {
    let mesh = sphere(16, 32);
    let f = monopole_field(&mesh);
    let ch = geometry::chern_number_raw(&mesh, &f).unwrap().chern;
    let p: Vec<Projector> = f.iter().map(|m| Projector::from_matrix(m.clone())).collect();
    let lp = obstruction_loop(&mesh, &p).unwrap();
    assert_eq!(ch.abs(), 1);
    assert_eq!(lp.winding, ch);

    let flipped: Vec<Projector> = mesh.nodes.iter().map(|q| Projector::from_matrix(lower([q[0], q[1], -q[2]]))).collect();
    assert_eq!(obstruction_loop(&mesh, &flipped).unwrap().winding, -ch);
}

#[test]
fn charged_sphere_has_no_frame() {
    let mesh = sphere(8, 16);
    let p: Vec<Projector> = monopole_field(&mesh).into_iter().map(Projector::from_matrix).collect();
    assert!(matches!(frame_on_sphere(&mesh, &p, &opts()), Err(Error::TopologicalObstruction { chern: 1 | -1 })));
}

fn dipole_frames(nlat: usize) -> (SurfaceMesh, Vec<CMat>) {
    let mesh = sphere(nlat, 2 * nlat);
    let f = dipole_field(&mesh);
    let p: Vec<Projector> = f.iter().map(|m| Projector::from_matrix(m.clone())).collect();
    assert_eq!(obstruction_loop(&mesh, &p).unwrap().winding, 0);
    let frames: Vec<CMat> = frame_on_sphere(&mesh, &p, &opts()).unwrap().into_iter().map(Frame::into_inner).collect();
    for (fr, pm) in frames.iter().zip(&f) {
        assert!(linalg::fro(&(fr.adjoint() * fr - linalg::identity(2))) < 1e-9);
        assert!(linalg::fro(&(linalg::frame_projector(fr) - pm)) < 1e-9);
    }
    (mesh, frames)
}

#[test]
fn neutral_dipole_sphere_frame() {
    // The southern hemisphere carries a contraction of total length ~π per
    // column, so edge jumps scale like 1/nlat; a seam would not shrink.
    let (m1, f1) = dipole_frames(32);
    let (m2, f2) = dipole_frames(64);
    let (j1, j2) = (max_edge_jump(&m1, &f1), max_edge_jump(&m2, &f2));
    assert!(j2 < 0.8, "{j2}");
    assert!(j1 / j2 > 1.6, "{j1} {j2}");
}

#[test]
fn avoided_point_clears_floor() {
    let samples: Vec<CVec> = (0..50)
        .map(|j| {
            let a = 2.0 * PI * j as f64 / 50.0;
            CVec::from_vec(vec![c(a.cos(), 0.0), c(a.sin(), 0.0), c(0.0, 0.0)])
        })
        .collect();
    let a = find_avoided_point(&samples, &opts()).unwrap();
    assert!((a.point.norm() - 1.0).abs() < 1e-12);
    assert!(a.min_distance > 0.05);
    assert!((min_distance(&samples, &a.point) - a.min_distance).abs() < 1e-15);
}

#[test]
fn avoided_point_failure_and_precondition() {
    let line = vec![CVec::from_element(1, c(1.0, 0.0))];
    assert!(matches!(find_avoided_point(&line, &opts()), Err(Error::Precondition(_))));
    // As points of S³ ⊂ R⁴ these are ±e₁..±e₄, whose covering radius is 1.
    let dense: Vec<CVec> = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]
        .iter()
        .flat_map(|v| {
            let p = CVec::from_vec(vec![c(v[0], v[1]), c(v[2], v[3])]);
            [p.clone(), -p]
        })
        .collect();
    let o = FrameOptions { avoidance_floor: 1.5, avoidance_trials: 2000, ..opts() };
    match find_avoided_point(&dense, &o) {
        Err(Error::AvoidanceFailure { trials, best }) => {
            assert_eq!(trials, 2000);
            assert!(best <= 1.5);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn avoided_point_is_reproducible() {
    let samples: Vec<CVec> = (0..8).map(|j| CVec::from_vec(vec![C64::from_polar(1.0, j as f64), c(0.0, 0.0)])).collect();
    let o = FrameOptions { seed: 7, ..opts() };
    assert_eq!(find_avoided_point(&samples, &o).unwrap(), find_avoided_point(&samples, &o).unwrap());
}

#[test]
fn rank_one_extension() {
    let mesh = sphere(12, 24);
    let phi: Vec<CVec> = mesh
        .nodes
        .iter()
        .map(|p| {
            let v = CVec::from_vec(vec![c(1.0, 0.0), c(0.3 * p[0], 0.3 * p[1]), c(0.2 * p[2], 0.0)]);
            let n = v.norm();
            v / c(n, 0.0)
        })
        .collect();
    let (ball, avoided) = extend_rank1(&mesh, &phi, &opts()).unwrap();
    assert!(avoided.min_distance > 0.05);
    assert_eq!(ball.values[0], phi);
    let star = -avoided.point;
    for row in &ball.values {
        for v in row {
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
    }
    // constant inside r ≤ 1/4
    for (s, &r) in ball.radii.iter().enumerate() {
        if r <= 0.25 {
            assert!(ball.values[s].iter().all(|v| (v - &star).norm() < 1e-14));
        }
    }
    for s in 1..ball.shells() {
        for j in 0..mesh.nodes.len() {
            assert!((&ball.values[s][j] - &ball.values[s - 1][j]).norm() < 0.6);
        }
    }
}

fn check_ball(ball: &BallField<CMat>, bd: &[CMat], q: &BallField<CMat>, rank: usize) {
    assert_eq!(ball.values[0], bd);
    for (row, qrow) in ball.values.iter().zip(&q.values) {
        for (p, qm) in row.iter().zip(qrow) {
            assert!(linalg::fro(&(p * p - p)) < 1e-9);
            assert!(linalg::hermiticity_residual(p) < 1e-12);
            assert!((p.trace().re - rank as f64).abs() < 1e-9);
            assert!(linalg::fro(&(qm * p - p)) < 1e-9);
        }
    }
    for s in 1..ball.shells() {
        for j in 0..ball.mesh.nodes.len() {
            assert!(linalg::fro(&(&ball.values[s][j] - &ball.values[s - 1][j])) < 0.8);
        }
    }
}

#[test]
fn projector_extension_rank_two_dipole() {
    let mesh = sphere(64, 128);
    let f = dipole_field(&mesh);
    let p: Vec<Projector> = f.iter().map(|m| Projector::from_matrix(m.clone())).collect();
    let q = BallField::constant(&mesh, uniform_radii(32), linalg::identity(4));
    let ball = extend_projector(&mesh, &p, &q, &opts()).unwrap();
    check_ball(&ball, &f, &q, 2);
}

#[test]
fn projector_extension_inside_subspace() {
    // Q is a fixed rank-3 subspace of C⁴; the boundary field lives inside it.
    let mesh = sphere(12, 24);
    let u = linalg::expm_skew(&{
        let h = CMat::from_fn(4, 4, |i, j| c(((i * 3 + j * 5) % 7) as f64 / 7.0 - 0.4, ((i + 2 * j) % 5) as f64 / 5.0 - 0.3));
        (&h - h.adjoint()) * c(0.5, 0.0)
    });
    let embed = u.columns(0, 3).into_owned();
    let qm = &embed * embed.adjoint();
    let f: Vec<CMat> = mesh
        .nodes
        .iter()
        .map(|p| {
            let v = CMat::from_column_slice(3, 1, &[c(1.0, 0.0), c(0.4 * p[0], 0.4 * p[1]), c(0.0, 0.5 * p[2])]);
            let w = &embed * v;
            let n = w.norm();
            let w = w / c(n, 0.0);
            &w * w.adjoint()
        })
        .collect();
    let p: Vec<Projector> = f.iter().map(|m| Projector::from_matrix(m.clone())).collect();
    let q = BallField::constant(&mesh, uniform_radii(12), qm);
    let ball = extend_projector(&mesh, &p, &q, &opts()).unwrap();
    check_ball(&ball, &f, &q, 1);
}

#[test]
fn projector_extension_refuses_charge() {
    let mesh = sphere(8, 16);
    let f = monopole_field(&mesh);
    let p: Vec<Projector> = f.into_iter().map(Projector::from_matrix).collect();
    let q = BallField::constant(&mesh, uniform_radii(4), linalg::identity(2));
    assert!(matches!(extend_projector(&mesh, &p, &q, &opts()), Err(Error::TopologicalObstruction { .. })));
}

#[test]
fn ball_json_has_all_records() {
    let mesh = sphere(4, 8);
    let q = BallField::constant(&mesh, uniform_radii(2), linalg::identity(2));
    let v: serde_json::Value = serde_json::from_str(&q.to_json().unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 3 * mesh.nodes.len());
}

#[test]
fn smoothing_keeps_constant_fields_and_detects_overreach() {
    let pts: Vec<[f64; 3]> = (0..20).map(|i| [i as f64 / 20.0, 0.0, 0.0]).collect();
    let p0 = lower([0.0, 0.0, 1.0]);
    let flat = vec![p0.clone(); pts.len()];
    let out = smooth_projectors(&pts, &flat, 1, 0.2).unwrap();
    assert!(out.iter().all(|p| linalg::fro(&(p - &p0)) < 1e-12));

    // A field that flips halfway cannot be averaged over a wide window.
    let flip: Vec<CMat> = pts.iter().map(|p| if p[0] < 0.5 { lower([0.0, 0.0, 1.0]) } else { lower([0.0, 0.0, -1.0]) }).collect();
    assert!(matches!(smooth_projectors(&pts, &flip, 1, 2.0), Err(Error::DeltaTooLarge { .. })));

    let frames: Vec<CMat> = pts.iter().map(|_| CMat::from_column_slice(2, 1, &[c(0.0, 0.0), c(1.0, 0.0)])).collect();
    let sm = smooth_frames(&pts, &frames, &flat, 0.2).unwrap();
    assert!(sm.iter().zip(&frames).all(|(a, b)| linalg::fro(&(a - b)) < 1e-12));
}

// Time-reversal symmetric pieces. With θ = K the pairing is α ↔ α + π.

fn circle_vec(a: f64, real_pair: bool) -> CVec {
    let v = if real_pair {
        CVec::from_vec(vec![c(1.0, 0.0), c(0.0, a.sin())])
    } else {
        CVec::from_vec(vec![c(0.0, a.cos()), c(0.0, a.sin())])
    };
    let n = v.norm();
    v / c(n, 0.0)
}

#[test]
fn theta_real_frame_is_invariant() {
    let trs = Trs::conjugation(3);
    let v = CMat::from_column_slice(3, 1, &[c(0.0, 1.0), c(0.0, 0.0), c(0.0, 0.0)]);
    let p = &v * v.adjoint() + CMat::from_fn(3, 3, |i, j| c(if i == 1 && j == 1 { 1.0 } else { 0.0 }, 0.0));
    let f = theta_real_frame(&p, &trs).unwrap();
    assert!(linalg::fro(&(trs.apply(&f) - &f)) < 1e-12);
    assert!(linalg::fro(&(linalg::frame_projector(&f) - p)) < 1e-12);
}

#[test]
fn circle_frame_is_symmetric_and_continuous() {
    let trs = trs4_theta();
    let l = 64;
    // Lower Kramers pair of a θ-symmetric 4×4 field on a small circle.
    let proj: Vec<Projector> = (0..l)
        .map(|j| {
            let a = 2.0 * PI * j as f64 / l as f64;
            let k = crate::model::KPoint::new(0.1 * a.cos(), 0.1 * a.sin(), 0.0);
            crate::model::projector_at(&crate::model::ModelSpec::by_name("trs4").unwrap(), &k, 2).unwrap()
        })
        .collect();
    let frames: Vec<CMat> = trs_frame_on_circle(&proj, &trs).unwrap().into_iter().map(Frame::into_inner).collect();
    for j in 0..l {
        assert!(linalg::fro(&(linalg::frame_projector(&frames[j]) - &proj[j].matrix)) < 1e-9);
        assert!(linalg::fro(&(&frames[(j + l / 2) % l] - trs.apply(&frames[j]))) < 1e-12);
        assert!(linalg::fro(&(&frames[(j + 1) % l] - &frames[j])) < 0.3);
    }
}

fn trs4_theta() -> Trs {
    crate::model::ModelSpec::by_name("trs4").unwrap().trs.unwrap()
}

fn check_disk(disk: &DiskMesh, vals: &[CVec], phi: &[CVec]) {
    for (j, &n) in disk.boundary().iter().enumerate() {
        assert_eq!(vals[n], phi[j]);
    }
    for n in 0..disk.len() {
        assert!((vals[n].norm() - 1.0).abs() < 1e-12);
        assert!((&vals[disk.pair(n)] - vals[n].map(|z| z.conj())).norm() < 1e-15);
    }
    let mut worst = 0.0f64;
    for i in 1..=disk.rings {
        for j in 0..disk.angles {
            let a = disk.node(i, j);
            worst = worst.max((&vals[a] - &vals[disk.node(i, j + 1)]).norm());
            worst = worst.max((&vals[a] - &vals[disk.node(i - 1, j)]).norm());
        }
    }
    assert!(worst < 0.7, "largest jump {worst}");
}

#[test]
fn disk_vector_without_real_point() {
    let disk = DiskMesh::new(16, 32).unwrap();
    let phi: Vec<CVec> = (0..32).map(|j| circle_vec(2.0 * PI * j as f64 / 32.0, false)).collect();
    let out = trs_extend_vector_on_disk(&disk, &phi, &opts(), 0.15, 0.1).unwrap();
    assert_eq!(out.branch, DiskBranch::NoRealPoint);
    check_disk(&disk, &out.values, &phi);
}

#[test]
fn disk_vector_with_real_point() {
    let disk = DiskMesh::new(16, 32).unwrap();
    let phi: Vec<CVec> = (0..32).map(|j| circle_vec(2.0 * PI * j as f64 / 32.0, true)).collect();
    let out = trs_extend_vector_on_disk(&disk, &phi, &opts(), 0.15, 0.1).unwrap();
    assert!(matches!(out.branch, DiskBranch::RealPoint { .. }));
    check_disk(&disk, &out.values, &phi);
}

#[test]
fn disk_projector_extension() {
    let disk = DiskMesh::new(12, 32).unwrap();
    let trs = Trs::conjugation(3);
    let circle: Vec<Projector> = (0..32)
        .map(|j| {
            let v = circle_vec(2.0 * PI * j as f64 / 32.0, true);
            let v3 = CVec::from_vec(vec![v[0], v[1], c(0.0, 0.0)]);
            Projector::from_frame(&CMat::from_column_slice(3, 1, v3.as_slice()))
        })
        .collect();
    let q = vec![Projector::identity(3); disk.len()];
    let out = trs_extend_on_disk(&disk, &circle, &q, &trs, &opts()).unwrap();
    for n in 0..disk.len() {
        let p = &out.projectors[n];
        assert!(linalg::fro(&(p * p - p)) < 1e-9);
        assert!((p.trace().re - 1.0).abs() < 1e-9);
        assert!(linalg::fro(&(&out.projectors[disk.pair(n)] - trs.conjugate_operator(p))) < 1e-12);
    }
    for (j, &n) in disk.boundary().iter().enumerate() {
        assert_eq!(out.projectors[n], circle[j].matrix);
    }
}

#[test]
fn disk_rejects_asymmetric_boundary() {
    let disk = DiskMesh::new(4, 8).unwrap();
    let phi: Vec<CVec> = (0..8).map(|j| CVec::from_vec(vec![C64::from_polar(1.0, j as f64), c(0.0, 0.0)])).collect();
    assert!(matches!(trs_extend_vector_on_disk(&disk, &phi, &opts(), 0.15, 0.3), Err(Error::Symmetry { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn smoothstep_is_monotone_and_balanced(x in -0.5f64..1.5, y in -0.5f64..1.5) {
        prop_assert!((smoothstep(x) + smoothstep(1.0 - x) - 1.0).abs() < 1e-14);
        if x <= y {
            prop_assert!(smoothstep(x) <= smoothstep(y));
        }
    }

    #[test]
    fn gapped_family_contracts_unitarily(a in 0.0f64..1.0, b in -1.0f64..1.0, ph in 0.0f64..6.0) {
        let l = 24;
        let vals: Vec<CMat> = (0..l).map(|j| {
            let t = 2.0 * PI * j as f64 / l as f64;
            let rot = linalg::expm_skew(&CMat::from_row_slice(2, 2, &[c(0.0, a * t.cos()), c(b, 0.0), c(-b, 0.0), c(0.0, -a * t.sin())]));
            rot * C64::from_polar(1.0, 0.1 * ph)
        }).collect();
        let lp = ObstructionLoop::new(LoopSamples::uniform(vals)).unwrap();
        prop_assume!(lp.winding == 0);
        let h = contract_unitary_loop(&lp, 17, &opts()).unwrap();
        for row in &h {
            for u in row {
                prop_assert!(linalg::fro(&(u.adjoint() * u - linalg::identity(2))) < 1e-9);
            }
        }
    }

    #[test]
    fn avoided_point_beats_floor(seed in 0u64..1000, n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples: Vec<CVec> = (0..n).map(|_| random_unit(&mut rng, 3, false)).collect();
        let a = find_avoided_point(&samples, &FrameOptions { seed, ..opts() }).unwrap();
        prop_assert!(min_distance(&samples, &a.point) > 0.05);
    }
}

#[test]
fn pointwise_line_frame_is_smooth_and_frames_the_field() {
    // Line bundle of the lower band of B·σ with B = (sinθ cosϕ, sinθ sinϕ, cos 2θ):
    // the map from the sphere to directions has degree zero.
    let field = |th: f64, ph: f64| -> Result<CMat> { Ok(lower([th.sin() * ph.cos(), th.sin() * ph.sin(), (2.0 * th).cos()])) };
    let fr = SphereLineFrame::new(&field, 64, 128).unwrap();
    let mut worst_ratio = 0.0f64;
    for i in 0..40 {
        for j in 0..40 {
            let th = PI * (i as f64 + 0.5) / 40.0;
            let ph = 2.0 * PI * j as f64 / 40.0;
            let v = fr.eval(&field, th, ph).unwrap();
            let p = field(th, ph).unwrap();
            assert!((&p * &v - &v).norm() < 1e-12);
            // second differences along θ stay O(h²): no kinks at the seams
            let h = 1e-3;
            let a = fr.eval(&field, th - h, ph).unwrap();
            let b = fr.eval(&field, th + h, ph).unwrap();
            let d2 = (&a + &b - &v * c(2.0, 0.0)).norm() / (h * h);
            worst_ratio = worst_ratio.max(d2);
        }
    }
    assert!(worst_ratio < 50.0, "{worst_ratio}");
    // single-valued at the poles
    let s0 = fr.eval(&field, PI, 0.0).unwrap();
    let s1 = fr.eval(&field, PI, 2.0).unwrap();
    assert!((s0 - s1).norm() < 1e-12);
}

#[test]
fn pointwise_line_frame_detects_charge() {
    let field = |th: f64, ph: f64| -> Result<CMat> { Ok(lower([th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()])) };
    assert!(matches!(SphereLineFrame::new(&field, 64, 128), Err(Error::TopologicalObstruction { chern: 1 | -1 })));
}
