use std::sync::OnceLock;

use super::*;
use crate::model::Builtin;

fn weyl4() -> ModelSpec {
    ModelSpec::by_name("weyl4").unwrap()
}

fn weyl4_run() -> &'static (DisentangledField, Vec<WeylCharge>) {
    static RUN: OnceLock<(DisentangledField, Vec<WeylCharge>)> = OnceLock::new();
    RUN.get_or_init(|| disentangle(&weyl4(), 2, &GlueConfig::default(), [16, 16, 16]).unwrap())
}

fn weyl2_inner() -> CrossingSet {
    CrossingSet::from_points(1, &[KPoint::new(0.0, 0.0, 0.25), KPoint::new(0.0, 0.0, 0.75)])
}

#[test]
fn weyl2_region_encloses_axis_segment() {
    let r = build_region(&weyl2_inner(), &CrossingSet::empty(0), None, 0.05).unwrap();
    for x in &r.certificates.inside {
        assert!(r.gauge(&x.k) < 1.0);
        assert!(x.distance > r.margin);
    }
    assert_eq!(r.certificates.lower, f64::INFINITY);
    // The segment between the two points is inside as well.
    for t in 0..=10 {
        let k = KPoint::new(0.0, 0.0, 0.25 + 0.05 * t as f64);
        let k2 = KPoint::new(0.0, 0.0, 0.25 - 0.05 * t as f64);
        assert!(r.gauge(&k) < 1.0 || r.gauge(&k2) < 1.0);
    }
}

#[test]
fn empty_inner_set_is_a_precondition_error() {
    let err = build_region(&CrossingSet::empty(1), &CrossingSet::empty(0), None, 0.05).unwrap_err();
    assert!(matches!(err, Error::Precondition(_)), "{err:?}");
}

#[test]
fn blocking_lower_crossing_fails_region_search() {
    let inner = CrossingSet::from_points(2, &[KPoint::new(0.5, 0.5, 0.5)]);
    let lower = CrossingSet::from_points(1, &[KPoint::new(0.5, 0.5, 0.52)]);
    let err = build_region(&inner, &lower, None, 0.01).unwrap_err();
    assert!(matches!(err, Error::RegionConstruction(_)), "{err:?}");
}

#[test]
fn assumption2_certifies_upper_set() {
    let inner = CrossingSet::from_points(2, &[KPoint::new(0.5, 0.5, 0.5)]);
    let upper = CrossingSet::from_points(3, &[KPoint::new(0.0, 0.0, 0.0)]);
    let r = build_region(&inner, &CrossingSet::empty(1), Some(&upper), 0.02).unwrap();
    let d = r.certificates.upper.unwrap();
    assert!(d > 2.0 * r.margin && d.is_finite());
}

#[test]
fn weyl2_boundary_field_has_trace_one_and_zero_chern() {
    let m = ModelSpec::by_name("weyl2").unwrap();
    let r = build_region(&weyl2_inner(), &CrossingSet::empty(0), None, 0.05).unwrap();
    let p = boundary_quasiprojector(&m, 0, &r).unwrap();
    for q in &p {
        assert!((q.trace().re - 1.0).abs() < 1e-9);
        assert!(linalg::fro(&(q * q - q)) < 1e-9);
    }
    let ch = geometry::chern_number_raw(&r.mesh().unwrap(), &p).unwrap();
    assert_eq!(ch.chern, 0);
    assert!(ch.residual < 0.02);
}

#[test]
fn two_band_quasiprojector_is_complement_of_lower_band() {
    let m = ModelSpec::by_name("weyl2").unwrap();
    let r = build_region(&weyl2_inner(), &CrossingSet::empty(0), None, 0.05).unwrap();
    let p = boundary_quasiprojector(&m, 1, &r).unwrap();
    for (q, k) in p.iter().zip(r.mesh().unwrap().kpoints()) {
        let p1 = model::projector_at(&m, &k, 1).unwrap().matrix;
        assert!(linalg::fro(&(q - (linalg::identity(2) - p1))) < 1e-12);
    }
}

#[test]
fn weyl2_charges_cancel() {
    let m = ModelSpec::by_name("weyl2").unwrap();
    let ch = charge_report(&m, 0, &weyl2_inner(), 0.1).unwrap();
    let mut q: Vec<i64> = ch.iter().map(|c| c.charge).collect();
    q.sort();
    assert_eq!(q, vec![-1, 1]);
    assert!(ch.iter().all(|c| c.residual < 0.01));
}

#[test]
fn local_model_charge_is_jacobian_sign() {
    let k0 = [0.4, 0.1, 0.7];
    for (jac, sign) in [([[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 1), ([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.5]], -1)] {
        let m = ModelSpec::builtin(Builtin::LocalWeyl { k0, jacobian: jac });
        let set = CrossingSet::from_points(1, &[KPoint::new(k0[0], k0[1], k0[2])]);
        let ch = charge_report(&m, 0, &set, 0.1).unwrap();
        assert_eq!(ch[0].charge, sign);
    }
}

#[test]
fn gapped_model_reports_no_charges() {
    let m = ModelSpec::by_name("insulator2").unwrap();
    let set = model::detect_crossings(&m, 1, [8, 8, 8], 0.3).unwrap();
    assert!(charge_report(&m, 0, &set, 0.1).unwrap().is_empty());
}

#[test]
fn overlapping_charge_spheres_rejected() {
    let m = ModelSpec::by_name("weyl2").unwrap();
    let set = CrossingSet::from_points(1, &[KPoint::new(0.0, 0.0, 0.25), KPoint::new(0.0, 0.0, 0.3)]);
    assert!(matches!(charge_report(&m, 0, &set, 0.1), Err(Error::Precondition(_))));
}

#[test]
fn weyl2_top_band_gives_identity() {
    let m = ModelSpec::by_name("weyl2").unwrap();
    let glue = GlueConfig { grid: [8, 8, 8], ..GlueConfig::default() };
    let (field, charges) = disentangle(&m, 1, &glue, [16, 16, 16]).unwrap();
    assert!(charges.is_empty());
    for p in &field.projectors {
        assert!(linalg::fro(&(p - linalg::identity(2))) < 1e-12);
    }
}

#[test]
fn weyl2_lowest_band_extension() {
    let m = ModelSpec::by_name("weyl2").unwrap();
    let glue = GlueConfig { grid: [8, 8, 8], ..GlueConfig::default() };
    let (field, charges) = disentangle(&m, 0, &glue, [16, 16, 16]).unwrap();
    assert_eq!(charges.iter().map(|c| c.charge).sum::<i64>(), 0);
    let rep = verify_field(&field, &m, 0).unwrap();
    assert!(rep.projector_ok(), "{rep:?}");
    assert!(field.chern.as_ref().unwrap().all_zero());
}

#[test]
fn weyl4_span_and_projector_checks() {
    let (field, charges) = weyl4_run();
    let mut q: Vec<i64> = charges.iter().map(|c| c.charge).collect();
    q.sort();
    assert_eq!(q, vec![-1, 1]);
    let rep = verify_field(field, &weyl4(), 2).unwrap();
    assert!(rep.span_residual < 1e-7, "{}", rep.span_residual);
    assert!(rep.projector_ok());
    assert!(rep.max_increment < 5.0 * rep.model_increment);
    let chain = field.chern.as_ref().unwrap();
    assert!(chain.all_zero() && chain.max_residual() < 0.02);
}

#[test]
fn weyl4_outside_nodes_are_exact_spectral_projectors() {
    let (field, _) = weyl4_run();
    let m = weyl4();
    let pts = field.kpoints();
    let mut checked = 0;
    for (i, tag) in field.tags.iter().enumerate() {
        if *tag == NodeTag::Outside {
            let s = model::spectrum_at(&m, &pts[i]).unwrap();
            let p = model::spectral_projector(&s, 3, GAP_FLOOR, &pts[i]).unwrap().matrix;
            assert_eq!(p, field.projectors[i]);
            checked += 1;
        }
    }
    assert!(checked > 0 && field.tags.contains(&NodeTag::Extended) && field.tags.contains(&NodeTag::Glued));
}

#[test]
fn weyl4_assumption2_stays_below_band_four() {
    let glue = GlueConfig { assumption2: true, grid: [8, 8, 8], ..GlueConfig::default() };
    let m = weyl4();
    let (field, _) = disentangle(&m, 2, &glue, [16, 16, 16]).unwrap();
    let rep = verify_field(&field, &m, 2).unwrap();
    assert!(rep.upper_residual.unwrap() < 1e-7);
    assert!(rep.span_residual < 1e-7);
}

#[test]
fn gapped_spectral_projector_verifies_cleanly() {
    let m = ModelSpec::by_name("insulator2").unwrap();
    let glue = GlueConfig { grid: [12, 12, 12], ..GlueConfig::default() };
    let (field, _) = disentangle(&m, 0, &glue, [8, 8, 8]).unwrap();
    let rep = verify_field(&field, &m, 0).unwrap();
    assert!(rep.projector_ok());
    let d = rep.decay.unwrap();
    assert!(d.fit.r2 > 0.99 && d.fit.slope < -1.0, "{:?}", d.fit);
}

#[test]
fn epsilon_outside_range_rejected() {
    let m = weyl4();
    let region = Region::new([0.5, 0.5, 0.0], [0.3, 0.3, 0.45], 0.05).unwrap();
    let glue = GlueConfig { epsilon: 0.2, grid: [4, 4, 4], ..GlueConfig::default() };
    assert!(matches!(build_global_projector(&m, 2, &region, &glue), Err(Error::Precondition(_))));
}

#[test]
fn field_json_roundtrip() {
    let m = ModelSpec::by_name("weyl2").unwrap();
    let glue = GlueConfig { grid: [4, 4, 4], ..GlueConfig::default() };
    let (field, _) = disentangle(&m, 0, &glue, [16, 16, 16]).unwrap();
    let back = DisentangledField::from_json(&field.to_json().unwrap()).unwrap();
    assert_eq!(back, field);
}
