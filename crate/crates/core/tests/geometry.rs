use std::f64::consts::PI;

use nalgebra::DVector;
use proptest::prelude::*;
use riemctl::manifold::{
    exp_map, geodesic, log_map, transport_vectors, Derivation, Direction, ManifoldChart,
};
use riemctl::numeric::loglog_slope;

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// Transports `w` along the geodesic `exp_x(s v)`, s ∈ [0,1]; returns endpoint
/// and transported vectors.
fn leg(chart: &ManifoldChart, x: &DVector<f64>, v: &DVector<f64>, ws: &[DVector<f64>]) -> (DVector<f64>, Vec<DVector<f64>>) {
    let p = geodesic(chart, x, v, 1.0, 1e-3).unwrap();
    let smp = p.samples();
    let out = ws
        .iter()
        .map(|w| transport_vectors(chart, &smp, w, Direction::Forward).pop().unwrap())
        .collect();
    (p.end().clone(), out)
}

/// Signed rotation angle after transport around a geodesic square of side h.
fn holonomy_angle(chart: &ManifoldChart, x0: &DVector<f64>, h: f64) -> f64 {
    let e = chart.orthonormal_frame(x0.as_slice());
    let e1 = e.column(0).into_owned();
    let e2 = e.column(1).into_owned();
    let (x1, t) = leg(chart, x0, &(&e1 * h), &[e1.clone(), e2.clone()]);
    let (x2, t) = leg(chart, &x1, &(&t[1] * h), &[t[0].clone(), t[1].clone()]);
    let (x3, t) = leg(chart, &x2, &(&t[0] * -h), &[t[0].clone()]);
    let back = log_map(chart, &x3, x0).unwrap();
    let (xe, t) = leg(chart, &x3, &back, &[t[0].clone()]);
    assert!((xe - x0).amax() < 1e-9);
    let w = &t[0];
    let g = chart.metric(x0.as_slice());
    let a = (&g * w).dot(&e1);
    let b = (&g * w).dot(&e2);
    b.atan2(a)
}

#[test]
fn holonomy_recovers_sectional_curvature() {
    let hs = [0.2, 0.1, 0.05, 0.025];
    for (chart, x0, k) in [
        (ManifoldChart::sphere(), dv(&[1.0, 0.3]), 1.0),
        (ManifoldChart::hyperbolic(1.0), dv(&[0.0, 0.0]), -1.0),
        (ManifoldChart::hyperbolic(1.0), dv(&[0.4, -0.3]), -1.0),
        (ManifoldChart::hyperbolic(2.0), dv(&[0.3, 0.2]), -0.25),
    ] {
        let angles: Vec<f64> = hs.iter().map(|h| holonomy_angle(&chart, &x0, *h)).collect();
        let est = angles[3] / (hs[3] * hs[3]);
        assert!((est - k).abs() < 0.03 * k.abs(), "{:?}: estimate {est}, expected {k}", chart.geometry());
        let slope = loglog_slope(&hs, &angles.iter().map(|a| a.abs()).collect::<Vec<_>>());
        assert!((slope - 2.0).abs() <= 0.15, "slope {slope}");
        // The closed-form curvature operator agrees.
        let e = chart.orthonormal_frame(x0.as_slice());
        let sec = chart
            .sectional_curvature(x0.as_slice(), &e.column(0).into_owned(), &e.column(1).into_owned())
            .unwrap();
        assert!((sec - k).abs() < 1e-12);
    }
}

#[test]
fn holonomy_with_fd_derived_connection_matches_minus_one_over_r_squared() {
    let chart = ManifoldChart::hyperbolic(2.0).with_derivation(Derivation::FiniteDifference { step: 1e-3 });
    let h = 0.05;
    let est = holonomy_angle(&chart, &dv(&[0.2, 0.1]), h) / (h * h);
    assert!((est + 0.25).abs() < 0.01, "estimate {est}");
}

/// Vertices of the octant triangle (x, y and z axis points) rotated so that
/// its centre sits on the equator, away from the chart's poles.
fn octant_in_rotated_chart() -> [DVector<f64>; 3] {
    let ax = nalgebra::Vector3::new(0.0, 1.0, -1.0).normalize();
    let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(ax), 0.9553166181245093);
    let verts = [
        nalgebra::Vector3::new(1.0, 0.0, 0.0),
        nalgebra::Vector3::new(0.0, 1.0, 0.0),
        nalgebra::Vector3::new(0.0, 0.0, 1.0),
    ];
    verts.map(|p| {
        let q: nalgebra::Vector3<f64> = rot * p;
        dv(&[q.z.acos(), q.y.atan2(q.x)])
    })
}

#[test]
fn transport_around_octant_triangle_rotates_by_quarter_turn() {
    let s = ManifoldChart::sphere();
    let v = octant_in_rotated_chart();
    let e = s.orthonormal_frame(v[0].as_slice());
    let w0 = e.column(0).into_owned();
    let mut w = w0.clone();
    for i in 0..3 {
        let (a, b) = (&v[i], &v[(i + 1) % 3]);
        let l = log_map(&s, a, b).unwrap();
        assert!((s.norm(a.as_slice(), &l) - PI / 2.0).abs() < 1e-9);
        let (end, t) = leg(&s, a, &l, &[w.clone()]);
        assert!((end - b).amax() < 1e-9);
        w = t[0].clone();
    }
    let g = s.metric(v[0].as_slice());
    let cos = (&g * &w).dot(&w0);
    assert!(cos.abs() < 1e-8, "cos {cos}");
    assert!(((&g * &w).dot(&w) - 1.0).abs() < 1e-10);
}

fn sample_point(chart: &ManifoldChart, a: f64, b: f64) -> DVector<f64> {
    match chart.constant_curvature() {
        Some(k) if k > 0.0 => dv(&[PI / 2.0 + 0.9 * a, 2.0 * b]),
        Some(k) if k < 0.0 => dv(&[1.5 * a, 1.5 * b]),
        _ => dv(&[3.0 * a, 3.0 * b]),
    }
}

/// On the sphere, whether the great circle through x with velocity v stays at
/// least 0.4 rad from both poles (Clairaut's relation). Always true elsewhere.
fn stays_regular(chart: &ManifoldChart, x: &DVector<f64>, v: &DVector<f64>) -> bool {
    if chart.constant_curvature() != Some(1.0) || v.amax() == 0.0 {
        return true;
    }
    let speed = chart.norm(x.as_slice(), v);
    let s = x[0].sin();
    s * s * v[1].abs() / speed >= 0.4f64.sin()
}

fn charts() -> Vec<ManifoldChart> {
    vec![ManifoldChart::euclidean(2), ManifoldChart::sphere(), ManifoldChart::hyperbolic(1.0)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn exp_log_roundtrip(which in 0usize..3, a in -1.0..1.0f64, b in -1.0..1.0f64, r in 0.0..0.8f64, ang in 0.0..(2.0 * PI)) {
        let chart = &charts()[which];
        let x = sample_point(chart, a, b);
        let e = chart.orthonormal_frame(x.as_slice());
        let len = r * chart.injectivity_hint().unwrap_or(2.0);
        let v = (e.column(0) * ang.cos() + e.column(1) * ang.sin()) * len;
        prop_assume!(stays_regular(chart, &x, &v));
        let y = exp_map(chart, &x, &v).unwrap();
        let w = log_map(chart, &x, &y).unwrap();
        let y2 = exp_map(chart, &x, &w).unwrap();
        prop_assert!((&y2 - &y).amax() <= 1e-8);
        prop_assert!((chart.norm(x.as_slice(), &w) - len).abs() <= 1e-6);
    }

    #[test]
    fn transport_preserves_inner_products(which in 0usize..3, a in -1.0..1.0f64, b in -1.0..1.0f64,
        v in prop::array::uniform2(-1.5..1.5f64), p in prop::array::uniform2(-1.0..1.0f64), q in prop::array::uniform2(-1.0..1.0f64)) {
        let chart = &charts()[which];
        let x = sample_point(chart, a * 0.5, b * 0.5);
        prop_assume!(stays_regular(chart, &x, &dv(&v)));
        let path = geodesic(chart, &x, &dv(&v), 1.0, 1e-3).unwrap();
        let smp = path.samples();
        let (p, q) = (dv(&p), dv(&q));
        let lp = transport_vectors(chart, &smp, &p, Direction::Forward).pop().unwrap();
        let lq = transport_vectors(chart, &smp, &q, Direction::Forward).pop().unwrap();
        let before = chart.inner(x.as_slice(), &p, &q);
        let after = chart.inner(path.end().as_slice(), &lp, &lq);
        let scale = chart.norm(x.as_slice(), &p) * chart.norm(x.as_slice(), &q);
        prop_assert!((after - before).abs() <= 1e-8 * scale.max(1e-12));
    }

    #[test]
    fn geodesic_speed_is_conserved(which in 0usize..3, a in -1.0..1.0f64, b in -1.0..1.0f64, ang in 0.0..(2.0 * PI)) {
        let chart = &charts()[which];
        let x = sample_point(chart, a * 0.3, b * 0.3);
        let e = chart.orthonormal_frame(x.as_slice());
        let v = e.column(0) * ang.cos() + e.column(1) * ang.sin();
        prop_assume!(stays_regular(chart, &x, &v.clone_owned()));
        let smax = if chart.constant_curvature() == Some(-1.0) { 2.0 } else { 5.0 };
        if let Ok(path) = geodesic(chart, &x, &v, smax, 1e-3) {
            prop_assert!(path.speed_drift(chart) <= 1e-8);
        }
    }

    #[test]
    fn raise_lower_roundtrip(which in 0usize..3, a in -1.0..1.0f64, b in -1.0..1.0f64, v in prop::array::uniform2(-3.0..3.0f64)) {
        let chart = &charts()[which];
        let x = sample_point(chart, a, b);
        let v = dv(&v);
        let back = chart.raise(x.as_slice(), &chart.lower(x.as_slice(), &v));
        prop_assert!((back - &v).amax() <= 1e-12 * (1.0 + v.amax()));
    }

    #[test]
    fn curvature_symmetries(which in 1usize..3, a in -1.0..1.0f64, b in -1.0..1.0f64) {
        let chart = &charts()[which];
        let x = sample_point(chart, a, b);
        let g = chart.metric(x.as_slice());
        prop_assert!(chart.curvature(x.as_slice()).symmetry_defect(&g) <= 1e-12);
        let fd = chart.clone().with_derivation(Derivation::FiniteDifference { step: 1e-3 });
        prop_assert!(fd.curvature(x.as_slice()).symmetry_defect(&g) <= 1e-3);
        prop_assert!(fd.compatibility_defect(x.as_slice()) <= 1e-8);
    }
}
