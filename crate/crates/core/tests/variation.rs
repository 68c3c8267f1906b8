use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DVector;
use riemctl::along::BaseGeometry;
use riemctl::dynamics::builtin::{FrameFieldEnergy, RotationDecay, SphereDrift};
use riemctl::dynamics::{Control, ControlProblem, ControlSet};
use riemctl::manifold::ManifoldChart;
use riemctl::variation::{first_variation_chart, solve_first_variation_needle, verify_classical_expansion, verify_needle_taylor};

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

const NEEDLE_EPS: [f64; 4] = [0.2, 0.1, 0.05, 0.025];
const CLASSICAL_EPS: [f64; 4] = [0.1, 0.05, 0.025, 0.0125];

fn rotation_problem(set: ControlSet) -> ControlProblem {
    ControlProblem::new(ManifoldChart::hyperbolic(1.0), Arc::new(RotationDecay::new(1.0)), set, dv(&[0.5, 0.0]), 1.0).unwrap()
}

fn sphere_drift(set: ControlSet) -> ControlProblem {
    ControlProblem::new(ManifoldChart::sphere(), Arc::new(SphereDrift), set, dv(&[1.2, 0.3]), 1.0).unwrap()
}

#[test]
fn needle_orders_on_hyperbolic_rotation() {
    let p = rotation_problem(ControlSet::finite(&[1.0, 2.0, 3.0, 4.0]));
    let ubar = Control::constant(1.0, dv(&[1.0]));
    let rep = verify_needle_taylor(&p, &ubar, &Control::constant(1.0, dv(&[3.0])), 0.3, &NEEDLE_EPS, 1e-3).unwrap();
    println!("{rep:#?}");
    assert!((rep.row("X").slope - 1.0).abs() < 0.1);
    assert!((rep.row("Y").slope - 2.0).abs() < 0.2);
    assert!(rep.row("V-X").slope >= 1.5);
    assert!(rep.row("V-X-Y").slope >= 2.2);
}

#[test]
fn needle_orders_on_sphere_drift() {
    let p = sphere_drift(ControlSet::finite(&[-1.0, 0.0, 1.0]));
    let ubar = Control::constant(1.0, dv(&[0.0]));
    let rep = verify_needle_taylor(&p, &ubar, &Control::constant(1.0, dv(&[1.0])), 0.2, &NEEDLE_EPS, 1e-3).unwrap();
    println!("{rep:#?}");
    assert!(rep.row("V-X").slope >= 1.5);
    assert!(rep.row("V-X-Y").slope >= 2.2);
}

fn sphere_geodesic_energy() -> (ControlProblem, Control) {
    let s = ManifoldChart::sphere();
    let p = ControlProblem::new(
        s.clone(),
        Arc::new(FrameFieldEnergy { chart: s }),
        ControlSet::open_box(&[-5.0, -5.0], &[5.0, 5.0]),
        dv(&[PI / 2.0, 0.0]),
        1.0,
    )
    .unwrap();
    (p, Control::constant(1.0, dv(&[0.0, PI / 2.0])))
}

#[test]
fn classical_orders_on_sphere_geodesic_energy() {
    let (p, ubar) = sphere_geodesic_energy();
    let v = Control::smooth("probe", 1.0, |t| dv(&[(PI * t).sin() + 0.3, 0.5 * (2.0 * PI * t).cos()]));
    let rep = verify_classical_expansion(&p, &ubar, &v, &CLASSICAL_EPS, 1e-3).unwrap();
    println!("{rep:#?}");
    assert!((rep.row("Ve-eV").slope - 2.0).abs() <= 0.2);
    assert!(rep.row("Ve-eV-e2Y").slope >= 2.5);
    assert_eq!(rep.box_violations, 0);
}

#[test]
fn classical_orders_on_hyperbolic_rotation() {
    let p = rotation_problem(ControlSet::open_box(&[0.5], &[4.5]));
    let ubar = Control::smooth("base", 1.0, |t| dv(&[2.0 + 0.5 * (3.0 * t).sin()]));
    let v = Control::smooth("probe", 1.0, |t| dv(&[(2.0 * t).cos()]));
    let rep = verify_classical_expansion(&p, &ubar, &v, &CLASSICAL_EPS, 1e-3).unwrap();
    println!("{rep:#?}");
    assert!((rep.row("Ve-eV").slope - 2.0).abs() <= 0.2);
    assert!(rep.row("Ve-eV-e2Y").slope >= 2.5);
}

#[test]
fn frame_and_chart_first_variations_agree() {
    let p = sphere_drift(ControlSet::finite(&[-1.0, 0.0, 1.0]));
    let ubar = Control::constant(1.0, dv(&[0.0]));
    let u = ubar.splice(0.1, 0.4, Control::constant(1.0, dv(&[1.0])));
    let base = BaseGeometry::build(&p, &ubar, 1e-3, &u.breakpoints()).unwrap();
    let x = solve_first_variation_needle(&p, &base, &u).unwrap();
    let xc = first_variation_chart(&p, &base, &u).unwrap();
    let worst = x.vectors.iter().zip(&xc).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
    assert!(worst < 1e-8, "{worst}");
}
