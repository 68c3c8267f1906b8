use std::sync::Arc;

use nalgebra::DVector;
use riemctl::adjoint::{solve_second_adjoint, DualPair};
use riemctl::along::BaseGeometry;
use riemctl::conditions::{cost_expansion, second_order_term, second_order_term_chart};
use riemctl::dynamics::builtin::SphereDrift;
use riemctl::dynamics::{ClosureDynamics, Control, ControlProblem, ControlSet};
use riemctl::manifold::ManifoldChart;
use riemctl::numeric::loglog_slope;

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn residual_slope(p: &ControlProblem, ubar: &Control, value: f64, start: f64) -> (f64, Vec<f64>) {
    let eps = [0.2, 0.1, 0.05, 0.025];
    let res: Vec<f64> = eps
        .iter()
        .map(|e| {
            let u = ubar.splice(start, start + e, Control::constant(1.0, dv(&[value])));
            let b = BaseGeometry::build(p, ubar, 1e-3, &u.breakpoints()).unwrap();
            let sd = solve_second_adjoint(&b, &DualPair::free_endpoint(2)).unwrap();
            let (actual, predicted) = cost_expansion(p, &b, &sd, -1.0, &u).unwrap();
            (actual - predicted).abs()
        })
        .collect();
    (loglog_slope(&eps, &res), res)
}

#[test]
fn cost_expansion_is_third_order_on_the_sphere() {
    let p = ControlProblem::new(ManifoldChart::sphere(), Arc::new(SphereDrift), ControlSet::finite(&[-1.0, 0.0, 1.0]), dv(&[1.2, 0.3]), 1.0).unwrap();
    let (slope, res) = residual_slope(&p, &Control::constant(1.0, dv(&[0.0])), 1.0, 0.2);
    println!("sphere residuals {res:?} slope {slope}");
    assert!(slope >= 2.6, "{slope}");
}

#[test]
fn cost_expansion_is_third_order_on_the_hyperbolic_plane() {
    let shear = ClosureDynamics::new(
        "shear",
        2,
        1,
        |_, x, u| dv(&[0.4 * u[0] + 0.2 * x[1], 0.3 + 0.5 * x[0] * x[1] - 0.2 * u[0] * x[0]]),
        |_, x, u| u[0] * u[0] + x[0] * x[0] - 0.5 * x[1],
    );
    let p = ControlProblem::new(ManifoldChart::hyperbolic(1.0), Arc::new(shear), ControlSet::finite(&[-1.0, 1.0]), dv(&[0.5, 0.2]), 1.0).unwrap();
    let (slope, res) = residual_slope(&p, &Control::constant(1.0, dv(&[-1.0])), 1.0, 0.3);
    println!("hyperbolic residuals {res:?} slope {slope}");
    assert!(slope >= 2.6, "{slope}");
}

#[test]
fn tensor_and_frame_forms_agree() {
    let p = ControlProblem::new(ManifoldChart::sphere(), Arc::new(SphereDrift), ControlSet::finite(&[-1.0, 0.0, 1.0]), dv(&[1.2, 0.3]), 1.0).unwrap();
    let ubar = Control::constant(1.0, dv(&[0.0]));
    let u = ubar.splice(0.1, 0.3, Control::constant(1.0, dv(&[1.0]))).splice(0.6, 0.7, Control::constant(1.0, dv(&[-1.0])));
    let b = BaseGeometry::build(&p, &ubar, 1e-3, &u.breakpoints()).unwrap();
    let d = DualPair::new(-1.0, dv(&[0.3, -0.2])).unwrap();
    let sd = solve_second_adjoint(&b, &d).unwrap();
    let frame = second_order_term(&p, &b, &sd, -1.0, &u).unwrap();
    let chart = second_order_term_chart(&p, &b, &d, &u).unwrap();
    println!("frame {frame} chart {chart}");
    assert!((frame - chart).abs() < 1e-8, "{frame} vs {chart}");
}
