use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use riemctl::adjoint::{first_adjoint_chart, second_adjoint_chart, solve_second_adjoint, DualPair};
use riemctl::along::{sample_stages, BaseGeometry};
use riemctl::conditions::{endpoint_form_value, kernel_membership, pointwise_value, second_order_term};
use riemctl::dynamics::builtin::FlatLq;
use riemctl::dynamics::{Control, ControlProblem, ControlSet, Dynamics, UPartials, XPartials};
use riemctl::flat::FlatBase;
use riemctl::manifold::ManifoldChart;

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// `ẋ₀ = x₁, ẋ₁ = −sin x₀ + u x₀`, `f⁰ = ½u² + ½x₀² + 0.1x₀x₁² + 0.2u x₁`.
struct Pendulum;

impl Dynamics for Pendulum {
    fn name(&self) -> String {
        "pendulum".into()
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn f(&self, _t: f64, x: &[f64], u: &[f64]) -> DVector<f64> {
        dv(&[x[1], -x[0].sin() + u[0] * x[0]])
    }
    fn f0(&self, _t: f64, x: &[f64], u: &[f64]) -> f64 {
        0.5 * u[0] * u[0] + 0.5 * x[0] * x[0] + 0.1 * x[0] * x[1] * x[1] + 0.2 * u[0] * x[1]
    }
    fn x_partials(&self, _t: f64, x: &[f64], u: &[f64]) -> Option<XPartials> {
        let dxf = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -x[0].cos() + u[0], 0.0]);
        let d0 = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, x[0].sin(), 0.0]);
        let d1 = DMatrix::zeros(2, 2);
        Some(XPartials {
            dxf,
            dxxf: vec![d0, d1],
            dxf0: dv(&[x[0] + 0.1 * x[1] * x[1], 0.2 * x[0] * x[1] + 0.2 * u[0]]),
            dxxf0: DMatrix::from_row_slice(2, 2, &[1.0, 0.2 * x[1], 0.2 * x[1], 0.2 * x[0]]),
        })
    }
    fn u_partials(&self, _t: f64, x: &[f64], u: &[f64]) -> Option<UPartials> {
        Some(UPartials {
            duf: DMatrix::from_row_slice(2, 1, &[0.0, x[0]]),
            duf0: dv(&[u[0] + 0.2 * x[1]]),
            duuf: vec![DMatrix::zeros(2, 1)],
            duuf0: DMatrix::from_element(1, 1, 1.0),
            duxf: vec![DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0])],
            duxf0: DMatrix::from_row_slice(1, 2, &[0.0, 0.2]),
        })
    }
}

fn compare(p: &ControlProblem, ubar: &Control, duals: &DualPair, spikes: &[Control], probe: &Control) {
    let breaks: Vec<f64> = spikes.iter().flat_map(|u| u.breakpoints()).collect();
    let base = BaseGeometry::build(p, ubar, 1e-3, &breaks).unwrap();
    let flat = FlatBase::new(p, &base.traj).unwrap();
    let (nu, psi1) = (duals.nu, &duals.psi1);

    let psi = first_adjoint_chart(&base, duals);
    let fpsi = flat.costate(nu, psi1);
    let dpsi = psi.iter().zip(&fpsi).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
    let w = second_adjoint_chart(&base, duals);
    let fw = flat.second_costate(nu, psi1);
    let dw = w.iter().zip(&fw).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
    println!("psi {dpsi:e} w {dw:e}");
    assert!(dpsi <= 1e-8 && dw <= 1e-8);

    let sd = solve_second_adjoint(&base, duals).unwrap();
    for u in spikes {
        let (a, b) = (second_order_term(p, &base, &sd, nu, u).unwrap(), flat.integral_value(nu, psi1, u).unwrap());
        println!("integral {a} flat {b}");
        assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
    }
    for k in [0, base.steps() / 3, base.steps() - 1] {
        let r = riemctl::dynamics::NodeRef { node: k, step: k, stage: 0 };
        let v = base.traj.control_at(r) + dv(&[0.7]);
        let (a, b) = (pointwise_value(p, &base, &sd, nu, r, &v), flat.pointwise_value(nu, psi1, r, &v).unwrap());
        assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
    }
    let xi = sample_stages(&base, probe);
    let kc = kernel_membership(&base, &xi).unwrap();
    let sd_psi = riemctl::adjoint::solve_first_adjoint(&base, duals).unwrap();
    let (a, b) = (endpoint_form_value(p, &base, &sd_psi, nu, &xi, &kc.v), flat.endpoint_form(nu, psi1, &xi).unwrap());
    println!("endpoint form {a} flat {b}");
    assert!((a - b).abs() <= 1e-8, "{a} vs {b}");
    let fv = flat.kernel_path(&xi).unwrap();
    assert!(kc.v.vectors.iter().zip(&fv).all(|(a, b)| (a - b).amax() <= 1e-10));
}

#[test]
fn flat_lq_matches_coordinate_reference() {
    let p = ControlProblem::new(ManifoldChart::euclidean(1), Arc::new(FlatLq), ControlSet::open_box(&[-5.0], &[5.0]), dv(&[1.0]), 1.0).unwrap();
    let ubar = Control::smooth("riccati", 1.0, |t| dv(&[-(1.0 - t).sinh() / 1f64.cosh()]));
    let spikes = [
        ubar.splice(0.2, 0.3, Control::constant(1.0, dv(&[1.0]))),
        ubar.splice(0.5, 0.52, Control::constant(1.0, dv(&[-2.0]))),
    ];
    let base = BaseGeometry::build(&p, &ubar, 1e-3, &[]).unwrap();
    assert!((base.traj.cost - 0.5 * 1f64.tanh()).abs() <= 1e-5);
    assert!((FlatBase::new(&p, &base.traj).unwrap().cost() - base.traj.cost).abs() < 1e-10);
    compare(&p, &ubar, &DualPair::free_endpoint(1), &spikes, &Control::smooth("probe", 1.0, |t| dv(&[(3.0 * t).cos()])));
}

#[test]
fn nonlinear_flat_problem_matches_coordinate_reference() {
    let p = ControlProblem::new(ManifoldChart::euclidean(2), Arc::new(Pendulum), ControlSet::open_box(&[-3.0], &[3.0]), dv(&[0.8, -0.3]), 1.5).unwrap();
    let ubar = Control::smooth("base", 1.5, |t| dv(&[0.5 * (2.0 * t).sin() - 0.2]));
    let spikes = [
        ubar.splice(0.1, 0.4, Control::constant(1.5, dv(&[1.0]))),
        ubar.splice(0.9, 1.0, Control::constant(1.5, dv(&[-1.5]))).splice(1.2, 1.25, Control::constant(1.5, dv(&[2.0]))),
    ];
    let duals = DualPair::new(-1.0, dv(&[0.3, -0.2])).unwrap();
    compare(&p, &ubar, &duals, &spikes, &Control::smooth("probe", 1.5, |t| dv(&[1.0 - t * t])));
}
