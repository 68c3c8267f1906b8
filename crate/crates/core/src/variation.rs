//! First and second order variations of a base trajectory under needle
//! (spike) and classical (`ū + εv`) control perturbations, and the sweeps
//! that measure how well they predict the true deviation `exp⁻¹_ȳ y`.
//!
//! All equations are integrated in parallel-frame components. The second
//! order equations carry the curvature term `−½R(eᵢ, X, ẏ, X)`.

use nalgebra::DVector;
use rayon::prelude::*;

use crate::along::{sample_stages, BaseGeometry, StageField, StageGeom};
use crate::dynamics::{integrate_trajectory_on, Control, ControlProblem, ControlSet, Trajectory};
use crate::error::{Error, Result};
use crate::manifold::{integrate_along, log_map, Direction};
use crate::numeric::loglog_slope;

/// A vector field along the base curve, per node, in frame components and in
/// chart components.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentPath {
    pub times: Vec<f64>,
    pub comps: Vec<DVector<f64>>,
    pub vectors: Vec<DVector<f64>>,
}

impl TangentPath {
    fn from_comps(base: &BaseGeometry, comps: Vec<DVector<f64>>) -> Self {
        TangentPath {
            times: base.traj.times.clone(),
            vectors: base.to_chart(&comps),
            comps,
        }
    }

    pub fn zeros(base: &BaseGeometry) -> Self {
        Self::from_comps(base, vec![DVector::zeros(base.dim()); base.steps() + 1])
    }

    /// Largest length; frame components are orthonormal so this is the
    /// Riemannian norm.
    pub fn sup_norm(&self) -> f64 {
        self.comps.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    pub fn end(&self) -> &DVector<f64> {
        self.comps.last().unwrap()
    }

    /// `sup_t |Σ cᵢ · pathᵢ(t)|` for a linear combination of paths.
    pub fn sup_combination(parts: &[(f64, &TangentPath)]) -> f64 {
        let n = parts[0].1.comps.len();
        (0..n)
            .map(|k| {
                parts
                    .iter()
                    .fold(DVector::zeros(parts[0].1.comps[k].len()), |acc, (c, p)| acc + &p.comps[k] * *c)
                    .norm()
            })
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, c: f64) -> TangentPath {
        TangentPath {
            times: self.times.clone(),
            comps: self.comps.iter().map(|v| v * c).collect(),
            vectors: self.vectors.iter().map(|v| v * c).collect(),
        }
    }
}

fn check_aligned(base: &BaseGeometry, u: &Control) -> Result<()> {
    let times = &base.traj.times;
    for b in u.breakpoints() {
        let i = base.traj.node_near(b);
        if (times[i] - b).abs() > 1e-12 * (1.0 + b.abs()) {
            return Err(Error::Precondition(format!("control jumps at t = {b}, which is not a node of the base grid")));
        }
    }
    Ok(())
}

/// `F₁ = (f(u) − f(ū))` in frame components at one stage.
fn forcing(problem: &ControlProblem, s: &StageGeom, u: &DVector<f64>) -> DVector<f64> {
    if *u == s.u {
        return DVector::zeros(s.x.len());
    }
    s.to_frame(&(problem.f(s.t, s.x.as_slice(), u) - &s.cov.f))
}

/// `F₁(t, u(t))` sampled at every stage of the base grid.
pub fn needle_forcing(problem: &ControlProblem, base: &BaseGeometry, u: &Control) -> Result<StageField> {
    check_aligned(base, u)?;
    let us = sample_stages(base, u);
    Ok((0..base.steps()).map(|k| std::array::from_fn(|s| forcing(problem, &base.stages[k][s], &us[k][s]))).collect())
}

/// `∇_ẏ X = ∇_X f(ū) + f(u) − f(ū)`, `X(0) = 0`.
pub fn solve_first_variation_needle(problem: &ControlProblem, base: &BaseGeometry, u: &Control) -> Result<TangentPath> {
    let f1 = needle_forcing(problem, base, u)?;
    let comps = base.integrate(Direction::Forward, DVector::zeros(base.dim()), |s, k, st, q| &s.fmat * q + &f1[k][st]);
    Ok(TangentPath::from_comps(base, comps))
}

/// The same first variation in chart components, `Ẋ = ∇_X f − Γ(ẏ, X) + f(u) − f(ū)`.
pub fn first_variation_chart(problem: &ControlProblem, base: &BaseGeometry, u: &Control) -> Result<Vec<DVector<f64>>> {
    check_aligned(base, u)?;
    let us = sample_stages(base, u);
    Ok(integrate_along(&base.traj.samples, Direction::Forward, DVector::zeros(base.dim()), |k, st, x| {
        let s = &base.stages[k][st];
        let mut r = &s.cov.df * x - s.gam.contract(&s.v, x);
        if us[k][st] != s.u {
            r += problem.f(s.t, s.x.as_slice(), &us[k][st]) - &s.cov.f;
        }
        r
    }))
}

/// First and second needle variations, integrated together:
/// `∇_ẏ Y = ∇_Y f̄ − ½R(·, X, f̄, X) + (∇f(u) − ∇f(ū))X + ½∇²f̄(X, X)`.
pub fn solve_second_variation_needle(problem: &ControlProblem, base: &BaseGeometry, u: &Control) -> Result<(TangentPath, TangentPath)> {
    check_aligned(base, u)?;
    let n = base.dim();
    let us = sample_stages(base, u);
    let dfu: Vec<[Option<nalgebra::DMatrix<f64>>; 3]> = (0..base.steps())
        .map(|k| {
            std::array::from_fn(|st| {
                let s = &base.stages[k][st];
                (us[k][st] != s.u).then(|| problem.covariant(s.t, s.x.as_slice(), &us[k][st]).df)
            })
        })
        .collect();
    let out = base.integrate(Direction::Forward, DVector::zeros(2 * n), |s, k, st, p| {
        let q = p.rows(0, n).into_owned();
        let y = p.rows(n, n).into_owned();
        let x = s.from_frame(&q);
        let mut dq = &s.fmat * &q;
        let mut dy = &s.fmat * &y - s.curvature_row(&x, &s.cov.f, &x) * 0.5 + s.to_frame(&s.cov.hess_f(&x, &x)) * 0.5;
        if let Some(df) = &dfu[k][st] {
            dq += forcing(problem, s, &us[k][st]);
            dy += s.to_frame(&((df - &s.cov.df) * &x));
        }
        let mut r = DVector::zeros(2 * n);
        r.rows_mut(0, n).copy_from(&dq);
        r.rows_mut(n, n).copy_from(&dy);
        r
    });
    let xs = out.iter().map(|p| p.rows(0, n).into_owned()).collect();
    let ys = out.iter().map(|p| p.rows(n, n).into_owned()).collect();
    Ok((TangentPath::from_comps(base, xs), TangentPath::from_comps(base, ys)))
}

/// `V(t) = exp⁻¹_{ȳ(t)} y(t)` for a trajectory on the base grid.
pub fn log_deviation(problem: &ControlProblem, base: &BaseGeometry, perturbed: &Trajectory) -> Result<TangentPath> {
    if perturbed.times != base.traj.times {
        return Err(Error::Shape("perturbed trajectory lives on a different grid".into()));
    }
    let vectors: Vec<DVector<f64>> = base
        .traj
        .points
        .par_iter()
        .zip(&perturbed.points)
        .map(|(a, b)| if a == b { Ok(DVector::zeros(a.len())) } else { log_map(&problem.chart, a, b) })
        .collect::<Result<_>>()?;
    let comps = vectors.iter().enumerate().map(|(k, v)| base.node(k).to_frame(v)).collect();
    Ok(TangentPath {
        times: base.traj.times.clone(),
        comps,
        vectors,
    })
}

/// Log-log slopes of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SlopeRow {
    pub label: String,
    pub values: Vec<f64>,
    pub slope: f64,
}

impl SlopeRow {
    fn new(label: &str, eps: &[f64], values: Vec<f64>) -> Self {
        SlopeRow {
            label: label.into(),
            slope: loglog_slope(eps, &values),
            values,
        }
    }

    pub fn max(&self) -> f64 {
        self.values.iter().cloned().fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlopeReport {
    pub eps: Vec<f64>,
    pub rows: Vec<SlopeRow>,
    /// Sweep members whose perturbed control left the control set.
    pub box_violations: usize,
}

impl SlopeReport {
    pub fn row(&self, label: &str) -> &SlopeRow {
        self.rows.iter().find(|r| r.label == label).unwrap_or_else(|| panic!("no slope row `{label}`"))
    }
}

/// Needle sweep: `u^ε = ū` outside `[start, start + ε]` and `u` inside, so the
/// spikes are nested. Rows `X`, `Y`, `V-X`, `V-X-Y` hold sup-norms over nodes.
pub fn verify_needle_taylor(problem: &ControlProblem, ubar: &Control, u: &Control, start: f64, epsilons: &[f64], step: f64) -> Result<SlopeReport> {
    if epsilons.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Precondition("epsilons must be strictly decreasing".into()));
    }
    if start < 0.0 || start + epsilons[0] > problem.horizon {
        return Err(Error::Precondition(format!("spike [{start}, {}] leaves [0, T]", start + epsilons[0])));
    }
    let rows: Vec<[f64; 4]> = epsilons
        .par_iter()
        .map(|&eps| -> Result<[f64; 4]> {
            let ue = ubar.splice(start, start + eps, u.clone());
            let base = BaseGeometry::build(problem, ubar, step, &ue.breakpoints())?;
            let pert = integrate_trajectory_on(problem, &ue, &base.traj.grid())?;
            let (x, y) = solve_second_variation_needle(problem, &base, &ue)?;
            let v = log_deviation(problem, &base, &pert)?;
            Ok([
                x.sup_norm(),
                y.sup_norm(),
                TangentPath::sup_combination(&[(1.0, &v), (-1.0, &x)]),
                TangentPath::sup_combination(&[(1.0, &v), (-1.0, &x), (-1.0, &y)]),
            ])
        })
        .collect::<Result<_>>()?;
    let col = |i: usize| rows.iter().map(|r| r[i]).collect::<Vec<_>>();
    Ok(SlopeReport {
        eps: epsilons.to_vec(),
        rows: vec![
            SlopeRow::new("X", epsilons, col(0)),
            SlopeRow::new("Y", epsilons, col(1)),
            SlopeRow::new("V-X", epsilons, col(2)),
            SlopeRow::new("V-X-Y", epsilons, col(3)),
        ],
        box_violations: 0,
    })
}

/// `∇_ẏ V = ∇_V f + ∂_u f·v` and
/// `∇_ẏ Y = ∇_Y f + (∂_u∇f)(v, V) − ½R(·, V, ẏ, V) + ½∇²f(V, V) + ½∂²_u f(v, v)`,
/// both from zero. `v` is sampled at the stages of the base grid.
pub fn solve_classical_variations(base: &BaseGeometry, v: &StageField) -> Result<(TangentPath, TangentPath)> {
    let n = base.dim();
    if base.stages.iter().any(|s| s[0].ctrl.is_none()) {
        return Err(Error::Precondition("classical variations need an open control set".into()));
    }
    let out = base.integrate(Direction::Forward, DVector::zeros(2 * n), |s, k, st, p| {
        let c = s.ctrl.as_ref().unwrap();
        let w = &v[k][st];
        let q = p.rows(0, n).into_owned();
        let y = p.rows(n, n).into_owned();
        let x = s.from_frame(&q);
        let dq = &s.fmat * &q + s.to_frame(&(&c.duf * w));
        let mut drive = s.cov.hess_f(&x, &x) * 0.5;
        for a in 0..w.len() {
            drive += &c.dudxf[a] * &x * w[a];
            for b in 0..w.len() {
                drive += c.duuf[a].column(b) * (0.5 * w[a] * w[b]);
            }
        }
        let dy = &s.fmat * &y + s.to_frame(&drive) - s.curvature_row(&x, &s.v, &x) * 0.5;
        let mut r = DVector::zeros(2 * n);
        r.rows_mut(0, n).copy_from(&dq);
        r.rows_mut(n, n).copy_from(&dy);
        r
    });
    let vs = out.iter().map(|p| p.rows(0, n).into_owned()).collect();
    let ys = out.iter().map(|p| p.rows(n, n).into_owned()).collect();
    Ok((TangentPath::from_comps(base, vs), TangentPath::from_comps(base, ys)))
}

fn leaves_box(set: &ControlSet, base: &BaseGeometry, v: &StageField, eps: f64) -> bool {
    match set {
        ControlSet::OpenBox { .. } => base
            .stages
            .iter()
            .zip(v)
            .any(|(s, w)| (0..3).any(|st| !set.contains(&(&s[st].u + &w[st] * eps)))),
        ControlSet::FiniteSet { .. } => true,
    }
}

/// Classical sweep over `ū + εv`: rows `V`, `Y`, `Ve-eV`, `Ve-eV-e2Y`.
/// Members leaving the box are counted in `box_violations` and still run.
pub fn verify_classical_expansion(problem: &ControlProblem, ubar: &Control, v: &Control, epsilons: &[f64], step: f64) -> Result<SlopeReport> {
    let base = BaseGeometry::build(problem, ubar, step, &v.breakpoints())?;
    let vs = sample_stages(&base, v);
    let (lin, quad) = solve_classical_variations(&base, &vs)?;
    let box_violations = epsilons.iter().filter(|e| leaves_box(&problem.control_set, &base, &vs, **e)).count();
    let rows: Vec<[f64; 2]> = epsilons
        .par_iter()
        .map(|&eps| -> Result<[f64; 2]> {
            let ue = ubar.perturbed(v, eps);
            let pert = integrate_trajectory_on(problem, &ue, &base.traj.grid())?;
            let ve = log_deviation(problem, &base, &pert)?;
            Ok([
                TangentPath::sup_combination(&[(1.0, &ve), (-eps, &lin)]),
                TangentPath::sup_combination(&[(1.0, &ve), (-eps, &lin), (-eps * eps, &quad)]),
            ])
        })
        .collect::<Result<_>>()?;
    let col = |i: usize| rows.iter().map(|r| r[i]).collect::<Vec<_>>();
    Ok(SlopeReport {
        eps: epsilons.to_vec(),
        rows: vec![
            SlopeRow::new("V", epsilons, vec![lin.sup_norm(); epsilons.len()]),
            SlopeRow::new("Y", epsilons, vec![quad.sup_norm(); epsilons.len()]),
            SlopeRow::new("Ve-eV", epsilons, col(0)),
            SlopeRow::new("Ve-eV-e2Y", epsilons, col(1)),
        ],
        box_violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::builtin::{FlatLq, LinearEuclidean};
    use crate::dynamics::{ClosureDynamics, ControlGrid};
    use crate::manifold::ManifoldChart;
    use nalgebra::DMatrix;
    use std::sync::Arc;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn flat_velocity() -> ControlProblem {
        ControlProblem::new(
            ManifoldChart::euclidean(1),
            Arc::new(LinearEuclidean::new(DMatrix::zeros(1, 1), DMatrix::identity(1, 1))),
            ControlSet::open_box(&[-5.0], &[5.0]),
            dv(&[0.0]),
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn unit_spike_gives_ramp() {
        let p = flat_velocity();
        let ubar = Control::constant(1.0, dv(&[0.0]));
        let u = ubar.splice(0.0, 0.25, Control::constant(1.0, dv(&[1.0])));
        let base = BaseGeometry::build(&p, &ubar, 1e-2, &u.breakpoints()).unwrap();
        let x = solve_first_variation_needle(&p, &base, &u).unwrap();
        for (t, v) in x.times.iter().zip(&x.vectors) {
            assert!((v[0] - t.min(0.25)).abs() < 1e-13);
        }
    }

    #[test]
    fn identical_control_gives_zero_variations() {
        let p = flat_velocity();
        let ubar = Control::Grid(ControlGrid::scalar(1.0, &[0.3, -0.2]));
        let base = BaseGeometry::build(&p, &ubar, 1e-2, &[]).unwrap();
        let (x, y) = solve_second_variation_needle(&p, &base, &ubar).unwrap();
        assert_eq!(x.sup_norm(), 0.0);
        assert_eq!(y.sup_norm(), 0.0);
        let tr = integrate_trajectory_on(&p, &ubar, &base.traj.grid()).unwrap();
        assert_eq!(log_deviation(&p, &base, &tr).unwrap().sup_norm(), 0.0);
    }

    #[test]
    fn misaligned_spike_is_rejected() {
        let p = flat_velocity();
        let ubar = Control::constant(1.0, dv(&[0.0]));
        let base = BaseGeometry::build(&p, &ubar, 0.1, &[]).unwrap();
        let u = ubar.splice(0.0, 0.123, Control::constant(1.0, dv(&[1.0])));
        assert!(matches!(solve_first_variation_needle(&p, &base, &u), Err(Error::Precondition(_))));
    }

    #[test]
    fn bilinear_flat_second_variation_matches_hand_integration() {
        // f = u·(x₂, −x₁): with ū = 0 and u = 1 on [0, s], X = tAy₀ and
        // Y = t²/2 A²y₀ on the spike, constant afterwards.
        let dy = ClosureDynamics::new("bilinear", 2, 1, |_, x, u| dv(&[u[0] * x[1], -u[0] * x[0]]), |_, _, _| 0.0);
        let p = ControlProblem::new(ManifoldChart::euclidean(2), Arc::new(dy), ControlSet::finite(&[0.0, 1.0]), dv(&[0.4, 0.3]), 1.0).unwrap();
        let ubar = Control::constant(1.0, dv(&[0.0]));
        let s = 0.25;
        let u = ubar.splice(0.0, s, Control::constant(1.0, dv(&[1.0])));
        let base = BaseGeometry::build(&p, &ubar, 1e-2, &u.breakpoints()).unwrap();
        let (x, y) = solve_second_variation_needle(&p, &base, &u).unwrap();
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let y0 = dv(&[0.4, 0.3]);
        for (k, t) in x.times.iter().enumerate() {
            let t = t.min(s);
            assert!((&x.vectors[k] - &a * &y0 * t).amax() < 1e-9);
            assert!((&y.vectors[k] - &a * &a * &y0 * (0.5 * t * t)).amax() < 1e-9, "{} {}", y.vectors[k], t);
        }
    }

    #[test]
    fn linear_dynamics_expansions_are_exact() {
        let lin = LinearEuclidean::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.3]), DMatrix::from_column_slice(2, 1, &[0.0, 1.0]));
        let p = ControlProblem::new(ManifoldChart::euclidean(2), Arc::new(lin), ControlSet::open_box(&[-9.0], &[9.0]), dv(&[1.0, 0.0]), 1.0).unwrap();
        let ubar = Control::smooth("sin", 1.0, |t| dv(&[t.sin()]));
        let rep = verify_needle_taylor(&p, &ubar, &Control::constant(1.0, dv(&[2.0])), 0.3, &[0.2, 0.1, 0.05, 0.025], 1e-2).unwrap();
        assert!(rep.row("V-X-Y").max() < 1e-12, "{rep:?}");
        assert!(rep.row("Y").max() < 1e-14);
        let v = Control::smooth("cos", 1.0, |t| dv(&[(2.0 * t).cos()]));
        let rep = verify_classical_expansion(&p, &ubar, &v, &[0.1, 0.05], 1e-2).unwrap();
        assert!(rep.row("Ve-eV").max() < 1e-12);
        assert_eq!(rep.box_violations, 0);
    }

    #[test]
    fn classical_flat_lq_velocity_is_ramp() {
        let p = ControlProblem::new(ManifoldChart::euclidean(1), Arc::new(FlatLq), ControlSet::open_box(&[-3.0], &[3.0]), dv(&[1.0]), 1.0).unwrap();
        let base = BaseGeometry::build(&p, &Control::constant(1.0, dv(&[0.0])), 1e-2, &[]).unwrap();
        let v = sample_stages(&base, &Control::constant(1.0, dv(&[1.0])));
        let (vv, yy) = solve_classical_variations(&base, &v).unwrap();
        for (t, x) in vv.times.iter().zip(&vv.vectors) {
            assert!((x[0] - t).abs() < 1e-13);
        }
        assert_eq!(yy.sup_norm(), 0.0);
        let zero = sample_stages(&base, &Control::constant(1.0, dv(&[0.0])));
        let (vv, yy) = solve_classical_variations(&base, &zero).unwrap();
        assert_eq!(vv.sup_norm() + yy.sup_norm(), 0.0);
    }

    #[test]
    fn first_variation_is_linear_in_forcing() {
        let lin = LinearEuclidean::new(DMatrix::from_row_slice(2, 2, &[0.1, 1.0, -1.0, 0.0]), DMatrix::from_column_slice(2, 1, &[0.0, 1.0]));
        let p = ControlProblem::new(ManifoldChart::euclidean(2), Arc::new(lin), ControlSet::open_box(&[-9.0], &[9.0]), dv(&[1.0, 0.0]), 1.0).unwrap();
        let ubar = Control::constant(1.0, dv(&[0.5]));
        let one = ubar.splice(0.2, 0.4, Control::constant(1.0, dv(&[1.5])));
        let two = ubar.splice(0.2, 0.4, Control::constant(1.0, dv(&[2.5])));
        let base = BaseGeometry::build(&p, &ubar, 1e-2, &one.breakpoints()).unwrap();
        let x1 = solve_first_variation_needle(&p, &base, &one).unwrap();
        let x2 = solve_first_variation_needle(&p, &base, &two).unwrap();
        assert!(TangentPath::sup_combination(&[(2.0, &x1), (-1.0, &x2)]) < 1e-10);
    }
}
