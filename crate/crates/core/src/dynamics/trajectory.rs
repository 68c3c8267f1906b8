use nalgebra::DVector;

use super::{Control, ControlProblem, TimeGrid};
use crate::distance::{operator_norm, rho2};
use crate::error::{Error, Result};
use crate::manifold::CurveSamples;
use crate::numeric::simpson_weights;

/// Which step and stage supplies the control at a node: nodes inside a
/// piece use the following step, the last node of a piece the preceding one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeRef {
    pub node: usize,
    pub step: usize,
    pub stage: usize,
}

/// A solution of the controlled ODE on a [`TimeGrid`].
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub segments: Vec<(usize, usize)>,
    pub points: Vec<DVector<f64>>,
    /// Control at the three stages of every step.
    pub controls: Vec<[DVector<f64>; 3]>,
    pub samples: CurveSamples,
    pub control: Control,
    pub cost: f64,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn end(&self) -> &DVector<f64> {
        self.points.last().unwrap()
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid {
            times: self.times.clone(),
            segments: self.segments.clone(),
        }
    }

    /// Nodes of every piece with their control source, in time order; shared
    /// nodes between pieces appear once per piece.
    pub fn node_refs(&self) -> Vec<Vec<NodeRef>> {
        self.segments
            .iter()
            .map(|&(a, b)| {
                (a..=b)
                    .map(|j| {
                        if j < b {
                            NodeRef { node: j, step: j, stage: 0 }
                        } else {
                            NodeRef { node: j, step: j - 1, stage: 2 }
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn control_at(&self, r: NodeRef) -> &DVector<f64> {
        &self.controls[r.step][r.stage]
    }

    pub fn velocity_at(&self, r: NodeRef) -> &DVector<f64> {
        &self.samples.v[r.step][r.stage]
    }

    /// Composite Simpson over each piece, returned per piece.
    pub fn segment_integrals<F: FnMut(NodeRef) -> f64>(&self, mut g: F) -> Vec<f64> {
        self.node_refs()
            .into_iter()
            .zip(&self.segments)
            .map(|(refs, &(a, b))| {
                let w = simpson_weights(b - a, (self.times[b] - self.times[a]) / (b - a) as f64);
                refs.into_iter().zip(w).map(|(r, wi)| wi * g(r)).sum()
            })
            .collect()
    }

    pub fn integrate<F: FnMut(NodeRef) -> f64>(&self, g: F) -> f64 {
        self.segment_integrals(g).iter().sum()
    }

    /// Node index closest to time t.
    pub fn node_near(&self, t: f64) -> usize {
        match self.times.binary_search_by(|s| s.partial_cmp(&t).unwrap()) {
            Ok(i) => i,
            Err(i) if i == 0 => 0,
            Err(i) if i >= self.times.len() => self.times.len() - 1,
            Err(i) => {
                if t - self.times[i - 1] <= self.times[i] - t {
                    i - 1
                } else {
                    i
                }
            }
        }
    }
}

fn finite(v: &DVector<f64>, t: f64) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite dynamics value at t = {t}")))
    }
}

/// Integrates with RK4 on a grid refined to `max_step` and aligned with every
/// control breakpoint (plus any `extra_breaks`).
pub fn integrate_trajectory(problem: &ControlProblem, control: &Control, max_step: f64) -> Result<Trajectory> {
    integrate_trajectory_with_breaks(problem, control, max_step, &[])
}

pub fn integrate_trajectory_with_breaks(problem: &ControlProblem, control: &Control, max_step: f64, extra_breaks: &[f64]) -> Result<Trajectory> {
    if (control.horizon() - problem.horizon).abs() > 1e-12 * problem.horizon {
        return Err(Error::Shape(format!(
            "control horizon {} differs from problem horizon {}",
            control.horizon(),
            problem.horizon
        )));
    }
    let mut breaks = control.breakpoints();
    breaks.extend_from_slice(extra_breaks);
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breaks.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * (1.0 + b.abs()));
    let grid = TimeGrid::build(problem.horizon, &breaks, max_step)?;
    integrate_trajectory_on(problem, control, &grid)
}

/// Integrates on a prescribed grid, which must contain the control's breakpoints.
pub fn integrate_trajectory_on(problem: &ControlProblem, control: &Control, grid: &TimeGrid) -> Result<Trajectory> {
    if let Some(g) = control.as_grid() {
        g.validate()?;
        for v in &g.values {
            if v.len() != problem.control_set.dim() {
                return Err(Error::Shape(format!("control value of length {} for a set of dimension {}", v.len(), problem.control_set.dim())));
            }
        }
    }
    let chart = &problem.chart;
    let n = grid.steps();
    let mut y = problem.y0.clone();
    let mut points = Vec::with_capacity(n + 1);
    let mut controls = Vec::with_capacity(n);
    let mut xs = Vec::with_capacity(n);
    let mut vs = Vec::with_capacity(n);
    points.push(y.clone());
    for k in 0..n {
        let (t0, t1) = (grid.times[k], grid.times[k + 1]);
        let h = t1 - t0;
        let tm = t0 + 0.5 * h;
        let u = [control.eval(t0, tm), control.eval(tm, tm), control.eval(t1, tm)];
        let k1 = problem.f(t0, y.as_slice(), &u[0]);
        finite(&k1, t0)?;
        let y2 = &y + &k1 * (0.5 * h);
        let k2 = problem.f(tm, y2.as_slice(), &u[1]);
        let y3 = &y + &k2 * (0.5 * h);
        let k3 = problem.f(tm, y3.as_slice(), &u[1]);
        let y4 = &y + &k3 * h;
        let k4 = problem.f(t1, y4.as_slice(), &u[2]);
        let next = &y + (&k2 * 2.0 + &k3 * 2.0 + &k4 + &k1) * (h / 6.0);
        finite(&next, t1)?;
        if !chart.contains(next.as_slice()) {
            return Err(Error::DomainExit { time: t1 });
        }
        let f1 = problem.f(t1, next.as_slice(), &u[2]);
        finite(&f1, t1)?;
        let xm = (&y + &next) * 0.5 + (&k1 - &f1) * (h / 8.0);
        let fm = problem.f(tm, xm.as_slice(), &u[1]);
        xs.push([y.clone(), xm, next.clone()]);
        vs.push([k1, fm, f1]);
        controls.push(u);
        points.push(next.clone());
        y = next;
    }
    let mut traj = Trajectory {
        times: grid.times.clone(),
        segments: grid.segments.clone(),
        points,
        controls,
        samples: CurveSamples {
            times: grid.times.clone(),
            x: xs,
            v: vs,
        },
        control: control.clone(),
        cost: 0.0,
    };
    traj.cost = evaluate_cost(problem, &traj);
    if !traj.cost.is_finite() {
        return Err(Error::Numeric("non-finite running cost".into()));
    }
    Ok(traj)
}

/// Composite Simpson quadrature of `f⁰` along the trajectory.
pub fn evaluate_cost(problem: &ControlProblem, traj: &Trajectory) -> f64 {
    traj.integrate(|r| problem.f0(traj.times[r.node], traj.points[r.node].as_slice(), traj.control_at(r)))
}

/// Worst margins of the growth bound
/// `ρ(y(t̂), y(t)) ≤ (1 + ρ(x₀, y₀))(e^{Lt̂} − e^{Lt})` and the perturbation
/// bound `ρ(ȳ(t), y_u(t)) ≤ 2L(1 + ρ(x₀, y₀)) e^{Lt} |{s ≤ t : u ≠ ū}|`,
/// with `x₀ = y₀` and L sampled over the visited points and control values.
#[derive(Clone, Debug, PartialEq)]
pub struct AprioriReport {
    pub lipschitz: f64,
    pub growth_margin: f64,
    pub perturbation_margin: f64,
    pub growth_pairs: usize,
    pub perturbation_pairs: usize,
}

impl AprioriReport {
    pub fn holds(&self) -> bool {
        self.growth_margin >= 0.0 && self.perturbation_margin >= 0.0
    }
}

fn probe_controls(problem: &ControlProblem) -> Vec<DVector<f64>> {
    use super::ControlSet;
    match &problem.control_set {
        ControlSet::FiniteSet { values } => values.clone(),
        ControlSet::OpenBox { lower, upper } => {
            let m = lower.len();
            let mut out = vec![(lower + upper) * 0.5];
            for mask in 0..(1usize << m) {
                out.push(DVector::from_fn(m, |a, _| if mask >> a & 1 == 1 { upper[a] } else { lower[a] }));
            }
            out
        }
    }
}

fn dist(problem: &ControlProblem, a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    Ok(rho2(&problem.chart, a, b)?.max(0.0).sqrt())
}

/// Checks both a-priori bounds for the trajectory of `base` against the
/// trajectories of `others`, built on common grids with `max_step`. At most
/// `node_samples` nodes per trajectory enter the pairwise checks.
pub fn apriori_bounds_check(problem: &ControlProblem, base: &Control, others: &[Control], max_step: f64, node_samples: usize) -> Result<AprioriReport> {
    let x0 = problem.y0.clone();
    let probes = probe_controls(problem);
    let mut trajs = Vec::with_capacity(others.len() + 1);
    let b = integrate_trajectory(problem, base, max_step)?;
    trajs.push(b.clone());
    let mut pairs = Vec::with_capacity(others.len());
    for u in others {
        let mut breaks = base.breakpoints();
        breaks.extend(u.breakpoints());
        let ub = integrate_trajectory_with_breaks(problem, base, max_step, &breaks)?;
        let uu = integrate_trajectory_with_breaks(problem, u, max_step, &breaks)?;
        trajs.push(uu.clone());
        pairs.push((ub, uu));
    }
    let pick = |tr: &Trajectory| -> Vec<usize> {
        let n = tr.points.len();
        let k = node_samples.max(2).min(n);
        (0..k).map(|i| i * (n - 1) / (k - 1)).collect()
    };
    let mut lip = 1.0f64;
    for tr in &trajs {
        for j in pick(tr) {
            let x = &tr.points[j];
            let r = dist(problem, &x0, x)?;
            let g = problem.chart.metric(x.as_slice());
            for u in &probes {
                let d = problem.covariant(tr.times[j], x.as_slice(), u);
                lip = lip.max(problem.chart.norm(x.as_slice(), &d.f) / (1.0 + r));
                lip = lip.max(operator_norm(&g, &d.df));
            }
        }
    }
    let mut growth_margin = f64::INFINITY;
    let mut growth_pairs = 0;
    for tr in &trajs {
        let idx = pick(tr);
        for (ia, &a) in idx.iter().enumerate() {
            for &bn in &idx[ia + 1..] {
                let lhs = dist(problem, &tr.points[bn], &tr.points[a])?;
                let rhs = (lip * tr.times[bn]).exp() - (lip * tr.times[a]).exp();
                growth_margin = growth_margin.min(rhs - lhs);
                growth_pairs += 1;
            }
        }
    }
    let mut perturbation_margin = f64::INFINITY;
    let mut perturbation_pairs = 0;
    for (ub, uu) in &pairs {
        let mut differ = vec![0.0; ub.times.len()];
        for k in 0..ub.steps() {
            let h = ub.times[k + 1] - ub.times[k];
            differ[k + 1] = differ[k] + if ub.controls[k][1] != uu.controls[k][1] { h } else { 0.0 };
        }
        for j in pick(ub) {
            let lhs = dist(problem, &ub.points[j], &uu.points[j])?;
            let rhs = 2.0 * lip * (lip * ub.times[j]).exp() * differ[j];
            perturbation_margin = perturbation_margin.min(rhs - lhs);
            perturbation_pairs += 1;
        }
    }
    Ok(AprioriReport {
        lipschitz: lip,
        growth_margin,
        perturbation_margin,
        growth_pairs,
        perturbation_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::builtin::{FlatLq, RotationDecay};
    use crate::dynamics::{ControlGrid, ControlSet};
    use crate::manifold::ManifoldChart;
    use std::sync::Arc;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn flat_lq() -> ControlProblem {
        ControlProblem::new(ManifoldChart::euclidean(1), Arc::new(FlatLq), ControlSet::open_box(&[-10.0], &[10.0]), dv(&[1.0]), 1.0).unwrap()
    }

    #[test]
    fn straight_line_for_unit_velocity() {
        let p = ControlProblem::new(
            ManifoldChart::euclidean(1),
            Arc::new(FlatLq),
            ControlSet::open_box(&[-2.0], &[2.0]),
            dv(&[0.0]),
            1.0,
        )
        .unwrap();
        let tr = integrate_trajectory(&p, &Control::constant(1.0, dv(&[1.0])), 1e-2).unwrap();
        for (t, y) in tr.times.iter().zip(&tr.points) {
            assert!((y[0] - t).abs() < 1e-13);
        }
    }

    #[test]
    fn constant_state_costs() {
        let tr = integrate_trajectory(&flat_lq(), &Control::constant(1.0, dv(&[0.0])), 1e-2).unwrap();
        assert!((tr.end()[0] - 1.0).abs() < 1e-15);
        assert!((tr.cost - 0.5).abs() < 1e-14);

        let e = ControlSet::finite(&[1.0, 2.0, 3.0, 4.0]);
        let p = ControlProblem::new(ManifoldChart::hyperbolic(1.0), Arc::new(RotationDecay::new(1.0)), e, dv(&[0.0, 0.0]), 1.0).unwrap();
        for (u, c) in [(1.0, (-1.0f64).exp()), (2.0, 4.0 * (-1.0f64).exp())] {
            let tr = integrate_trajectory(&p, &Control::constant(1.0, dv(&[u])), 1e-2).unwrap();
            assert!(tr.end().amax() == 0.0);
            assert!((tr.cost - c).abs() < 1e-13);
        }
    }

    #[test]
    fn rk4_order_and_simpson_order() {
        // ẏ = u with u = cos t; y = 1 + sin t, f⁰ = (y² + u²)/2.
        let p = flat_lq();
        let u = Control::smooth("cos", 1.0, |t| DVector::from_element(1, t.cos()));
        // ½∫(1 + sin t)² + cos² t dt = ½∫(2 + 2 sin t) dt
        let exact_cost = 1.0 + (1.0 - 1f64.cos());
        let errs: Vec<(f64, f64)> = [0.1, 0.05]
            .iter()
            .map(|h| {
                let tr = integrate_trajectory(&p, &u, *h).unwrap();
                ((tr.end()[0] - 1.0 - 1f64.sin()).abs(), (tr.cost - exact_cost).abs())
            })
            .collect();
        assert!(errs[0].0 / errs[1].0 >= 14.0, "{errs:?}");
        assert!(errs[0].1 / errs[1].1 >= 14.0, "{errs:?}");
    }

    #[test]
    fn cost_is_additive_over_pieces() {
        let p = flat_lq();
        let u = Control::Grid(ControlGrid::scalar(1.0, &[0.3, -0.7, 0.1]));
        let tr = integrate_trajectory_with_breaks(&p, &u, 1e-2, &[0.5]).unwrap();
        let parts = tr.segment_integrals(|r| p.f0(tr.times[r.node], tr.points[r.node].as_slice(), tr.control_at(r)));
        let split = tr.segments.iter().position(|s| tr.times[s.0] >= 0.5 - 1e-14).unwrap();
        let first: f64 = parts[..split].iter().sum();
        let second: f64 = parts[split..].iter().sum();
        assert!((first + second - tr.cost).abs() < 1e-12);
        // The same halves from separate runs.
        let whole = integrate_trajectory(&p, &u, 1e-2).unwrap();
        assert!((whole.cost - tr.cost).abs() < 1e-10);
    }

    #[test]
    fn integration_is_deterministic() {
        let p = flat_lq();
        let u = Control::Grid(ControlGrid::scalar(1.0, &[0.3, -0.7, 0.1, 2.0]));
        let a = integrate_trajectory(&p, &u, 1e-3).unwrap();
        let b = integrate_trajectory(&p, &u, 1e-3).unwrap();
        assert_eq!(a.points, b.points);
        assert_eq!(a.cost.to_bits(), b.cost.to_bits());
    }

    #[test]
    fn domain_exit_is_reported() {
        let p = ControlProblem::new(
            ManifoldChart::euclidean(2).with_domain(vec![-1.0; 2], vec![1.0; 2]),
            Arc::new(crate::dynamics::builtin::LinearEuclidean::new(
                nalgebra::DMatrix::zeros(2, 2),
                nalgebra::DMatrix::identity(2, 2),
            )),
            ControlSet::open_box(&[-10.0, -10.0], &[10.0, 10.0]),
            dv(&[0.0, 0.0]),
            1.0,
        )
        .unwrap();
        let err = integrate_trajectory(&p, &Control::constant(1.0, dv(&[0.0, 5.0])), 1e-2).unwrap_err();
        assert!(matches!(err, Error::DomainExit { .. }), "{err}");
    }

    #[test]
    fn apriori_bounds_on_single_interval_change() {
        let p = flat_lq();
        let base = Control::Grid(ControlGrid::scalar(1.0, &[0.0, 0.0, 0.0, 0.0]));
        let other = Control::Grid(ControlGrid::scalar(1.0, &[0.0, 1.0, 0.0, 0.0]));
        let rep = apriori_bounds_check(&p, &base, &[other], 1e-2, 21).unwrap();
        assert!(rep.holds(), "{rep:?}");
        assert!(rep.perturbation_pairs > 0);
    }
}
