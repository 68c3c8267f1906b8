//! Reference evaluators for problems on a Euclidean chart, written directly in
//! coordinates: no connection, no frame, no transition matrices. They use the
//! analytic coordinate partials of the dynamics and their own RK4 loop, and
//! serve as the independent side of the zero-curvature cross-checks.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{Control, ControlProblem, NodeRef, Trajectory, UPartials, XPartials};
use crate::error::{Error, Result};

/// Partials and values at one stage.
struct Stage {
    f: DVector<f64>,
    f0: f64,
    x: XPartials,
}

/// A base trajectory with coordinate partials at every RK4 stage.
pub struct FlatBase<'a> {
    pub problem: &'a ControlProblem,
    pub traj: &'a Trajectory,
    stages: Vec<[Stage; 3]>,
}

fn partials(problem: &ControlProblem, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Result<XPartials> {
    problem
        .dynamics
        .x_partials(t, x.as_slice(), u.as_slice())
        .ok_or_else(|| Error::Unsupported("flat reference needs analytic x-partials".into()))
}

fn u_partials(problem: &ControlProblem, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Result<UPartials> {
    problem
        .dynamics
        .u_partials(t, x.as_slice(), u.as_slice())
        .ok_or_else(|| Error::Unsupported("flat reference needs analytic u-partials".into()))
}

/// Classical RK4 over the trajectory's steps, reading the right-hand side at
/// stage `s` of step `k`; backward runs start from the terminal value.
fn rk4<F>(traj: &Trajectory, forward: bool, init: DVector<f64>, mut rhs: F) -> Vec<DVector<f64>>
where
    F: FnMut(usize, usize, &DVector<f64>) -> DVector<f64>,
{
    let n = traj.steps();
    let mut out = vec![DVector::zeros(init.len()); n + 1];
    let mut y = init;
    let order: Vec<usize> = if forward { (0..n).collect() } else { (0..n).rev().collect() };
    out[if forward { 0 } else { n }] = y.clone();
    for k in order {
        let h = traj.times[k + 1] - traj.times[k];
        let (first, last, sgn) = if forward { (0, 2, 1.0) } else { (2, 0, -1.0) };
        let k1 = rhs(k, first, &y);
        let k2 = rhs(k, 1, &(&y + &k1 * (sgn * h / 2.0)));
        let k3 = rhs(k, 1, &(&y + &k2 * (sgn * h / 2.0)));
        let k4 = rhs(k, last, &(&y + &k3 * (sgn * h)));
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (sgn * h / 6.0);
        out[if forward { k + 1 } else { k }] = y.clone();
    }
    out
}

impl<'a> FlatBase<'a> {
    pub fn new(problem: &'a ControlProblem, traj: &'a Trajectory) -> Result<Self> {
        if problem.chart.constant_curvature() != Some(0.0) || !problem.chart.is_flat_analytic() {
            return Err(Error::Unsupported("flat reference needs a Euclidean chart".into()));
        }
        let smp = &traj.samples;
        let stages = (0..traj.steps())
            .map(|k| -> Result<[Stage; 3]> {
                let mk = |s: usize| -> Result<Stage> {
                    let (t, x, u) = (smp.stage_time(k, s), &smp.x[k][s], &traj.controls[k][s]);
                    Ok(Stage {
                        f: problem.dynamics.f(t, x.as_slice(), u.as_slice()),
                        f0: problem.dynamics.f0(t, x.as_slice(), u.as_slice()),
                        x: partials(problem, t, x, u)?,
                    })
                };
                Ok([mk(0)?, mk(1)?, mk(2)?])
            })
            .collect::<Result<_>>()?;
        Ok(FlatBase { problem, traj, stages })
    }

    fn stage(&self, k: usize, s: usize) -> &Stage {
        &self.stages[k][s]
    }

    fn at(&self, r: NodeRef) -> &Stage {
        &self.stages[r.step][r.stage]
    }

    /// `ṗ = −(∂f)ᵀp − ν∂f⁰`, `p(T) = psi1`.
    pub fn costate(&self, nu: f64, psi1: &DVector<f64>) -> Vec<DVector<f64>> {
        rk4(self.traj, false, psi1.clone(), |k, s, p| {
            let st = self.stage(k, s);
            -(st.x.dxf.transpose() * p) - &st.x.dxf0 * nu
        })
    }

    /// `ẇ = −(∂f)ᵀw − w∂f − Σᵢpᵢ∂²fⁱ − ν∂²f⁰`, `w(T) = 0`, with p the costate.
    pub fn second_costate(&self, nu: f64, psi1: &DVector<f64>) -> Vec<DMatrix<f64>> {
        let n = psi1.len();
        // Costate and w together so the costate is available at every stage.
        let mut init = DVector::zeros(n + n * n);
        init.rows_mut(0, n).copy_from(psi1);
        let out = rk4(self.traj, false, init, |k, s, y| {
            let st = self.stage(k, s);
            let p = y.rows(0, n).into_owned();
            let w = DMatrix::from_column_slice(n, n, y.rows(n, n * n).as_slice());
            let a = &st.x.dxf;
            let mut h = &st.x.dxxf0 * nu;
            for (kk, m) in st.x.dxxf.iter().enumerate() {
                // m[(i, j)] = ∂_k∂_j fⁱ, so Σᵢ pᵢ m[(i, j)] is row k of the Hessian.
                let row = m.transpose() * &p;
                for j in 0..n {
                    h[(kk, j)] += row[j];
                }
            }
            let dp = -(a.transpose() * &p) - &st.x.dxf0 * nu;
            let dw = -(a.transpose() * &w) - &w * a - h;
            let mut out = DVector::zeros(n + n * n);
            out.rows_mut(0, n).copy_from(&dp);
            out.rows_mut(n, n * n).copy_from(&DVector::from_column_slice(dw.as_slice()));
            out
        });
        out.iter().map(|y| DMatrix::from_column_slice(n, n, y.rows(n, n * n).as_slice())).collect()
    }

    fn grad_h(&self, t: f64, x: &DVector<f64>, p: &DVector<f64>, u: &DVector<f64>, nu: f64) -> Result<DVector<f64>> {
        let d = partials(self.problem, t, x, u)?;
        Ok(d.dxf.transpose() * p + d.dxf0 * nu)
    }

    /// `∫ ½(w + wᵀ)(f(u) − f(ū), X) + (∇H(u) − ∇H(ū))(X) dt` with
    /// `Ẋ = ∂f·X + f(u) − f(ū)`, `X(0) = 0`.
    pub fn integral_value(&self, nu: f64, psi1: &DVector<f64>, u: &Control) -> Result<f64> {
        let smp = &self.traj.samples;
        let us: Vec<[DVector<f64>; 3]> = (0..self.traj.steps())
            .map(|k| std::array::from_fn(|s| u.eval(smp.stage_time(k, s), smp.stage_time(k, 1))))
            .collect();
        let forcing = |k: usize, s: usize| -> DVector<f64> {
            let (t, x) = (smp.stage_time(k, s), &smp.x[k][s]);
            self.problem.dynamics.f(t, x.as_slice(), us[k][s].as_slice()) - &self.stage(k, s).f
        };
        let xs = rk4(self.traj, true, DVector::zeros(psi1.len()), |k, s, q| &self.stage(k, s).x.dxf * q + forcing(k, s));
        let p = self.costate(nu, psi1);
        let w = self.second_costate(nu, psi1);
        let mut err = None;
        let val = self.traj.integrate(|r| {
            let uv = &us[r.step][r.stage];
            let ub = &self.traj.controls[r.step][r.stage];
            if uv == ub {
                return 0.0;
            }
            let t = self.traj.times[r.node];
            let x = &self.traj.points[r.node];
            let f1 = forcing(r.step, r.stage);
            let dh = match (self.grad_h(t, x, &p[r.node], uv, nu), self.grad_h(t, x, &p[r.node], ub, nu)) {
                (Ok(a), Ok(b)) => a - b,
                (Err(e), _) | (_, Err(e)) => {
                    err = Some(e);
                    return 0.0;
                }
            };
            let ws = (&w[r.node] + w[r.node].transpose()) * 0.5;
            (ws * f1 + dh).dot(&xs[r.node])
        });
        match err {
            Some(e) => Err(e),
            None => Ok(val),
        }
    }

    /// `½(w + wᵀ)(f̄ − f(v), f̄ − f(v)) + (∇H(ū) − ∇H(v))(f̄ − f(v))` at a node.
    pub fn pointwise_value(&self, nu: f64, psi1: &DVector<f64>, r: NodeRef, v: &DVector<f64>) -> Result<f64> {
        let p = &self.costate(nu, psi1)[r.node];
        let w = &self.second_costate(nu, psi1)[r.node];
        let t = self.traj.times[r.node];
        let x = &self.traj.points[r.node];
        let ub = &self.traj.controls[r.step][r.stage];
        let d = &self.at(r).f - self.problem.dynamics.f(t, x.as_slice(), v.as_slice());
        let dh = self.grad_h(t, x, p, ub, nu)? - self.grad_h(t, x, p, v, nu)?;
        Ok(0.5 * d.dot(&((w + w.transpose()) * &d)) + dh.dot(&d))
    }

    /// `V̇ = ∂f·V + ∂_u f·ξ` from zero, with ξ given at every stage.
    pub fn kernel_path(&self, xi: &[[DVector<f64>; 3]]) -> Result<Vec<DVector<f64>>> {
        let smp = &self.traj.samples;
        let b: Vec<[DMatrix<f64>; 3]> = (0..self.traj.steps())
            .map(|k| -> Result<[DMatrix<f64>; 3]> {
                let g = |s: usize| u_partials(self.problem, smp.stage_time(k, s), &smp.x[k][s], &self.traj.controls[k][s]).map(|d| d.duf);
                Ok([g(0)?, g(1)?, g(2)?])
            })
            .collect::<Result<_>>()?;
        Ok(rk4(self.traj, true, DVector::zeros(self.traj.points[0].len()), |k, s, q| &self.stage(k, s).x.dxf * q + &b[k][s] * &xi[k][s]))
    }

    /// `∫ ξᵀ∂²_uH ξ + Vᵀ∂²_xH V + 2ξᵀ∂_u∂_xH V dt` along a kernel path.
    pub fn endpoint_form(&self, nu: f64, psi1: &DVector<f64>, xi: &[[DVector<f64>; 3]]) -> Result<f64> {
        let v = self.kernel_path(xi)?;
        let p = self.costate(nu, psi1);
        let n = psi1.len();
        let mut err = None;
        let val = self.traj.integrate(|r| {
            let t = self.traj.times[r.node];
            let x = &self.traj.points[r.node];
            let u = &self.traj.controls[r.step][r.stage];
            let d = match u_partials(self.problem, t, x, u) {
                Ok(d) => d,
                Err(e) => {
                    err = Some(e);
                    return 0.0;
                }
            };
            let xp = &self.at(r).x;
            let pk = &p[r.node];
            let z = &xi[r.step][r.stage];
            let mut huu = &d.duuf0 * nu;
            for (a, m) in d.duuf.iter().enumerate() {
                let row = m.transpose() * pk;
                for b in 0..z.len() {
                    huu[(a, b)] += row[b];
                }
            }
            let mut hxx = &xp.dxxf0 * nu;
            for (k, m) in xp.dxxf.iter().enumerate() {
                let row = m.transpose() * pk;
                for j in 0..n {
                    hxx[(k, j)] += row[j];
                }
            }
            let mut hux = &d.duxf0 * nu;
            for (a, m) in d.duxf.iter().enumerate() {
                let row = m.transpose() * pk;
                for j in 0..n {
                    hux[(a, j)] += row[j];
                }
            }
            let vv = &v[r.node];
            z.dot(&(huu * z)) + vv.dot(&(hxx * vv)) + 2.0 * z.dot(&(hux * vv))
        });
        match err {
            Some(e) => Err(e),
            None => Ok(val),
        }
    }

    /// `∫ f⁰ dt` recomputed from the stage values.
    pub fn cost(&self) -> f64 {
        let smp = &self.traj.samples;
        (0..self.traj.steps()).map(|k| smp.step_width(k) / 6.0 * (self.stage(k, 0).f0 + 4.0 * self.stage(k, 1).f0 + self.stage(k, 2).f0)).sum()
    }
}
