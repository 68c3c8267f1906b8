use nalgebra::{DMatrix, DVector};

use super::chart::ManifoldChart;
use super::curve::{integrate_along, CurveSamples, Direction};
use crate::error::{Error, Result};
use crate::numeric::Rk4;

/// Default RK4 step in the curve parameter.
pub const DEFAULT_STEP: f64 = 1e-3;

/// A sampled geodesic `γ(s)`, `s ∈ [0, s_max]`, on a uniform grid.
#[derive(Clone, Debug)]
pub struct CurvePath {
    pub times: Vec<f64>,
    pub points: Vec<DVector<f64>>,
    pub velocities: Vec<DVector<f64>>,
    pub accelerations: Vec<DVector<f64>>,
}

impl CurvePath {
    pub fn end(&self) -> &DVector<f64> {
        self.points.last().unwrap()
    }

    pub fn end_velocity(&self) -> &DVector<f64> {
        self.velocities.last().unwrap()
    }

    /// Stage samples with cubic Hermite midpoints for position and velocity.
    pub fn samples(&self) -> CurveSamples {
        let n = self.times.len() - 1;
        let mut xs = Vec::with_capacity(n);
        let mut vs = Vec::with_capacity(n);
        for k in 0..n {
            let h = self.times[k + 1] - self.times[k];
            let (x0, x1) = (&self.points[k], &self.points[k + 1]);
            let (v0, v1) = (&self.velocities[k], &self.velocities[k + 1]);
            let (a0, a1) = (&self.accelerations[k], &self.accelerations[k + 1]);
            let xm = (x0 + x1) * 0.5 + (v0 - v1) * (h / 8.0);
            let vm = (v0 + v1) * 0.5 + (a0 - a1) * (h / 8.0);
            xs.push([x0.clone(), xm, x1.clone()]);
            vs.push([v0.clone(), vm, v1.clone()]);
        }
        CurveSamples {
            times: self.times.clone(),
            x: xs,
            v: vs,
        }
    }

    /// Largest relative deviation of `|γ̇|` from its initial value.
    pub fn speed_drift(&self, chart: &ManifoldChart) -> f64 {
        let s0 = chart.norm(self.points[0].as_slice(), &self.velocities[0]);
        self.points
            .iter()
            .zip(&self.velocities)
            .map(|(x, v)| (chart.norm(x.as_slice(), v) - s0).abs() / s0.max(1e-300))
            .fold(0.0, f64::max)
    }
}

fn geodesic_rhs<'a>(chart: &'a ManifoldChart, gam: &'a mut [f64]) -> impl FnMut(f64, &[f64], &mut [f64]) + 'a {
    let n = chart.dim();
    move |_, y, dy| {
        let (x, v) = y.split_at(n);
        chart.christoffel_into(x, gam);
        for k in 0..n {
            dy[k] = v[k];
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += gam[(k * n + i) * n + j] * v[i] * v[j];
                }
            }
            dy[n + k] = -s;
        }
    }
}

/// Integrates `ẍᵏ = −Γᵏ_ij ẋⁱẋʲ` from `(x, v)` over `[0, s_max]` with a step no
/// larger than `step`.
pub fn geodesic(chart: &ManifoldChart, x: &DVector<f64>, v: &DVector<f64>, s_max: f64, step: f64) -> Result<CurvePath> {
    chart.check(x.as_slice())?;
    if v.len() != chart.dim() {
        return Err(Error::Dimension("velocity length differs from chart dimension".into()));
    }
    if !(step > 0.0) || !(s_max >= 0.0) {
        return Err(Error::Config(format!("geodesic needs step > 0 and s_max ≥ 0 (got {step}, {s_max})")));
    }
    let n = chart.dim();
    let steps = ((s_max / step).ceil() as usize).max(1);
    let h = s_max / steps as f64;
    let mut gam = vec![0.0; n * n * n];
    let mut y: Vec<f64> = x.iter().chain(v.iter()).copied().collect();
    let mut rk = Rk4::new(2 * n);
    let mut path = CurvePath {
        times: Vec::with_capacity(steps + 1),
        points: Vec::with_capacity(steps + 1),
        velocities: Vec::with_capacity(steps + 1),
        accelerations: Vec::with_capacity(steps + 1),
    };
    let accel = |chart: &ManifoldChart, x: &DVector<f64>, v: &DVector<f64>| -chart.christoffel(x.as_slice()).contract(v, v);
    path.times.push(0.0);
    path.points.push(x.clone());
    path.velocities.push(v.clone());
    path.accelerations.push(accel(chart, x, v));
    {
        let mut rhs = geodesic_rhs(chart, &mut gam);
        for k in 0..steps {
            rk.step(k as f64 * h, &mut y, h, &mut rhs);
            let s = (k + 1) as f64 * h;
            if y.iter().any(|c| !c.is_finite()) || !chart.contains(&y[..n]) {
                return Err(Error::DomainExit { time: s });
            }
            path.times.push(s);
            path.points.push(DVector::from_column_slice(&y[..n]));
            path.velocities.push(DVector::from_column_slice(&y[n..]));
        }
    }
    for k in 1..path.points.len() {
        let a = accel(chart, &path.points[k], &path.velocities[k]);
        path.accelerations.push(a);
    }
    Ok(path)
}

/// `exp_x(v)` with the default step.
pub fn exp_map(chart: &ManifoldChart, x: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
    exp_map_with(chart, x, v, DEFAULT_STEP)
}

/// `exp_x(v)`: endpoint at `s = 1` of the geodesic with initial velocity `v`.
pub fn exp_map_with(chart: &ManifoldChart, x: &DVector<f64>, v: &DVector<f64>, step: f64) -> Result<DVector<f64>> {
    chart.check(x.as_slice())?;
    let n = chart.dim();
    if v.len() != n {
        return Err(Error::Dimension("velocity length differs from chart dimension".into()));
    }
    if v.iter().all(|c| *c == 0.0) {
        return Ok(x.clone());
    }
    if chart.is_flat_analytic() {
        let y = x + v;
        chart.check(y.as_slice()).map_err(|_| Error::DomainExit { time: 1.0 })?;
        return Ok(y);
    }
    let steps = ((1.0 / step).ceil() as usize).max(1);
    let h = 1.0 / steps as f64;
    let mut gam = vec![0.0; n * n * n];
    let mut y: Vec<f64> = x.iter().chain(v.iter()).copied().collect();
    let mut rk = Rk4::new(2 * n);
    let mut rhs = geodesic_rhs(chart, &mut gam);
    for k in 0..steps {
        rk.step(k as f64 * h, &mut y, h, &mut rhs);
        if y.iter().any(|c| !c.is_finite()) || !chart.contains(&y[..n]) {
            return Err(Error::DomainExit { time: (k + 1) as f64 * h });
        }
    }
    Ok(DVector::from_column_slice(&y[..n]))
}

/// Controls for the shooting solver behind [`log_map`].
#[derive(Clone, Copy, Debug)]
pub struct LogOptions {
    /// Coordinate residual `|exp_x(v) − y|_∞` accepted as converged.
    pub tol: f64,
    pub max_iter: usize,
    /// RK4 step used for every shot.
    pub step: f64,
}

impl Default for LogOptions {
    fn default() -> Self {
        LogOptions {
            tol: 1e-10,
            max_iter: 50,
            step: DEFAULT_STEP,
        }
    }
}

pub fn log_map(chart: &ManifoldChart, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    log_map_with(chart, x, y, &LogOptions::default())
}

/// `exp_x⁻¹(y)` by Newton shooting on the initial velocity, Jacobian by central
/// differences, with backtracking. A converged velocity at least as long as
/// the chart's injectivity hint is rejected.
pub fn log_map_with(chart: &ManifoldChart, x: &DVector<f64>, y: &DVector<f64>, opts: &LogOptions) -> Result<DVector<f64>> {
    chart.check(x.as_slice())?;
    chart.check(y.as_slice())?;
    let v = y - x;
    if v.amax() == 0.0 || chart.is_flat_analytic() {
        return Ok(v);
    }
    let v = match newton_shoot(chart, x, y, v, opts) {
        Ok(v) => v,
        // Continuation along the coordinate segment, each solve warm-started
        // from the previous target.
        Err(first) => {
            let stages = 8;
            let mut v = (y - x) / stages as f64;
            for k in 1..=stages {
                let target = x + (y - x) * (k as f64 / stages as f64);
                let guess = if k == 1 { v.clone() } else { &v * (k as f64 / (k - 1) as f64) };
                match newton_shoot(chart, x, &target, guess, opts) {
                    Ok(w) => v = w,
                    Err(_) => return Err(first),
                }
            }
            v
        }
    };
    if let Some(hint) = chart.injectivity_hint() {
        let len = chart.norm(x.as_slice(), &v);
        if len >= hint {
            return Err(Error::NoConvergence { iterations: opts.max_iter, residual: len - hint });
        }
    }
    Ok(v)
}

fn newton_shoot(chart: &ManifoldChart, x: &DVector<f64>, y: &DVector<f64>, mut v: DVector<f64>, opts: &LogOptions) -> Result<DVector<f64>> {
    let n = chart.dim();
    let shoot = |v: &DVector<f64>| exp_map_with(chart, x, v, opts.step).map(|p| p - y);
    let mut r = match shoot(&v) {
        Ok(r) => r,
        Err(_) => {
            // Start from a short shot along the coordinate difference.
            v *= 0.5;
            shoot(&v).map_err(|_| Error::NoConvergence { iterations: 0, residual: f64::INFINITY })?
        }
    };
    let mut jac = DMatrix::<f64>::zeros(n, n);
    let mut converged = false;
    for it in 0..opts.max_iter {
        if r.amax() <= opts.tol {
            converged = true;
            // One more chord step usually reaches roundoff.
            if it > 0 {
                if let Some(dv) = jac.clone().lu().solve(&(-&r)) {
                    let trial = &v + dv;
                    if let Ok(rt) = shoot(&trial) {
                        if rt.amax() < r.amax() {
                            v = trial;
                            r = rt;
                        }
                    }
                }
            }
            break;
        }
        let d = 1e-6 * (1.0 + v.amax());
        for j in 0..n {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[j] += d;
            vm[j] -= d;
            let col = match (shoot(&vp), shoot(&vm)) {
                (Ok(a), Ok(b)) => (a - b) / (2.0 * d),
                _ => return Err(Error::NoConvergence { iterations: it, residual: r.amax() }),
            };
            jac.set_column(j, &col);
        }
        let dv = jac
            .clone()
            .lu()
            .solve(&(-&r))
            .ok_or(Error::NoConvergence { iterations: it, residual: r.amax() })?;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial = &v + &dv * lambda;
            if let Ok(rt) = shoot(&trial) {
                if rt.norm() < r.norm() {
                    v = trial;
                    r = rt;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(Error::NoConvergence { iterations: it, residual: r.amax() });
        }
    }
    if !converged && r.amax() > opts.tol {
        return Err(Error::NoConvergence { iterations: opts.max_iter, residual: r.amax() });
    }
    Ok(v)
}

/// Parallel transport of contravariant components along the sampled curve;
/// values at every node. Backward direction transports from the last node to
/// the first.
pub fn transport_vectors(chart: &ManifoldChart, samples: &CurveSamples, v: &DVector<f64>, dir: Direction) -> Vec<DVector<f64>> {
    integrate_along(samples, dir, v.clone(), |k, s, w| {
        -chart.christoffel(samples.x[k][s].as_slice()).contract(&samples.v[k][s], w)
    })
}

/// Covariant analogue of [`transport_vectors`]: `ω̇_k = Γʲ_ik ẋⁱ ω_j`.
pub fn transport_covectors(chart: &ManifoldChart, samples: &CurveSamples, w: &DVector<f64>, dir: Direction) -> Vec<DVector<f64>> {
    integrate_along(samples, dir, w.clone(), |k, s, om| {
        chart
            .christoffel(samples.x[k][s].as_slice())
            .along(&samples.v[k][s])
            .tr_mul(om)
    })
}

/// Transport to the end of a geodesic path.
pub fn parallel_transport(chart: &ManifoldChart, path: &CurvePath, v: &DVector<f64>) -> Result<DVector<f64>> {
    chart.check(path.points[0].as_slice())?;
    Ok(transport_vectors(chart, &path.samples(), v, Direction::Forward).pop().unwrap())
}

pub fn parallel_transport_covector(chart: &ManifoldChart, path: &CurvePath, w: &DVector<f64>) -> Result<DVector<f64>> {
    chart.check(path.points[0].as_slice())?;
    Ok(transport_covectors(chart, &path.samples(), w, Direction::Forward).pop().unwrap())
}

/// `∇_X F` at x through the coordinate formula `X(Fᵏ) + Γᵏ_ji Xʲ Fⁱ`, with the
/// directional derivative by five-point differences.
pub fn covariant_derivative_field<F>(chart: &ManifoldChart, field: F, x: &DVector<f64>, dir: &DVector<f64>) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    chart.check(x.as_slice())?;
    let h = 1e-3 * (1.0 + x.amax()) / dir.amax().max(1.0);
    let at = |s: f64| field(&(x + dir * s));
    let dd = (at(-2.0 * h) - at(-h) * 8.0 + at(h) * 8.0 - at(2.0 * h)) / (12.0 * h);
    Ok(dd + chart.christoffel(x.as_slice()).contract(dir, &field(x)))
}

/// `(1/t)(L_{γ(t)→x} F(γ(t)) − F(x))` with `γ(t) = exp_x(tX)`.
pub fn transport_difference_quotient<F>(chart: &ManifoldChart, field: F, x: &DVector<f64>, dir: &DVector<f64>, t: f64, step: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let path = geodesic(chart, x, &(dir * t), 1.0, step)?;
    let back = transport_vectors(chart, &path.samples(), &field(path.end()), Direction::Backward);
    Ok((&back[0] - field(x)) / t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn euclidean_geodesic_is_a_line() {
        let e = ManifoldChart::euclidean(3);
        let p = geodesic(&e, &dv(&[0.0, 0.0, 0.0]), &dv(&[1.0, 0.0, 0.0]), 1.0, 1e-3).unwrap();
        assert!((p.end() - dv(&[1.0, 0.0, 0.0])).amax() < 1e-14);
        assert_eq!(exp_map(&e, &dv(&[1.0, 2.0, 3.0]), &dv(&[0.5, 0.5, 0.5])).unwrap(), dv(&[1.5, 2.5, 3.5]));
    }

    #[test]
    fn sphere_equator_quarter() {
        let s = ManifoldChart::sphere();
        let x = dv(&[PI / 2.0, 0.0]);
        let p = geodesic(&s, &x, &dv(&[0.0, 1.0]), PI / 2.0, 1e-3).unwrap();
        assert!((p.end() - dv(&[PI / 2.0, PI / 2.0])).amax() < 1e-12);
        let q = exp_map(&s, &x, &dv(&[0.0, PI / 2.0])).unwrap();
        assert!((q - dv(&[PI / 2.0, PI / 2.0])).amax() < 1e-12);
    }

    #[test]
    fn hyperbolic_unit_distance_point() {
        let h = ManifoldChart::hyperbolic(1.0);
        let o = dv(&[0.0, 0.0]);
        let p = geodesic(&h, &o, &dv(&[1.0, 0.0]), 1f64.asinh(), 1e-3).unwrap();
        assert!((p.end() - dv(&[1.0, 0.0])).amax() < 1e-12);
        let v = log_map(&h, &o, &dv(&[1.0, 0.0])).unwrap();
        assert!((h.norm(o.as_slice(), &v) - 1f64.asinh()).abs() < 1e-10);
        assert!(v[1].abs() < 1e-12 && v[0] > 0.0);
    }

    #[test]
    fn log_of_same_point_is_zero() {
        for c in [ManifoldChart::sphere(), ManifoldChart::hyperbolic(1.0)] {
            let x = dv(&[1.0, 0.3]);
            assert_eq!(log_map(&c, &x, &x).unwrap().amax(), 0.0);
        }
    }

    #[test]
    fn sphere_log_refuses_long_arc() {
        let s = ManifoldChart::sphere();
        let r = log_map(&s, &dv(&[PI / 2.0, 0.0]), &dv(&[PI / 2.0, 1.5 * PI]));
        assert!(matches!(r, Err(Error::NoConvergence { .. })));
    }

    #[test]
    fn exit_reports_time() {
        let s = ManifoldChart::sphere();
        match geodesic(&s, &dv(&[0.5, 0.0]), &dv(&[-1.0, 0.0]), 1.0, 1e-3) {
            Err(Error::DomainExit { time }) => assert!((time - 0.49).abs() < 2e-3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn transport_along_equator_is_constant() {
        let s = ManifoldChart::sphere();
        let p = geodesic(&s, &dv(&[PI / 2.0, 0.0]), &dv(&[0.0, 1.0]), 1.0, 1e-3).unwrap();
        let w = parallel_transport(&s, &p, &dv(&[1.0, 0.5])).unwrap();
        assert!((w - dv(&[1.0, 0.5])).amax() < 1e-12);
    }

    #[test]
    fn covector_transport_pairs_invariantly() {
        let h = ManifoldChart::hyperbolic(1.0);
        let p = geodesic(&h, &dv(&[0.2, -0.1]), &dv(&[0.7, 0.4]), 1.0, 1e-3).unwrap();
        let v = dv(&[0.3, -1.0]);
        let w = dv(&[2.0, 0.5]);
        let lv = parallel_transport(&h, &p, &v).unwrap();
        let lw = parallel_transport_covector(&h, &p, &w).unwrap();
        assert!((lv.dot(&lw) - v.dot(&w)).abs() < 1e-12);
    }

    #[test]
    fn covariant_derivative_linear_field() {
        let e = ManifoldChart::euclidean(2);
        let d = covariant_derivative_field(&e, |x| x.clone(), &dv(&[0.3, 0.4]), &dv(&[1.0, 0.0])).unwrap();
        assert!((d - dv(&[1.0, 0.0])).amax() < 1e-12);
    }

    #[test]
    fn difference_quotient_converges_to_gamma_formula() {
        let s = ManifoldChart::sphere();
        let x = dv(&[PI / 4.0, 0.0]);
        let unit_azimuthal = |p: &DVector<f64>| dv(&[0.0, 1.0 / p[0].sin()]);
        // The unit azimuthal field is parallel along meridians.
        let meridian = covariant_derivative_field(&s, unit_azimuthal, &x, &dv(&[1.0, 0.0])).unwrap();
        assert!(meridian.amax() < 1e-8);
        let field = |p: &DVector<f64>| dv(&[p[1].sin() * p[0], p[0] * p[0]]);
        let dir = dv(&[1.0, 0.5]);
        let exact = covariant_derivative_field(&s, field, &x, &dir).unwrap();
        let errs: Vec<f64> = [0.04, 0.02, 0.01]
            .iter()
            .map(|t| (transport_difference_quotient(&s, field, &x, &dir, *t, 1e-3).unwrap() - &exact).amax())
            .collect();
        let slope = crate::numeric::loglog_slope(&[0.04, 0.02, 0.01], &errs);
        assert!(slope > 0.9, "slope {slope}, errs {errs:?}");
    }
}
