//! Seeded geometry self-checks for a chart: exp/log, transport, geodesic
//! speed, the curvature transport identity and the squared-distance
//! derivatives. Each check becomes one [`ConditionReport`]; ids ending in
//! `_min` are lower bounds (hold iff `value ≥ tol`).

use std::f64::consts::PI;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conditions::{ConditionReport, Verdict, Witness};
use crate::distance::{
    curvature_transport_identity_check, gauss_2d_identity_check, grad_rho2_fd_check, hessian_rho2_diag_check, log_symmetry_check, third_derivative_vanishing_check,
    DEFAULT_SWEEP,
};
use crate::error::{Error, Result};
use crate::manifold::{exp_map, geodesic, log_map, transport_vectors, Direction, ManifoldChart};

const ROUNDTRIP_TOL: f64 = 1e-6;
const DRIFT_TOL: f64 = 1e-8;
const IDENTITY_REL_TOL: f64 = 0.05;
const SLOPE_MIN: f64 = 0.9;
const FLAT_TOL: f64 = 1e-10;
/// Steps for the transport identity, one octave below the default sweep so
/// all four points sit in the first order regime.
pub const IDENTITY_SWEEP: [f64; 4] = [0.05, 0.025, 0.0125, 0.00625];
/// Covariant gradient `c` of the test field at the base point. The leading
/// error of the quotient is proportional to `∇_V F`; a field that is nearly
/// parallel there leaves the sweep pre-asymptotic.
const FIELD_GRADIENT: f64 = 0.5;

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

/// A point of the working region: the equatorial band on spheres, a box
/// around the origin otherwise.
fn sample_point(chart: &ManifoldChart, rng: &mut ChaCha8Rng, scale: f64) -> DVector<f64> {
    let n = chart.dim();
    match chart.constant_curvature() {
        Some(k) if k > 0.0 => dv(&[PI / 2.0 + 0.9 * scale * rng.gen_range(-1.0..1.0), 2.0 * rng.gen_range(-1.0..1.0)]),
        Some(k) if k < 0.0 => DVector::from_fn(n, |_, _| 1.5 * scale * rng.gen_range(-1.0..1.0)),
        _ => DVector::from_fn(n, |_, _| 3.0 * scale * rng.gen_range(-1.0..1.0)),
    }
}

fn unit_direction(chart: &ManifoldChart, x: &DVector<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let e = chart.orthonormal_frame(x.as_slice());
    let c = DVector::from_fn(chart.dim(), |_, _| rng.gen_range(-1.0..1.0));
    let c = if c.norm() < 1e-3 { DVector::from_fn(chart.dim(), |i, _| if i == 0 { 1.0 } else { 0.0 }) } else { c.normalize() };
    e * c
}

/// On round spheres, whether the great circle through x along v keeps 0.4 rad
/// away from the chart's poles.
fn stays_regular(chart: &ManifoldChart, x: &DVector<f64>, v: &DVector<f64>) -> bool {
    if !matches!(chart.constant_curvature(), Some(k) if k > 0.0) || v.amax() == 0.0 {
        return true;
    }
    let speed = chart.norm(x.as_slice(), v);
    let s = x[0].sin();
    s * s * v[1].abs() / speed >= 0.4f64.sin()
}

fn draw_regular(chart: &ManifoldChart, rng: &mut ChaCha8Rng, scale: f64) -> (DVector<f64>, DVector<f64>) {
    loop {
        let x = sample_point(chart, rng, scale);
        let v = unit_direction(chart, &x, rng);
        if stays_regular(chart, &x, &v) {
            return (x, v);
        }
    }
}

fn worst_of(id: &str, values: impl Iterator<Item = (f64, DVector<f64>)>, tol: f64) -> ConditionReport {
    let (v, x) = values.fold((0.0, DVector::zeros(0)), |a, b| if b.0 > a.0 { b } else { a });
    let w = (!x.is_empty()).then(|| Witness {
        t: None,
        control: Some(x.as_slice().to_vec()),
        value: v,
        note: "sample point".into(),
    });
    ConditionReport::upper(id, v, tol, w.into_iter().collect())
}

/// `|exp_x(log_x y) − y|` and `|log_x(exp_x v)| − |v|` over `pairs` draws.
pub fn roundtrip_check(chart: &ManifoldChart, pairs: usize, seed: u64) -> Result<ConditionReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reach = chart.injectivity_hint().unwrap_or(2.0);
    let mut rows = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let (x, dir) = draw_regular(chart, &mut rng, 1.0);
        let v = dir * (rng.gen_range(0.0..0.8) * reach);
        let y = exp_map(chart, &x, &v)?;
        let w = log_map(chart, &x, &y)?;
        let y2 = exp_map(chart, &x, &w)?;
        rows.push(((&y2 - &y).amax().max(chart.norm(x.as_slice(), &(&w - &v))), x));
    }
    Ok(worst_of("exp_log_roundtrip", rows.into_iter(), ROUNDTRIP_TOL))
}

/// Change of `⟨p, q⟩` under transport along unit-time geodesics.
pub fn transport_isometry_check(chart: &ManifoldChart, draws: usize, seed: u64) -> Result<ConditionReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(draws);
    for _ in 0..draws {
        let (x, dir) = draw_regular(chart, &mut rng, 0.5);
        let v = dir * rng.gen_range(0.2..1.5);
        let path = geodesic(chart, &x, &v, 1.0, 1e-3)?;
        let smp = path.samples();
        let p = unit_direction(chart, &x, &mut rng);
        let q = unit_direction(chart, &x, &mut rng);
        let lp = transport_vectors(chart, &smp, &p, Direction::Forward).pop().unwrap();
        let lq = transport_vectors(chart, &smp, &q, Direction::Forward).pop().unwrap();
        let end = path.end().as_slice();
        let drift = (chart.inner(end, &lp, &lq) - chart.inner(x.as_slice(), &p, &q))
            .abs()
            .max((chart.inner(end, &lp, &lp) - 1.0).abs());
        rows.push((drift, x));
    }
    Ok(worst_of("transport_isometry_drift", rows.into_iter(), DRIFT_TOL))
}

/// Relative change of `|γ̇|` along unit-speed geodesics.
pub fn geodesic_speed_check(chart: &ManifoldChart, draws: usize, seed: u64) -> Result<ConditionReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s_max = if matches!(chart.constant_curvature(), Some(k) if k < 0.0) { 2.0 } else { 5.0 };
    let mut rows = Vec::with_capacity(draws);
    for _ in 0..draws {
        let (x, v) = draw_regular(chart, &mut rng, 0.3);
        let path = geodesic(chart, &x, &v, s_max, 1e-3)?;
        rows.push((path.speed_drift(chart), x));
    }
    Ok(worst_of("geodesic_speed_drift", rows.into_iter(), DRIFT_TOL))
}

/// The double transport quotient against `½R(X,V)F` for seeded draws. Flat
/// charts report the largest sweep value; curved charts the worst relative
/// error and the smallest observed order between the two finest steps. Two-dimensional charts also compare
/// the Gauss form with the general form.
pub fn curvature_identity_checks(chart: &ManifoldChart, draws: usize, seed: u64) -> Result<Vec<ConditionReport>> {
    curvature_identity_checks_with(chart, draws, seed, &IDENTITY_SWEEP)
}

/// [`curvature_identity_checks`] on a caller-chosen decreasing step sweep.
pub fn curvature_identity_checks_with(chart: &ManifoldChart, draws: usize, seed: u64, sweep: &[f64]) -> Result<Vec<ConditionReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat = chart.constant_curvature() == Some(0.0);
    let (mut rel, mut slope, mut gauss, mut flat_max) = ((0.0f64, None), (f64::INFINITY, None), 0.0f64, 0.0f64);
    let n = chart.dim();
    let mut done = 0;
    while done < draws {
        let x = sample_point(chart, &mut rng, if flat { 0.3 } else { 0.66 });
        let e = chart.orthonormal_frame(x.as_slice());
        let angle = |rng: &mut ChaCha8Rng| -> (f64, f64) { (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.5..1.5)) };
        let (a0, a1, a2) = (angle(&mut rng), angle(&mut rng), angle(&mut rng));
        if n >= 2 && (a0.0 - a1.0).sin().abs() <= 0.3 {
            continue;
        }
        let dir = |(a, l): (f64, f64)| {
            if n >= 2 {
                (e.column(0) * a.cos() + e.column(1) * a.sin()) * l
            } else {
                e.column(0) * l
            }
        };
        let (xv, vv, fv) = (dir(a0), dir(a1), dir(a2));
        // ∇F(x) = c·Id exactly: the Christoffel correction cancels the
        // connection term at x.
        let field = {
            let (fv, x0, gam) = (fv.clone(), x.clone(), chart.christoffel(x.as_slice()));
            move |p: &DVector<f64>| {
                let d = p - &x0;
                &fv + &d * FIELD_GRADIENT - gam.contract(&d, &fv)
            }
        };
        let r = curvature_transport_identity_check(chart, &x, &xv, &vv, &field, sweep)?;
        done += 1;
        if flat {
            flat_max = flat_max.max(r.sweep.max());
            continue;
        }
        if r.rel_err > rel.0 {
            rel = (r.rel_err, Some(x.clone()));
        }
        if r.sweep.tail_slope() < slope.0 {
            slope = (r.sweep.tail_slope(), Some(x.clone()));
        }
        if n == 2 {
            let gc = gauss_2d_identity_check(chart, &x, &xv, &vv, &field, sweep)?;
            gauss = gauss.max(gc.rhs_agreement);
        }
    }
    let at = |x: Option<DVector<f64>>, v: f64| {
        x.map(|x| Witness {
            t: None,
            control: Some(x.as_slice().to_vec()),
            value: v,
            note: "sample point".into(),
        })
        .into_iter()
        .collect()
    };
    if flat {
        return Ok(vec![ConditionReport::upper("curvature_identity_flat", flat_max, FLAT_TOL, vec![])]);
    }
    let mut out = vec![
        ConditionReport::upper("curvature_identity_rel_err", rel.0, IDENTITY_REL_TOL, at(rel.1, rel.0)),
        ConditionReport::lower("curvature_identity_slope_min", slope.0, SLOPE_MIN, at(slope.1, slope.0)),
    ];
    if n == 2 {
        out.push(ConditionReport::upper("gauss_form_agreement", gauss, 1e-8, vec![]));
    }
    Ok(out)
}

/// Squared-distance identities at seeded points: the diagonal Hessian, the
/// gradient and log-differential convergence orders, and the vanishing third
/// derivative.
pub fn distance_checks(chart: &ManifoldChart, points: usize, seed: u64) -> Result<Vec<ConditionReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flat = chart.constant_curvature() == Some(0.0);
    let (mut hess, mut grad_slope, mut sym_slope, mut third_slope, mut third_flat) = (0.0f64, f64::INFINITY, f64::INFINITY, f64::INFINITY, 0.0f64);
    let mut third_decreasing = true;
    for _ in 0..points {
        let x = sample_point(chart, &mut rng, 0.5);
        hess = hess.max(hessian_rho2_diag_check(chart, &x)?);
        let to = unit_direction(chart, &x, &mut rng) * rng.gen_range(0.4..0.9);
        let y = exp_map(chart, &x, &to)?;
        let a = unit_direction(chart, &x, &mut rng);
        let third = third_derivative_vanishing_check(chart, &x, &DEFAULT_SWEEP)?;
        if flat {
            third_flat = third_flat.max(third.max());
            continue;
        }
        grad_slope = grad_slope.min(grad_rho2_fd_check(chart, &x, &y, &a, &[0.04, 0.02, 0.01, 0.005])?.slope);
        let b = unit_direction(chart, &y, &mut rng);
        sym_slope = sym_slope.min(log_symmetry_check(chart, &x, &y, &a, &b, &[0.08, 0.04, 0.02, 0.01])?.slope);
        third_slope = third_slope.min(third.slope);
        third_decreasing &= third.errors.windows(2).all(|w| w[1] < w[0]);
    }
    let mut out = vec![ConditionReport::upper("hessian_rho2_diagonal", hess, 1e-4, vec![])];
    if flat {
        out.push(ConditionReport::upper("third_derivative_flat", third_flat, FLAT_TOL, vec![]));
        return Ok(out);
    }
    out.push(ConditionReport::lower("grad_rho2_slope_min", grad_slope, 1.8, vec![]));
    out.push(ConditionReport::lower("log_differential_symmetry_slope_min", sym_slope, 1.8, vec![]));
    let mut t = ConditionReport::lower("third_derivative_slope_min", third_slope, SLOPE_MIN, vec![]);
    if !third_decreasing {
        t.verdict = Verdict::Violated;
        t.witnesses.push(Witness {
            t: None,
            control: None,
            value: third_slope,
            note: "sweep errors not decreasing".into(),
        });
    }
    out.push(t);
    Ok(out)
}

/// Every geometry check for one chart.
pub fn geometry_suite(chart: &ManifoldChart, seed: u64) -> Result<Vec<ConditionReport>> {
    if chart.dim() < 2 {
        return Err(Error::Config("geometry suite needs a chart of dimension at least 2".into()));
    }
    let mut out = vec![
        roundtrip_check(chart, 100, seed)?,
        transport_isometry_check(chart, 100, seed + 1)?,
        geodesic_speed_check(chart, 100, seed + 2)?,
    ];
    out.extend(curvature_identity_checks(chart, 20, seed + 3)?);
    out.extend(distance_checks(chart, 5, seed + 4)?);
    Ok(out)
}
