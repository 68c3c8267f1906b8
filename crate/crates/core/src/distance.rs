//! The squared distance `ρ²(x, y)` and its derivatives, plus numerical checks
//! of the identities it satisfies on and near the diagonal.
//!
//! Every higher derivative is taken along geodesic rays: for a geodesic `c`,
//! `d²/dr² f(c(r)) = ∇²f(ċ, ċ)`, and mixed slots come from polarization.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::manifold::{
    covariant_derivative_field, exp_map, geodesic, log_map, transport_vectors, CotangentVec, Direction,
    ManifoldChart, DEFAULT_STEP,
};
use crate::numeric::{loglog_slope, spd_sqrt};

/// Floor used in relative errors.
pub const EPS_FLOOR: f64 = 1e-10;

/// Which argument of `ρ²(x, y)` a derivative acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    First,
    Second,
}

impl TryFrom<u8> for Slot {
    type Error = Error;

    fn try_from(v: u8) -> Result<Slot> {
        match v {
            1 => Ok(Slot::First),
            2 => Ok(Slot::Second),
            _ => Err(Error::Precondition(format!("slot must be 1 or 2, got {v}"))),
        }
    }
}

/// Errors of a check over a decreasing step sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub steps: Vec<f64>,
    pub errors: Vec<f64>,
    /// Fitted log-log slope of `errors` against `steps` (NaN if any error is 0).
    pub slope: f64,
}

impl SweepReport {
    pub fn new(steps: Vec<f64>, errors: Vec<f64>) -> Self {
        let slope = loglog_slope(&steps, &errors);
        SweepReport { steps, errors, slope }
    }

    pub fn best(&self) -> f64 {
        self.errors.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }

    /// Observed order between the two finest steps.
    pub fn tail_slope(&self) -> f64 {
        let k = self.steps.len();
        if k < 2 {
            return f64::NAN;
        }
        loglog_slope(&self.steps[k - 2..], &self.errors[k - 2..])
    }
}

/// Default sweep for the transport and fourth-order checks.
pub const DEFAULT_SWEEP: [f64; 4] = [0.2, 0.1, 0.05, 0.025];

pub fn rho2(chart: &ManifoldChart, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    let l = log_map(chart, x, y)?;
    Ok(chart.inner(x.as_slice(), &l, &l))
}

/// `∇₁ρ²(x,y) = −2 (exp_x⁻¹ y)♭` at x, or `∇₂ρ²(x,y) = −2 (exp_y⁻¹ x)♭` at y.
pub fn grad_rho2(chart: &ManifoldChart, x: &DVector<f64>, y: &DVector<f64>, which: Slot) -> Result<CotangentVec> {
    let (base, other) = match which {
        Slot::First => (x, y),
        Slot::Second => (y, x),
    };
    let l = log_map(chart, base, other)?;
    Ok(CotangentVec::new(base.clone(), chart.lower(base.as_slice(), &l) * -2.0))
}

/// Second derivative of `f` along the geodesic `r ↦ exp_p(r w)`, at r = 0.
fn ray_second<F>(chart: &ManifoldChart, p: &DVector<f64>, w: &DVector<f64>, h: f64, f: F) -> Result<f64>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    let mut vals = [0.0; 5];
    for (i, r) in [-2.0, -1.0, 0.0, 1.0, 2.0].iter().enumerate() {
        vals[i] = f(&exp_map(chart, p, &(w * (r * h)))?)?;
    }
    Ok(second_from_samples(&vals, h))
}

fn second_from_samples(v: &[f64; 5], h: f64) -> f64 {
    (-v[0] + 16.0 * v[1] - 30.0 * v[2] + 16.0 * v[3] - v[4]) / (12.0 * h * h)
}

/// `∇²f(p)(a, b)` by polarization of second derivatives along rays.
fn polarized_hessian<F>(chart: &ManifoldChart, p: &DVector<f64>, a: &DVector<f64>, b: &DVector<f64>, h: f64, f: &F) -> Result<f64>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    let qp = ray_second(chart, p, &(a + b), h, f)?;
    let qm = ray_second(chart, p, &(a - b), h, f)?;
    Ok(0.25 * (qp - qm))
}

fn hessian_matrix<F>(chart: &ManifoldChart, p: &DVector<f64>, h: f64, f: &F) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    let n = chart.dim();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let a = DVector::from_fn(n, |k, _| if k == i { 1.0 } else { 0.0 });
            let b = DVector::from_fn(n, |k, _| if k == j { 1.0 } else { 0.0 });
            let v = if i == j {
                ray_second(chart, p, &a, h, f)?
            } else {
                polarized_hessian(chart, p, &a, &b, h, f)?
            };
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(m)
}

/// Gradients and Hessians of `ρ²` at a pair of points, Hessians in chart
/// coordinates at their base points (`hess12[(i, j)]` pairs `∂_i` at x with
/// `∂_j` at y).
#[derive(Clone, Debug)]
pub struct Rho2Derivatives {
    pub grad1: CotangentVec,
    pub grad2: CotangentVec,
    pub hess11: DMatrix<f64>,
    pub hess22: DMatrix<f64>,
    pub hess12: DMatrix<f64>,
}

impl Rho2Derivatives {
    /// Hessians by fourth-order differences with ray step `h`.
    pub fn at(chart: &ManifoldChart, x: &DVector<f64>, y: &DVector<f64>, h: f64) -> Result<Self> {
        let n = chart.dim();
        let grad1 = grad_rho2(chart, x, y, Slot::First)?;
        let grad2 = grad_rho2(chart, x, y, Slot::Second)?;
        let hess11 = hessian_matrix(chart, x, h, &|z: &DVector<f64>| rho2(chart, z, y))?;
        let hess22 = hessian_matrix(chart, y, h, &|z: &DVector<f64>| rho2(chart, x, z))?;
        let mut hess12 = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let a = DVector::from_fn(n, |k, _| if k == i { 1.0 } else { 0.0 });
                let b = DVector::from_fn(n, |k, _| if k == j { 1.0 } else { 0.0 });
                // d/ds of the y-slot gradient contracted with ∂_j, along exp_x(s∂_i).
                let side = |s: f64| -> Result<f64> {
                    let xs = exp_map(chart, x, &(&a * s))?;
                    Ok(grad_rho2(chart, &xs, y, Slot::Second)?.apply(&b))
                };
                let vals = [side(-2.0 * h)?, side(-h)?, side(h)?, side(2.0 * h)?];
                hess12[(i, j)] = (vals[0] - 8.0 * vals[1] + 8.0 * vals[2] - vals[3]) / (12.0 * h);
            }
        }
        Ok(Rho2Derivatives {
            grad1,
            grad2,
            hess11,
            hess22,
            hess12,
        })
    }
}

/// Worst deviation of `∇ᵢ²ρ²(x,x)` from `2g(x)` over both slots. The Hessians
/// are evaluated at a pair `(x, y)` with `y = x`, so the rays leave the
/// diagonal in one argument only.
pub fn hessian_rho2_diag_check(chart: &ManifoldChart, x: &DVector<f64>) -> Result<f64> {
    let d = Rho2Derivatives::at(chart, x, x, 2e-2)?;
    let g = chart.metric_at(x.as_slice())?;
    let r1 = (&d.hess11 - &g * 2.0).amax();
    let r2 = (&d.hess22 - &g * 2.0).amax();
    Ok(r1.max(r2))
}

/// Third derivative of `ρ²(·, y_h)` along geodesics from x, with `y_h` at
/// distance h from x; it tends to the diagonal value `∇₁³ρ²(x,x) = 0`. The
/// error at each h is the worst over three directions, with difference step h/2.
pub fn third_derivative_vanishing_check(chart: &ManifoldChart, x: &DVector<f64>, steps: &[f64]) -> Result<SweepReport> {
    let e = chart.orthonormal_frame(x.as_slice());
    let e1 = e.column(0).into_owned();
    let e2 = if chart.dim() > 1 { e.column(1).into_owned() } else { e1.clone() };
    let dirs = [e1.clone(), e2.clone(), (&e1 + &e2) / 2f64.sqrt()];
    let towards = if chart.dim() > 1 { &e1 * 0.6 + &e2 * 0.8 } else { e1.clone() };
    let mut errors = Vec::with_capacity(steps.len());
    for &h in steps {
        let y = exp_map(chart, x, &(&towards * h))?;
        let mut worst: f64 = 0.0;
        for a in &dirs {
            let mut vals = [0.0; 5];
            let d = 0.5 * h;
            for (i, r) in [-2.0, -1.0, 0.0, 1.0, 2.0].iter().enumerate() {
                vals[i] = rho2(chart, &exp_map(chart, x, &(a * (r * d)))?, &y)?;
            }
            let third = (vals[4] - 2.0 * vals[3] + 2.0 * vals[1] - vals[0]) / (2.0 * d * d * d);
            worst = worst.max(third.abs());
        }
        errors.push(worst);
    }
    Ok(SweepReport::new(steps.to_vec(), errors))
}

/// `|grad_rho2(x,y)·a − d/ds ρ²(exp_x(s a), y)|` with central differences of
/// step h; second-order in h.
pub fn grad_rho2_fd_check(chart: &ManifoldChart, x: &DVector<f64>, y: &DVector<f64>, a: &DVector<f64>, steps: &[f64]) -> Result<SweepReport> {
    let g = grad_rho2(chart, x, y, Slot::First)?.apply(a);
    let mut errors = Vec::with_capacity(steps.len());
    for &h in steps {
        let p = exp_map(chart, x, &(a * h))?;
        let m = exp_map(chart, x, &(a * -h))?;
        let fd = (rho2(chart, &p, y)? - rho2(chart, &m, y)?) / (2.0 * h);
        errors.push((fd - g).abs());
    }
    Ok(SweepReport::new(steps.to_vec(), errors))
}

/// `|L_{xy} exp_x⁻¹y + exp_y⁻¹x|` measured at y.
pub fn log_transport_sign_residual(chart: &ManifoldChart, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    let l = log_map(chart, x, y)?;
    let path = geodesic(chart, x, &l, 1.0, DEFAULT_STEP)?;
    let moved = transport_vectors(chart, &path.samples(), &l, Direction::Forward).pop().unwrap();
    let back = log_map(chart, y, x)?;
    Ok(chart.norm(y.as_slice(), &(moved + back)))
}

/// `|⟨d exp_x⁻¹|_y Y, X⟩ − ⟨d exp_y⁻¹|_x X, Y⟩|` with both differentials by
/// central differences of step h.
pub fn log_symmetry_check(
    chart: &ManifoldChart,
    x: &DVector<f64>,
    y: &DVector<f64>,
    xv: &DVector<f64>,
    yv: &DVector<f64>,
    steps: &[f64],
) -> Result<SweepReport> {
    let mut errors = Vec::with_capacity(steps.len());
    for &h in steps {
        let dlx = (log_map(chart, x, &exp_map(chart, y, &(yv * h))?)? - log_map(chart, x, &exp_map(chart, y, &(yv * -h))?)?) / (2.0 * h);
        let dly = (log_map(chart, y, &exp_map(chart, x, &(xv * h))?)? - log_map(chart, y, &exp_map(chart, x, &(xv * -h))?)?) / (2.0 * h);
        let a = chart.inner(x.as_slice(), &dlx, xv);
        let b = chart.inner(y.as_slice(), &dly, yv);
        errors.push((a - b).abs());
    }
    Ok(SweepReport::new(steps.to_vec(), errors))
}

/// Parallel transport of `v` from a to b along the minimizing geodesic.
pub fn transport_between(chart: &ManifoldChart, a: &DVector<f64>, b: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
    let l = log_map(chart, a, b)?;
    if l.iter().all(|c| *c == 0.0) {
        return Ok(v.clone());
    }
    let path = geodesic(chart, a, &l, 1.0, DEFAULT_STEP)?;
    Ok(transport_vectors(chart, &path.samples(), v, Direction::Forward).pop().unwrap())
}

/// Two-parameter transport quotient
/// `(1/(τs)) [L_{γ₁(τ)x} L_{γ₂(s)γ₁(τ)} F(γ₂(s)) − L_{γ₂(s)x} F(γ₂(s))]`
/// with `γ₁(τ) = exp_x(τX)`, `γ₂(s) = exp_x(sV)`. It equals the finite-step
/// version of `∇_X (d_x(L_{x·}F(x)) V)`: the `F(x)` terms cancel because
/// transport out and back along the same geodesic is the identity.
pub fn double_transport_quotient<F>(chart: &ManifoldChart, x: &DVector<f64>, xv: &DVector<f64>, vv: &DVector<f64>, field: &F, tau: f64, s: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let g1 = exp_map(chart, x, &(xv * tau))?;
    let g2 = exp_map(chart, x, &(vv * s))?;
    let f2 = field(&g2);
    let via = transport_between(chart, &g1, x, &transport_between(chart, &g2, &g1, &f2)?)?;
    let direct = transport_between(chart, &g2, x, &f2)?;
    Ok((via - direct) / (tau * s))
}

/// Result of a vector identity check over a step sweep.
#[derive(Clone, Debug)]
pub struct IdentityCheck {
    /// Finite-step left-hand side at the step with the smallest error.
    pub lhs: DVector<f64>,
    pub rhs: DVector<f64>,
    /// Relative error at the best step, floored by [`EPS_FLOOR`].
    pub rel_err: f64,
    pub sweep: SweepReport,
}

/// Compares the double transport quotient against `½R(X,V)F(x)` over `steps`
/// (τ = s = h).
pub fn curvature_transport_identity_check<F>(
    chart: &ManifoldChart,
    x: &DVector<f64>,
    xv: &DVector<f64>,
    vv: &DVector<f64>,
    field: &F,
    steps: &[f64],
) -> Result<IdentityCheck>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let rhs = chart.curvature_at(x.as_slice())?.apply(xv, vv, &field(x)) * 0.5;
    identity_sweep(chart, x, rhs, steps, |h| double_transport_quotient(chart, x, xv, vv, field, h, h))
}

fn identity_sweep<L>(chart: &ManifoldChart, x: &DVector<f64>, rhs: DVector<f64>, steps: &[f64], lhs_at: L) -> Result<IdentityCheck>
where
    L: Fn(f64) -> Result<DVector<f64>>,
{
    let scale = chart.norm(x.as_slice(), &rhs).max(EPS_FLOOR);
    let mut errors = Vec::with_capacity(steps.len());
    let mut best: Option<(f64, DVector<f64>)> = None;
    for &h in steps {
        let lhs = lhs_at(h)?;
        let err = chart.norm(x.as_slice(), &(&lhs - &rhs));
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, lhs.clone()));
        }
        errors.push(err);
    }
    let (err, lhs) = best.ok_or_else(|| Error::Precondition("empty step sweep".into()))?;
    Ok(IdentityCheck {
        lhs,
        rhs,
        rel_err: err / scale,
        sweep: SweepReport::new(steps.to_vec(), errors),
    })
}

/// Two-dimensional form of the transport identity: both `½k(⟨F,V⊥⟩X − ⟨F,X⟩V⊥)`
/// (with `V⊥` the part of V orthogonal to X) and the general right-hand side,
/// next to the quotient sweep.
#[derive(Clone, Debug)]
pub struct GaussCheck {
    pub gauss_rhs: DVector<f64>,
    /// `|gauss_rhs − ½R(X,V)F|`.
    pub rhs_agreement: f64,
    pub identity: IdentityCheck,
}

pub fn gauss_2d_identity_check<F>(
    chart: &ManifoldChart,
    x: &DVector<f64>,
    xv: &DVector<f64>,
    vv: &DVector<f64>,
    field: &F,
    steps: &[f64],
) -> Result<GaussCheck>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if chart.dim() != 2 {
        return Err(Error::Dimension(format!("Gaussian curvature form needs a 2-dimensional chart, got {}", chart.dim())));
    }
    let p = x.as_slice();
    let f = field(x);
    let xn = chart.norm(p, xv);
    let vperp = if xn > 0.0 {
        vv - xv * (chart.inner(p, vv, xv) / (xn * xn))
    } else {
        vv.clone()
    };
    let gauss_rhs = if xn == 0.0 || chart.norm(p, &vperp) == 0.0 {
        DVector::zeros(2)
    } else {
        let e = chart.orthonormal_frame(p);
        let k = chart.sectional_curvature(p, &e.column(0).into_owned(), &e.column(1).into_owned())?;
        (xv * chart.inner(p, &f, &vperp) - &vperp * chart.inner(p, &f, xv)) * (0.5 * k)
    };
    let identity = curvature_transport_identity_check(chart, x, xv, vv, field, steps)?;
    let rhs_agreement = chart.norm(p, &(&gauss_rhs - &identity.rhs));
    Ok(GaussCheck {
        gauss_rhs,
        rhs_agreement,
        identity,
    })
}

/// The two fourth-order terms of `ρ²` at the diagonal, by nested differences
/// with step `h` at every level.
///
/// `third_term = (∇_V ∇²φ)(F, V)` for `φ(y) = ∇₁ρ²(x,y)(X) = −2⟨X, exp_x⁻¹y⟩`,
/// taken along `c(t) = exp_x(tV)` with F transported and `ċ` parallel.
/// `mixed_term = d²/dt² ∇₁²ρ²(x, c(t))(X, F)`.
#[derive(Clone, Debug)]
pub struct FourthOrderTerms {
    pub third_term: f64,
    pub mixed_term: f64,
}

pub fn fourth_order_terms(chart: &ManifoldChart, x: &DVector<f64>, xv: &DVector<f64>, fv: &DVector<f64>, vv: &DVector<f64>, h: f64) -> Result<FourthOrderTerms> {
    if vv.iter().all(|c| *c == 0.0) {
        return Ok(FourthOrderTerms {
            third_term: 0.0,
            mixed_term: 0.0,
        });
    }
    let gx = chart.metric_at(x.as_slice())?;
    let xlow = &gx * xv;
    let phi = |y: &DVector<f64>| -> Result<f64> { Ok(-2.0 * xlow.dot(&log_map(chart, x, y)?)) };
    let span = 2.0 * h;
    let steps = 8usize;
    let fwd = geodesic(chart, x, vv, span, span / steps as f64 / 25.0)?;
    let bwd = geodesic(chart, x, &-vv, span, span / steps as f64 / 25.0)?;
    // Node values at t = ±h, ±2h of position, velocity and transported F.
    let at = |t: f64| -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
        if t == 0.0 {
            return Ok((x.clone(), vv.clone(), fv.clone()));
        }
        let (path, sign) = if t > 0.0 { (&fwd, 1.0) } else { (&bwd, -1.0) };
        let k = ((t.abs() / span) * (path.times.len() - 1) as f64).round() as usize;
        let smp = path.samples();
        let f = transport_vectors(chart, &smp, fv, Direction::Forward);
        Ok((path.points[k].clone(), &path.velocities[k] * sign, f[k].clone()))
    };
    let hess_phi = |t: f64| -> Result<f64> {
        let (p, v, f) = at(t)?;
        polarized_hessian(chart, &p, &f, &v, h, &phi)
    };
    let third_term = {
        let v = [hess_phi(-2.0 * h)?, hess_phi(-h)?, hess_phi(h)?, hess_phi(2.0 * h)?];
        (v[0] - 8.0 * v[1] + 8.0 * v[2] - v[3]) / (12.0 * h)
    };
    let hess1 = |t: f64| -> Result<f64> {
        let (c, _, _) = at(t)?;
        polarized_hessian(chart, x, xv, fv, h, &|z: &DVector<f64>| rho2(chart, z, &c))
    };
    let mixed_term = {
        let v = [hess1(-2.0 * h)?, hess1(-h)?, hess1(0.0)?, hess1(h)?, hess1(2.0 * h)?];
        second_from_samples(&v, h)
    };
    Ok(FourthOrderTerms { third_term, mixed_term })
}

/// Scalar identity check over a sweep.
#[derive(Clone, Debug)]
pub struct ScalarCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub rel_err: f64,
    pub sweep: SweepReport,
}

/// Sum of the two fourth-order terms against `2R(X,V,F,V)`.
pub fn fourth_order_identity_check(chart: &ManifoldChart, x: &DVector<f64>, xv: &DVector<f64>, fv: &DVector<f64>, vv: &DVector<f64>, steps: &[f64]) -> Result<ScalarCheck> {
    let g = chart.metric_at(x.as_slice())?;
    let rhs = 2.0 * chart.curvature(x.as_slice()).form(&g, xv, vv, fv, vv);
    let mut errors = Vec::with_capacity(steps.len());
    let mut best = (f64::INFINITY, 0.0);
    for &h in steps {
        let t = fourth_order_terms(chart, x, xv, fv, vv, h)?;
        let lhs = t.third_term + t.mixed_term;
        let err = (lhs - rhs).abs();
        if err < best.0 {
            best = (err, lhs);
        }
        errors.push(err);
    }
    Ok(ScalarCheck {
        lhs: best.1,
        rhs,
        rel_err: best.0 / rhs.abs().max(EPS_FLOOR),
        sweep: SweepReport::new(steps.to_vec(), errors),
    })
}

/// Box region for sampling.
#[derive(Clone, Debug)]
pub struct Region {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LipschitzReport {
    /// Largest operator norm of `∇T` over the sampled base points.
    pub max_grad: f64,
    /// Largest `|L_{x₁x₂}T(x₁) − T(x₂)| / ρ(x₁,x₂)` over the sampled pairs.
    pub max_ratio: f64,
    pub pairs: usize,
}

impl LipschitzReport {
    /// `max(max_grad/max_ratio, max_ratio/max_grad)`; 1 when both vanish.
    pub fn factor(&self) -> f64 {
        if self.max_grad == 0.0 && self.max_ratio == 0.0 {
            1.0
        } else {
            (self.max_grad / self.max_ratio).max(self.max_ratio / self.max_grad)
        }
    }
}

/// Operator norm of a (1,1) tensor with components `a[(i, j)] = Aⁱ_j` under g.
pub fn operator_norm(g: &DMatrix<f64>, a: &DMatrix<f64>) -> f64 {
    let (s, si) = spd_sqrt(g);
    (&s * a * &si).singular_values().max()
}

/// Samples pairs `(x₁, exp_{x₁}(r w))` with `x₁` uniform in the region, w a
/// random unit vector and `r ∈ (0, max_step]`, and reports both sides of the
/// equivalence between bounded `|∇T|` and Lipschitz continuity under
/// transport for a vector field T.
pub fn lipschitz_equivalence_sampler<F>(chart: &ManifoldChart, field: &F, region: &Region, samples: usize, max_step: f64, seed: u64) -> Result<LipschitzReport>
where
    F: Fn(&DVector<f64>) -> DVector<f64> + Sync,
{
    let n = chart.dim();
    if region.lower.len() != n || region.upper.len() != n {
        return Err(Error::Dimension("region box differs from chart dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<(DVector<f64>, Vec<f64>, f64)> = (0..samples)
        .map(|_| {
            let x = DVector::from_fn(n, |i, _| rng.gen_range(region.lower[i]..=region.upper[i]));
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let r = max_step * rng.gen_range(0.05..=1.0);
            (x, w, r)
        })
        .collect();
    let results: Vec<Result<(f64, f64)>> = draws
        .par_iter()
        .map(|(x, w, r)| {
            let p = x.as_slice();
            let g = chart.metric_at(p)?;
            let mut a = DMatrix::zeros(n, n);
            for j in 0..n {
                let ej = DVector::from_fn(n, |k, _| if k == j { 1.0 } else { 0.0 });
                a.set_column(j, &covariant_derivative_field(chart, field, x, &ej)?);
            }
            let grad = operator_norm(&g, &a);
            let mut w = DVector::from_column_slice(w);
            let wn = chart.norm(p, &w);
            if wn == 0.0 {
                return Ok((grad, 0.0));
            }
            w /= wn;
            let path = geodesic(chart, x, &(&w * *r), 1.0, DEFAULT_STEP)?;
            let moved = transport_vectors(chart, &path.samples(), &field(x), Direction::Forward).pop().unwrap();
            let y = path.end();
            let ratio = chart.norm(y.as_slice(), &(moved - field(y))) / r;
            Ok((grad, ratio))
        })
        .collect();
    let mut rep = LipschitzReport {
        max_grad: 0.0,
        max_ratio: 0.0,
        pairs: samples,
    };
    for r in results {
        let (g, q) = r?;
        rep.max_grad = rep.max_grad.max(g);
        rep.max_ratio = rep.max_ratio.max(q);
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn euclidean_gradient_and_zero_at_diagonal() {
        let e = ManifoldChart::euclidean(2);
        let (x, y) = (dv(&[1.0, 2.0]), dv(&[-0.5, 0.25]));
        let g = grad_rho2(&e, &x, &y, Slot::First).unwrap();
        assert!((g.comps - (&x - &y) * 2.0).amax() < 1e-14);
        let z = grad_rho2(&ManifoldChart::sphere(), &dv(&[1.0, 0.5]), &dv(&[1.0, 0.5]), Slot::Second).unwrap();
        assert_eq!(z.comps.amax(), 0.0);
        assert!(Slot::try_from(3).is_err());
    }

    #[test]
    fn sphere_gradient_norm_is_twice_distance() {
        let s = ManifoldChart::sphere();
        let (x, y) = (dv(&[PI / 2.0, 0.0]), dv(&[PI / 2.0, PI / 2.0]));
        let g = grad_rho2(&s, &x, &y, Slot::First).unwrap();
        assert!((s.conorm(x.as_slice(), &g.comps) - PI).abs() < 1e-9);
    }

    #[test]
    fn diagonal_hessian_is_twice_metric() {
        for (c, x) in [
            (ManifoldChart::euclidean(2), dv(&[0.3, -0.1])),
            (ManifoldChart::sphere(), dv(&[PI / 2.0, 0.0])),
            (ManifoldChart::hyperbolic(1.0), dv(&[0.3, 0.2])),
        ] {
            let r = hessian_rho2_diag_check(&c, &x).unwrap();
            assert!(r <= 1e-4, "{}: {r}", c.name());
        }
    }

    #[test]
    fn mixed_hessian_at_diagonal_is_minus_twice_metric() {
        let c = ManifoldChart::hyperbolic(1.0);
        let x = dv(&[0.3, 0.2]);
        let d = Rho2Derivatives::at(&c, &x, &x, 2e-2).unwrap();
        assert!((d.hess12 + c.metric(x.as_slice()) * 2.0).amax() < 1e-6);
    }

    #[test]
    fn off_diagonal_hessian_matches_sphere_closed_form() {
        // Perpendicular to the connecting geodesic, Hess ρ² = 2ρ cot ρ.
        let s = ManifoldChart::sphere();
        let (x, y) = (dv(&[PI / 2.0, 0.0]), dv(&[PI / 2.0, 0.7]));
        let d = Rho2Derivatives::at(&s, &x, &y, 2e-2).unwrap();
        assert!((d.hess11[(0, 0)] - 2.0 * 0.7 / 0.7f64.tan()).abs() < 1e-6);
        assert!((d.hess11[(1, 1)] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn gauss_form_rejects_other_dimensions() {
        let e = ManifoldChart::euclidean(3);
        let x = dv(&[0.0, 0.0, 0.0]);
        let f = |_: &DVector<f64>| dv(&[1.0, 0.0, 0.0]);
        let r = gauss_2d_identity_check(&e, &x, &dv(&[1.0, 0.0, 0.0]), &dv(&[0.0, 1.0, 0.0]), &f, &DEFAULT_SWEEP);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn operator_norm_of_identity_is_one() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        assert!((operator_norm(&g, &DMatrix::identity(2, 2)) - 1.0).abs() < 1e-12);
    }
}
