//! Evaluators for the first and second order optimality conditions along a
//! base pair `(ȳ, ū)` with duals `(ψ, W)`.
//!
//! Sign conventions: `F₁ = f(u) − f(ū)` and `δ∂H = ∇_x H(ū) − ∇_x H(u)` in
//! frame components. The integral and pointwise second order quantities are
//! reported so that they are `≤ 0` at an optimum, and for free endpoints with
//! `ν = −1` the cost satisfies
//! `J(u^ε) − J(ū) = ∫(H(ū) − H(u^ε)) − ∫(½(W + Wᵀ)F₁ − δ∂H)·X + o(ε²)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::adjoint::{hamiltonian, hamiltonian_derivs, second_adjoint_chart, solve_first_adjoint, solve_second_adjoint, solve_transition, variation_of_constants, CotangentPath, DualPair, SecondDual};
use crate::along::{sample_stages, BaseGeometry, StageField, StageGeom};
use crate::dynamics::{integrate_trajectory_on, Control, ControlProblem, ControlSet, NodeRef};
use crate::error::{Error, Result};
use crate::manifold::covariant_rate_residual;
use crate::variation::{first_variation_chart, needle_forcing, TangentPath};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Holds,
    Violated,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Witness {
    pub t: Option<f64>,
    pub control: Option<Vec<f64>>,
    pub value: f64,
    pub note: String,
}

/// Which side of `tol` the value must stay on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Bound {
    /// `value ≤ tol`.
    Max,
    /// `value ≥ tol`.
    Min,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionReport {
    pub id: String,
    pub value: f64,
    pub tol: f64,
    pub bound: Bound,
    pub verdict: Verdict,
    pub witnesses: Vec<Witness>,
}

impl ConditionReport {
    /// Holds iff `value ≤ tol`.
    pub fn upper(id: &str, value: f64, tol: f64, witnesses: Vec<Witness>) -> Self {
        ConditionReport {
            id: id.into(),
            value,
            tol,
            bound: Bound::Max,
            verdict: if value <= tol { Verdict::Holds } else { Verdict::Violated },
            witnesses,
        }
    }

    /// Holds iff `value ≥ min`; the bound is reported as the tolerance.
    pub fn lower(id: &str, value: f64, min: f64, witnesses: Vec<Witness>) -> Self {
        ConditionReport {
            id: id.into(),
            value,
            tol: min,
            bound: Bound::Min,
            verdict: if value >= min { Verdict::Holds } else { Verdict::Violated },
            witnesses,
        }
    }

    pub fn noted(mut self, note: &str) -> Self {
        self.witnesses.push(Witness {
            t: None,
            control: None,
            value: self.value,
            note: note.into(),
        });
        self
    }

    pub fn with_verdict(mut self, v: Verdict) -> Self {
        self.verdict = v;
        self
    }
}

/// Default thickness of the critical set: `1e−7·(1 + |H(ū)|)`.
pub fn default_tol_h(h: f64) -> f64 {
    1e-7 * (1.0 + h.abs())
}

fn all_refs(base: &BaseGeometry) -> Vec<NodeRef> {
    base.traj.node_refs().into_iter().flatten().collect()
}

fn clamp_box(u: &DVector<f64>, lower: &DVector<f64>, upper: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(u.len(), |a, _| u[a].clamp(lower[a], upper[a]))
}

/// Largest `H(u)` over the control set at one point, with its maximizer.
/// Finite sets are enumerated (lowest index wins ties); boxes use a 33-point
/// axis grid followed by ten Newton steps on `∂H/∂u`.
pub fn argmax_hamiltonian(problem: &ControlProblem, t: f64, x: &DVector<f64>, psi: &DVector<f64>, nu: f64) -> (DVector<f64>, f64) {
    match &problem.control_set {
        ControlSet::FiniteSet { values } => {
            let mut best = (values[0].clone(), hamiltonian(problem, t, x, psi, &values[0], nu));
            for v in &values[1..] {
                let h = hamiltonian(problem, t, x, psi, v, nu);
                if h > best.1 {
                    best = (v.clone(), h);
                }
            }
            best
        }
        ControlSet::OpenBox { lower, upper } => {
            let m = lower.len();
            let pts = 33usize;
            let total = pts.pow(m as u32);
            let mut best: Option<(DVector<f64>, f64)> = None;
            for idx in 0..total {
                let mut r = idx;
                let u = DVector::from_fn(m, |a, _| {
                    let i = r % pts;
                    r /= pts;
                    lower[a] + (upper[a] - lower[a]) * i as f64 / (pts - 1) as f64
                });
                let h = hamiltonian(problem, t, x, psi, &u, nu);
                if best.as_ref().is_none_or(|b| h > b.1) {
                    best = Some((u, h));
                }
            }
            let (mut u, mut h) = best.unwrap();
            for _ in 0..10 {
                let d = hamiltonian_derivs(problem, t, x, psi, &u, nu);
                let (g, hh) = (d.du.unwrap(), d.duu.unwrap());
                let step = match hh.clone().lu().solve(&g) {
                    Some(s) => s,
                    None => break,
                };
                let cand = clamp_box(&(&u - step), lower, upper);
                let hc = hamiltonian(problem, t, x, psi, &cand, nu);
                if hc >= h {
                    u = cand;
                    h = hc;
                } else {
                    break;
                }
            }
            (u, h)
        }
    }
}

/// Largest `max_U H − H(ū)` over nodes (both one-sided controls at jumps).
pub fn max_principle_residual(problem: &ControlProblem, base: &BaseGeometry, psi: &CotangentPath, nu: f64, tol: f64) -> ConditionReport {
    let refs = all_refs(base);
    let rows: Vec<(f64, f64, DVector<f64>)> = refs
        .par_iter()
        .map(|r| {
            let t = base.traj.times[r.node];
            let x = &base.traj.points[r.node];
            let hb = hamiltonian(problem, t, x, &psi.covectors[r.node], base.traj.control_at(*r), nu);
            let (u, h) = argmax_hamiltonian(problem, t, x, &psi.covectors[r.node], nu);
            ((h - hb).max(0.0), t, u)
        })
        .collect();
    let worst = rows.iter().cloned().fold((0.0, 0.0, DVector::zeros(0)), |a, b| if b.0 > a.0 { b } else { a });
    let witnesses = if worst.0 > 0.0 {
        vec![Witness {
            t: Some(worst.1),
            control: Some(worst.2.as_slice().to_vec()),
            value: worst.0,
            note: "maximizer beats the base control".into(),
        }]
    } else {
        vec![]
    };
    ConditionReport::upper("max_principle", worst.0, tol, witnesses)
}

/// Critical controls per node: members of a finite set whose Hamiltonian
/// is within `tol_h` of `H(ū)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticalControlSet {
    pub refs: Vec<NodeRef>,
    pub members: Vec<Vec<usize>>,
    pub tol_h: Vec<f64>,
    pub values: Vec<DVector<f64>>,
}

impl CriticalControlSet {
    pub fn contains(&self, r: NodeRef, u: &DVector<f64>) -> bool {
        let i = self.refs.iter().position(|q| *q == r).expect("node belongs to the base grid");
        self.members[i].iter().any(|&j| self.values[j] == *u)
    }

    /// Every control on the grid whose value at every node is critical.
    pub fn is_all(&self) -> bool {
        self.members.iter().all(|m| m.len() == self.values.len())
    }
}

pub fn critical_set(problem: &ControlProblem, base: &BaseGeometry, psi: &CotangentPath, nu: f64, tol_h: Option<f64>) -> Result<CriticalControlSet> {
    let values = match &problem.control_set {
        ControlSet::FiniteSet { values } => values.clone(),
        ControlSet::OpenBox { .. } => return Err(Error::Unsupported("critical sets need a finite control set".into())),
    };
    let refs = all_refs(base);
    let mut members = Vec::with_capacity(refs.len());
    let mut tols = Vec::with_capacity(refs.len());
    for r in &refs {
        let t = base.traj.times[r.node];
        let x = &base.traj.points[r.node];
        let p = &psi.covectors[r.node];
        let hb = hamiltonian(problem, t, x, p, base.traj.control_at(*r), nu);
        let tol = tol_h.unwrap_or_else(|| default_tol_h(hb));
        let mut m: Vec<usize> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| (hamiltonian(problem, t, x, p, v, nu) - hb).abs() <= tol)
            .map(|(j, _)| j)
            .collect();
        if let Some(j) = problem.control_set.index_of(base.traj.control_at(*r)) {
            if !m.contains(&j) {
                m.push(j);
                m.sort();
            }
        }
        members.push(m);
        tols.push(tol);
    }
    Ok(CriticalControlSet { refs, members, tol_h: tols, values })
}

/// `δ∂H` in frame components at a node for the control value `u`.
fn delta_grad_h(problem: &ControlProblem, s: &StageGeom, psi: &DVector<f64>, u: &DVector<f64>, nu: f64) -> DVector<f64> {
    if *u == s.u {
        return DVector::zeros(s.x.len());
    }
    let c = problem.covariant(s.t, s.x.as_slice(), u);
    let du = c.df.transpose() * psi + &c.df0 * nu;
    let db = s.cov.df.transpose() * psi + &s.cov.df0 * nu;
    s.e.transpose() * (db - du)
}

fn check_critical(base: &BaseGeometry, crit: &CriticalControlSet, u: &Control) -> Result<()> {
    let us = sample_stages(base, u);
    for r in all_refs(base) {
        let v = &us[r.step][r.stage];
        if !crit.contains(r, v) {
            return Err(Error::Precondition(format!(
                "control value {:?} at t = {} is not in the critical set",
                v.as_slice(),
                base.traj.times[r.node]
            )));
        }
    }
    Ok(())
}

/// `∫ (½(W + Wᵀ)F₁ − δ∂H)·X dt` without the critical-set precondition;
/// `X = Φ∫Φ⁻¹F₁` is built from the transition matrices.
pub fn second_order_term(problem: &ControlProblem, base: &BaseGeometry, duals: &SecondDual, nu: f64, u: &Control) -> Result<f64> {
    let f1 = needle_forcing(problem, base, u)?;
    let tr = solve_transition(base);
    let xs = variation_of_constants(base, &tr, &f1);
    let us = sample_stages(base, u);
    Ok(base.integrate_nodes(|s, r| {
        let uv = &us[r.step][r.stage];
        if *uv == s.u {
            return 0.0;
        }
        let fr = &f1[r.step][r.stage];
        let dh = delta_grad_h(problem, s, &duals.psi.covectors[r.node], uv, nu);
        (duals.sym(r.node) * fr - dh).dot(&xs[r.node])
    }))
}

/// The same integral in chart components from independently integrated
/// `w`, `ψ` and `X`: `∫ ½(w + wᵀ)(f(u) − f(ū), X) + (∇_x H(u) − ∇_x H(ū))(X) dt`.
pub fn second_order_term_chart(problem: &ControlProblem, base: &BaseGeometry, duals: &DualPair, u: &Control) -> Result<f64> {
    let nu = duals.nu;
    let w = second_adjoint_chart(base, duals);
    let psi = crate::adjoint::first_adjoint_chart(base, duals);
    let xs = first_variation_chart(problem, base, u)?;
    let us = sample_stages(base, u);
    Ok(base.integrate_nodes(|s, r| {
        let uv = &us[r.step][r.stage];
        if *uv == s.u {
            return 0.0;
        }
        let p = &psi[r.node];
        let c = problem.covariant(s.t, s.x.as_slice(), uv);
        let f1 = &c.f - &s.cov.f;
        let dh = (c.df.transpose() * p + &c.df0 * nu) - (s.cov.df.transpose() * p + &s.cov.df0 * nu);
        let ws = (&w[r.node] + w[r.node].transpose()) * 0.5;
        (ws * f1 + dh).dot(&xs[r.node])
    }))
}

/// The integral second order necessary quantity; requires `u(t) ∈ Ũ(t)`.
pub fn integral_necessary_lhs(problem: &ControlProblem, base: &BaseGeometry, duals: &SecondDual, nu: f64, crit: &CriticalControlSet, u: &Control) -> Result<f64> {
    check_critical(base, crit, u)?;
    second_order_term(problem, base, duals, nu, u)
}

/// `½F₁ᵀ(W + Wᵀ)F₁ − δ∂H·F₁` at a node for `v ∈ Ũ(t)`.
pub fn pointwise_necessary_lhs(problem: &ControlProblem, base: &BaseGeometry, duals: &SecondDual, nu: f64, crit: &CriticalControlSet, r: NodeRef, v: &DVector<f64>) -> Result<f64> {
    if !crit.contains(r, v) {
        return Err(Error::Precondition(format!("control value {:?} at t = {} is not in the critical set", v.as_slice(), base.traj.times[r.node])));
    }
    Ok(pointwise_value(problem, base, duals, nu, r, v))
}

/// The pointwise quantity without the critical-set precondition.
pub fn pointwise_value(problem: &ControlProblem, base: &BaseGeometry, duals: &SecondDual, nu: f64, r: NodeRef, v: &DVector<f64>) -> f64 {
    let s = base.at(r);
    let f1 = s.to_frame(&(problem.f(s.t, s.x.as_slice(), v) - &s.cov.f));
    let dh = delta_grad_h(problem, s, &duals.psi.covectors[r.node], v, nu);
    0.5 * f1.dot(&((&duals.w[r.node] + duals.w[r.node].transpose()) * &f1)) - dh.dot(&f1)
}

/// Largest pointwise value over nodes and critical control values.
pub fn pointwise_scan(problem: &ControlProblem, base: &BaseGeometry, duals: &SecondDual, nu: f64, crit: &CriticalControlSet, tol: f64) -> Result<ConditionReport> {
    let mut worst = f64::NEG_INFINITY;
    let mut wit = None;
    for (i, r) in crit.refs.iter().enumerate() {
        for &j in &crit.members[i] {
            let v = &crit.values[j];
            let val = pointwise_necessary_lhs(problem, base, duals, nu, crit, *r, v)?;
            if val > worst {
                worst = val;
                wit = Some(Witness {
                    t: Some(base.traj.times[r.node]),
                    control: Some(v.as_slice().to_vec()),
                    value: val,
                    note: "largest pointwise value".into(),
                });
            }
        }
    }
    Ok(ConditionReport::upper("pointwise_second_order", worst, tol, wit.into_iter().collect()))
}

/// `(J(u) − J(ū), ∫(H(ū) − H(u)) − second_order_term)` on the base grid,
/// for a free endpoint with `ν = −1`.
pub fn cost_expansion(problem: &ControlProblem, base: &BaseGeometry, duals: &SecondDual, nu: f64, u: &Control) -> Result<(f64, f64)> {
    let pert = integrate_trajectory_on(problem, u, &base.traj.grid())?;
    let us = sample_stages(base, u);
    let dh = base.integrate_nodes(|s, r| {
        let uv = &us[r.step][r.stage];
        let p = &duals.psi.covectors[r.node];
        hamiltonian(problem, s.t, &s.x, p, &s.u, nu) - hamiltonian(problem, s.t, &s.x, p, uv, nu)
    });
    let term = second_order_term(problem, base, duals, nu, u)?;
    Ok((pert.cost - base.traj.cost, dh - term))
}

/// Measure of `{u ≠ ū}` on the base grid, from step midpoints.
pub fn differing_measure(base: &BaseGeometry, u: &Control) -> f64 {
    let smp = &base.traj.samples;
    (0..base.steps())
        .filter(|&k| {
            let mid = smp.stage_time(k, 1);
            u.eval(mid, mid) != base.traj.control.eval(mid, mid)
        })
        .map(|k| smp.step_width(k))
        .sum()
}

/// Seeded spike controls near ū: start in `[0, 0.8T]`, width below `eps0`,
/// replacement at distance `[0.5, 1.5]` from `ū(start)` for boxes and a
/// different member for finite sets.
pub fn spike_samples(problem: &ControlProblem, ubar: &Control, eps0: f64, count: usize, seed: u64) -> Vec<(f64, f64, DVector<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_max = 0.8 * problem.horizon;
    (0..count)
        .map(|_| {
            let start = rng.gen_range(0.0..t_max);
            let width = rng.gen_range(0.1 * eps0..eps0);
            let here = ubar.at(start);
            let value = match &problem.control_set {
                ControlSet::FiniteSet { values } => {
                    let others: Vec<&DVector<f64>> = values.iter().filter(|v| **v != here).collect();
                    if others.is_empty() {
                        here.clone()
                    } else {
                        others[rng.gen_range(0..others.len())].clone()
                    }
                }
                ControlSet::OpenBox { lower, upper } => {
                    let m = here.len();
                    let mut dir = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0));
                    if dir.norm() < 1e-3 {
                        dir[0] = 1.0;
                    }
                    let dir = dir.normalize() * rng.gen_range(0.5..1.5);
                    let mut cand = &here + &dir;
                    if !problem.control_set.contains(&cand) {
                        cand = &here - &dir;
                    }
                    clamp_box(&cand, &(lower * 0.999 + upper * 0.001), &(upper * 0.999 + lower * 0.001))
                }
            };
            (start, width, value)
        })
        .collect()
}

/// Checks `second_order_term ≤ −β d(u, ū)²` and `J(u) ≥ J(ū)` on seeded
/// spike samples. Violated if some sample beats ū; inconclusive if only
/// the margin fails.
#[allow(clippy::too_many_arguments)]
pub fn sufficient_margin_scan(problem: &ControlProblem, ubar: &Control, duals: &DualPair, beta: f64, eps0: f64, count: usize, seed: u64, step: f64) -> Result<ConditionReport> {
    let samples = spike_samples(problem, ubar, eps0, count, seed);
    let rows: Vec<(f64, f64, f64, f64, Vec<f64>)> = samples
        .par_iter()
        .map(|(start, width, value)| -> Result<_> {
            let u = ubar.splice(*start, start + width, Control::constant(problem.horizon, value.clone()));
            let base = BaseGeometry::build(problem, ubar, step, &u.breakpoints())?;
            let second = solve_second_adjoint(&base, duals)?;
            let d = differing_measure(&base, &u);
            let term = second_order_term(problem, &base, &second, duals.nu, &u)?;
            let pert = integrate_trajectory_on(problem, &u, &base.traj.grid())?;
            Ok((term + beta * d * d, pert.cost - base.traj.cost, *start, d, value.as_slice().to_vec()))
        })
        .collect::<Result<_>>()?;
    let margin = rows.iter().map(|r| r.0).fold(f64::NEG_INFINITY, f64::max);
    let cost_gap = rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let cost_tol = 1e-12;
    let witness = |r: &(f64, f64, f64, f64, Vec<f64>), note: &str| Witness {
        t: Some(r.2),
        control: Some(r.4.clone()),
        value: if note.starts_with("cost") { r.1 } else { r.0 },
        note: format!("{note} (spike measure {:.6})", r.3),
    };
    let mut witnesses = Vec::new();
    if let Some(r) = rows.iter().max_by(|a, b| a.0.partial_cmp(&b.0).unwrap()) {
        witnesses.push(witness(r, "largest margin"));
    }
    if let Some(r) = rows.iter().min_by(|a, b| a.1.partial_cmp(&b.1).unwrap()) {
        witnesses.push(witness(r, "cost change J(u) - J(ubar)"));
    }
    let verdict = if cost_gap < -cost_tol {
        Verdict::Violated
    } else if margin > 0.0 {
        Verdict::Inconclusive
    } else {
        Verdict::Holds
    };
    Ok(ConditionReport {
        id: "sufficient_margin".into(),
        value: margin,
        tol: 0.0,
        bound: Bound::Max,
        verdict,
        witnesses,
    })
}

/// `sup |∂H/∂u|` at ū. Piecewise constant controls are judged by the
/// average of `∂H/∂u` over each of their pieces.
pub fn stationarity_residual(problem: &ControlProblem, base: &BaseGeometry, psi: &CotangentPath, nu: f64, tol: f64) -> Result<ConditionReport> {
    if !problem.control_set.is_box() {
        return Err(Error::Unsupported("stationarity needs an open control set".into()));
    }
    let grad = |r: NodeRef| -> DVector<f64> {
        let s = base.at(r);
        hamiltonian_derivs(problem, s.t, &s.x, &psi.covectors[r.node], &s.u, nu).du.unwrap()
    };
    let (value, t) = if base.traj.control.as_grid().is_some() {
        let mut worst = (0.0f64, 0.0);
        for (refs, &(a, b)) in base.traj.node_refs().iter().zip(&base.traj.segments) {
            let len = base.traj.times[b] - base.traj.times[a];
            let w = crate::numeric::simpson_weights(b - a, len / (b - a) as f64);
            let avg = refs.iter().zip(w).fold(DVector::zeros(problem.control_set.dim()), |acc, (r, wi)| acc + grad(*r) * wi) / len;
            if avg.norm() > worst.0 {
                worst = (avg.norm(), base.traj.times[a]);
            }
        }
        worst
    } else {
        all_refs(base).into_iter().map(|r| (grad(r).norm(), base.traj.times[r.node])).fold((0.0, 0.0), |a, b| if b.0 > a.0 { b } else { a })
    };
    Ok(ConditionReport::upper(
        "stationarity",
        value,
        tol,
        vec![Witness {
            t: Some(t),
            control: None,
            value,
            note: "largest |dH/du|".into(),
        }],
    ))
}

/// `ψ₁` for a fixed `ν` minimizing `∫|∂H/∂u|²` along ū. The costate is
/// affine in `ψ₁`, so this is a linear least-squares problem.
pub fn fit_endpoint_multiplier(base: &BaseGeometry, nu: f64) -> Result<DualPair> {
    if base.stages.iter().any(|s| s[0].ctrl.is_none()) {
        return Err(Error::Unsupported("multiplier fit needs an open control set".into()));
    }
    let n = base.dim();
    let grads = |psi1: DVector<f64>| -> Result<Vec<DVector<f64>>> {
        let psi = solve_first_adjoint(base, &DualPair { nu, psi1 })?;
        Ok(all_refs(base)
            .into_iter()
            .map(|r| {
                let c = base.at(r).ctrl.as_ref().unwrap();
                c.duf.transpose() * &psi.covectors[r.node] + &c.duf0 * nu
            })
            .collect())
    };
    let g0 = grads(DVector::zeros(n))?;
    let basis = (0..n)
        .map(|i| grads(DVector::from_fn(n, |j, _| if i == j { 1.0 } else { 0.0 })).map(|g| g.iter().zip(&g0).map(|(a, b)| a - b).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    // Node weights follow the `all_refs` order, which matches `node_refs`.
    let weights: Vec<f64> = base
        .traj
        .node_refs()
        .iter()
        .zip(&base.traj.segments)
        .flat_map(|(refs, &(a, b))| crate::numeric::simpson_weights(refs.len() - 1, (base.traj.times[b] - base.traj.times[a]) / (b - a) as f64))
        .collect();
    let mut m = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    for (k, w) in weights.iter().enumerate() {
        for i in 0..n {
            rhs[i] -= w * basis[i][k].dot(&g0[k]);
            for j in 0..n {
                m[(i, j)] += w * basis[i][k].dot(&basis[j][k]);
            }
        }
    }
    let psi1 = m.svd(true, true).solve(&rhs, 1e-12).map_err(|e| Error::Numeric(e.into()))?;
    Ok(DualPair { nu, psi1 })
}

fn stage_l2(base: &BaseGeometry, xi: &StageField) -> f64 {
    let smp = &base.traj.samples;
    (0..base.steps())
        .map(|k| smp.step_width(k) / 6.0 * (xi[k][0].norm_squared() + 4.0 * xi[k][1].norm_squared() + xi[k][2].norm_squared()))
        .sum::<f64>()
        .sqrt()
}

/// Solution of `∇_ẏ V = ∇_V f + ∂_u f·ξ` from `V(0) = 0` and its terminal gap.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelCheck {
    pub v: TangentPath,
    pub gap: f64,
    pub tol: f64,
    pub member: bool,
}

pub fn kernel_membership(base: &BaseGeometry, xi: &StageField) -> Result<KernelCheck> {
    if base.stages.iter().any(|s| s[0].ctrl.is_none()) {
        return Err(Error::Unsupported("kernel membership needs an open control set".into()));
    }
    let comps = base.integrate(crate::manifold::Direction::Forward, DVector::zeros(base.dim()), |s, k, st, q| {
        &s.fmat * q + s.to_frame(&(&s.ctrl.as_ref().unwrap().duf * &xi[k][st]))
    });
    let v = TangentPath {
        times: base.traj.times.clone(),
        vectors: base.to_chart(&comps),
        comps,
    };
    let gap = v.end().norm();
    let tol = 1e-6 * (1.0 + stage_l2(base, xi));
    Ok(KernelCheck { member: gap <= tol, v, gap, tol })
}

/// The control direction whose linearized response is `V = Σ cᵢ eᵢ` in the
/// parallel frame: `ξ = (Eᵀg ∂_u f)⁺(ċ − F c)` at every stage. Exact when
/// `∂_u f` spans the tangent space; `field(t)` returns `(c(t), ċ(t))`.
pub fn kernel_direction<F>(base: &BaseGeometry, field: F) -> Result<StageField>
where
    F: Fn(f64) -> (DVector<f64>, DVector<f64>),
{
    let smp = &base.traj.samples;
    (0..base.steps())
        .map(|k| {
            let mut out: [DVector<f64>; 3] = Default::default();
            for (st, o) in out.iter_mut().enumerate() {
                let s = &base.stages[k][st];
                let ctrl = s.ctrl.as_ref().ok_or_else(|| Error::Unsupported("kernel directions need an open control set".into()))?;
                let b = &s.einv * &ctrl.duf;
                let (c, dc) = field(smp.stage_time(k, st));
                let pinv = b.pseudo_inverse(1e-12).map_err(|e| Error::Numeric(e.into()))?;
                *o = pinv * (dc - &s.fmat * c);
            }
            Ok(out)
        })
        .collect()
}

/// The endpoint-constrained second order form
/// `∫ ∂²_u H(ξ, ξ) + ∇²_x H(V, V) + 2∇_u∇_x H(V, ξ) − R(ψ̃, V, ẏ, V) dt`
/// for a kernel pair `(ξ, V)`.
pub fn endpoint_hessian_form(problem: &ControlProblem, base: &BaseGeometry, psi: &CotangentPath, nu: f64, xi: &StageField) -> Result<f64> {
    let kc = kernel_membership(base, xi)?;
    if !kc.member {
        return Err(Error::Precondition(format!("direction is not in the kernel: |V(T)| = {:e} > {:e}", kc.gap, kc.tol)));
    }
    Ok(endpoint_form_value(problem, base, psi, nu, xi, &kc.v))
}

/// The form value without the kernel check.
pub fn endpoint_form_value(problem: &ControlProblem, base: &BaseGeometry, psi: &CotangentPath, nu: f64, xi: &StageField, v: &TangentPath) -> f64 {
    base.integrate_nodes(|s, r| {
        let p = &psi.covectors[r.node];
        let d = hamiltonian_derivs(problem, s.t, &s.x, p, &s.u, nu);
        let x = &v.vectors[r.node];
        let z = &xi[r.step][r.stage];
        let pt = s.g.clone().try_inverse().expect("metric is invertible") * p;
        let curv = s.riem.form(&s.g, &pt, x, &s.v, x);
        z.dot(&(d.duu.as_ref().unwrap() * z)) + x.dot(&(&d.dxx * x)) + 2.0 * z.dot(&(d.dudx.as_ref().unwrap() * x)) - curv
    })
}

/// `∫ ⟨∇f⁰, V⟩ + ∂_u f⁰·ξ dt`; zero for members of the abnormal set.
pub fn abnormal_set_value(problem: &ControlProblem, base: &BaseGeometry, xi: &StageField, v: &TangentPath) -> f64 {
    base.integrate_nodes(|s, r| {
        let c = s.ctrl.as_ref().map(|c| c.duf0.dot(&xi[r.step][r.stage])).unwrap_or(0.0);
        s.cov.df0.dot(&v.vectors[r.node]) + c
    }) * if problem.control_set.is_box() { 1.0 } else { f64::NAN }
}

pub fn abnormal_set_membership(problem: &ControlProblem, base: &BaseGeometry, xi: &StageField, tol: f64) -> Result<(f64, bool)> {
    let kc = kernel_membership(base, xi)?;
    let val = abnormal_set_value(problem, base, xi, &kc.v);
    Ok((val, val.abs() <= tol))
}

/// Numeric rank of `ξ ↦ (V(T), ∫⟨∇f⁰, V⟩ + ∂_u f⁰ ξ)` over probe directions.
/// Rank `n` (corank one in the `n + 1` dimensional target) is the case where
/// the multiplier pair is unique up to scaling.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankReport {
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub corank_one: bool,
}

pub fn multiplier_rank(problem: &ControlProblem, base: &BaseGeometry, probes: &[StageField]) -> Result<RankReport> {
    let n = base.dim();
    let cols = probes
        .iter()
        .map(|xi| -> Result<DVector<f64>> {
            let kc = kernel_membership(base, xi)?;
            let mut c = DVector::zeros(n + 1);
            c.rows_mut(0, n).copy_from(kc.v.end());
            c[n] = abnormal_set_value(problem, base, xi, &kc.v);
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let m = DMatrix::from_columns(&cols);
    let sv: Vec<f64> = m.svd(false, false).singular_values.iter().copied().collect();
    let top = sv.iter().cloned().fold(0.0, f64::max);
    let rank = sv.iter().filter(|s| **s > 1e-8 * top.max(1e-300)).count();
    Ok(RankReport {
        singular_values: sv,
        rank,
        corank_one: rank == n,
    })
}

/// `∫ |∇_ẏ V|² + R(ẏ, V, ẏ, V) dt` for `V = Σ cᵢ eᵢ` in the parallel frame;
/// `field(t)` returns `(c(t), ċ(t))`, which must vanish at both ends.
pub fn second_variation_of_energy<F>(base: &BaseGeometry, field: F) -> Result<f64>
where
    F: Fn(f64) -> (DVector<f64>, DVector<f64>),
{
    let t_end = base.traj.horizon();
    if field(0.0).0.amax() > 1e-12 || field(t_end).0.amax() > 1e-12 {
        return Err(Error::Precondition("variation field must vanish at both ends".into()));
    }
    Ok(base.integrate_nodes(|s, r| {
        let (c, dc) = field(base.traj.times[r.node]);
        let v = &base.frames[r.node] * c;
        dc.norm_squared() + s.riem.form(&s.g, &s.v, &v, &s.v, &v)
    }))
}

/// Largest covariant acceleration `|∇_ẏ ẏ|` of a base trajectory at nodes.
pub fn geodesic_residual(problem: &ControlProblem, base: &BaseGeometry) -> f64 {
    let tr = &base.traj;
    let vel: Vec<DVector<f64>> = (0..tr.points.len()).map(|k| base.node(k).v.clone()).collect();
    covariant_rate_residual(&problem.chart, &tr.times, &tr.points, &vel, &vel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::builtin::FlatLq;
    use crate::dynamics::ControlGrid;
    use crate::variation::solve_first_variation_needle;
    use crate::manifold::ManifoldChart;
    use std::sync::Arc;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn flat_lq() -> ControlProblem {
        ControlProblem::new(ManifoldChart::euclidean(1), Arc::new(FlatLq), ControlSet::open_box(&[-5.0], &[5.0]), dv(&[1.0]), 1.0).unwrap()
    }

    fn riccati() -> Control {
        Control::smooth("riccati", 1.0, |t| dv(&[-(1.0 - t).sinh() / 1f64.cosh()]))
    }

    #[test]
    fn riccati_optimum_satisfies_first_order_conditions() {
        let p = flat_lq();
        let b = BaseGeometry::build(&p, &riccati(), 1e-3, &[]).unwrap();
        let d = DualPair::free_endpoint(1);
        let psi = solve_first_adjoint(&b, &d).unwrap();
        let mp = max_principle_residual(&p, &b, &psi, -1.0, 1e-6);
        assert_eq!(mp.verdict, Verdict::Holds, "{mp:?}");
        let st = stationarity_residual(&p, &b, &psi, -1.0, 1e-6).unwrap();
        assert!(st.value < 1e-9, "{st:?}");
        // A non-extremal control is detected by both.
        let bad = BaseGeometry::build(&p, &Control::constant(1.0, dv(&[0.0])), 1e-3, &[]).unwrap();
        let psi = solve_first_adjoint(&bad, &d).unwrap();
        assert_eq!(max_principle_residual(&p, &bad, &psi, -1.0, 1e-6).verdict, Verdict::Violated);
        assert!(stationarity_residual(&p, &bad, &psi, -1.0, 1e-6).unwrap().value > 0.1);
    }

    #[test]
    fn identical_control_has_zero_second_order_term() {
        let p = flat_lq();
        let b = BaseGeometry::build(&p, &riccati(), 1e-2, &[]).unwrap();
        let sd = solve_second_adjoint(&b, &DualPair::free_endpoint(1)).unwrap();
        assert_eq!(second_order_term(&p, &b, &sd, -1.0, &riccati()).unwrap(), 0.0);
    }

    #[test]
    fn flat_lq_second_order_term_is_minus_half_x_squared() {
        let p = flat_lq();
        let u = riccati().splice(0.2, 0.3, Control::constant(1.0, dv(&[1.0])));
        let b = BaseGeometry::build(&p, &riccati(), 1e-3, &u.breakpoints()).unwrap();
        let sd = solve_second_adjoint(&b, &DualPair::free_endpoint(1)).unwrap();
        let term = second_order_term(&p, &b, &sd, -1.0, &u).unwrap();
        let x = solve_first_variation_needle(&p, &b, &u).unwrap();
        let want = -0.5 * b.traj.integrate(|r| x.vectors[r.node][0].powi(2));
        assert!((term - want).abs() < 1e-10, "{term} vs {want}");
        let (actual, predicted) = cost_expansion(&p, &b, &sd, -1.0, &u).unwrap();
        // Quadratic problem: the expansion is exact up to quadrature.
        assert!((actual - predicted).abs() < 1e-9, "{actual} vs {predicted}");
    }

    #[test]
    fn critical_set_with_u_independent_hamiltonian_is_everything() {
        let p = ControlProblem::new(
            ManifoldChart::euclidean(1),
            Arc::new(crate::dynamics::ClosureDynamics::new("still", 1, 1, |_, _, _| dv(&[0.0]), |_, x, _| x[0])),
            ControlSet::finite(&[0.0, 1.0, 2.0]),
            dv(&[0.0]),
            1.0,
        )
        .unwrap();
        let b = BaseGeometry::build(&p, &Control::Grid(ControlGrid::scalar(1.0, &[0.0, 1.0])), 0.05, &[]).unwrap();
        let psi = solve_first_adjoint(&b, &DualPair::free_endpoint(1)).unwrap();
        let c = critical_set(&p, &b, &psi, -1.0, None).unwrap();
        assert!(c.is_all());
        assert!(matches!(critical_set(&flat_lq(), &BaseGeometry::build(&flat_lq(), &riccati(), 0.1, &[]).unwrap(), &psi, -1.0, None), Err(Error::Unsupported(_))));
    }

    #[test]
    fn strictly_concave_two_point_set_is_a_singleton() {
        let p = ControlProblem::new(ManifoldChart::euclidean(1), Arc::new(FlatLq), ControlSet::finite(&[0.0, 1.0]), dv(&[1.0]), 1.0).unwrap();
        let b = BaseGeometry::build(&p, &Control::constant(1.0, dv(&[0.0])), 0.05, &[]).unwrap();
        let d = DualPair::new(-1.0, dv(&[0.0])).unwrap();
        let psi = solve_first_adjoint(&b, &d).unwrap();
        let c = critical_set(&p, &b, &psi, -1.0, None).unwrap();
        assert!(c.members.iter().all(|m| m == &vec![0]));
        let sd = solve_second_adjoint(&b, &d).unwrap();
        let other = Control::constant(1.0, dv(&[1.0]));
        assert!(matches!(integral_necessary_lhs(&p, &b, &sd, -1.0, &c, &other), Err(Error::Precondition(_))));
        let r = c.refs[3];
        assert_eq!(pointwise_necessary_lhs(&p, &b, &sd, -1.0, &c, r, &dv(&[0.0])).unwrap(), 0.0);
        assert!(pointwise_necessary_lhs(&p, &b, &sd, -1.0, &c, r, &dv(&[1.0])).is_err());
    }

    #[test]
    fn zero_direction_is_a_trivial_kernel_member() {
        let p = flat_lq();
        let b = BaseGeometry::build(&p, &riccati(), 1e-2, &[]).unwrap();
        let zero = sample_stages(&b, &Control::constant(1.0, dv(&[0.0])));
        let kc = kernel_membership(&b, &zero).unwrap();
        assert!(kc.member && kc.gap == 0.0);
        let psi = solve_first_adjoint(&b, &DualPair::free_endpoint(1)).unwrap();
        assert_eq!(endpoint_hessian_form(&p, &b, &psi, -1.0, &zero).unwrap(), 0.0);
        let one = sample_stages(&b, &Control::constant(1.0, dv(&[1.0])));
        let kc = kernel_membership(&b, &one).unwrap();
        assert!(!kc.member && (kc.gap - 1.0).abs() < 1e-12);
        assert!(endpoint_hessian_form(&p, &b, &psi, -1.0, &one).is_err());
        let (val, member) = abnormal_set_membership(&p, &b, &zero, 1e-12).unwrap();
        assert!(member && val == 0.0);
    }

    #[test]
    fn energy_form_needs_vanishing_ends() {
        let p = flat_lq();
        let b = BaseGeometry::build(&p, &riccati(), 1e-2, &[]).unwrap();
        assert!(second_variation_of_energy(&b, |_| (dv(&[1.0]), dv(&[0.0]))).is_err());
        assert_eq!(second_variation_of_energy(&b, |_| (dv(&[0.0]), dv(&[0.0]))).unwrap(), 0.0);
    }

    #[test]
    fn sufficiency_scan_on_riccati_optimum() {
        let p = flat_lq();
        let rep = sufficient_margin_scan(&p, &riccati(), &DualPair::free_endpoint(1), 0.01, 0.05, 40, 7, 1e-2).unwrap();
        assert_eq!(rep.verdict, Verdict::Holds, "{rep:?}");
        let rep = sufficient_margin_scan(&p, &Control::constant(1.0, dv(&[0.0])), &DualPair::free_endpoint(1), 0.01, 0.05, 40, 7, 1e-2).unwrap();
        assert_eq!(rep.verdict, Verdict::Violated, "{rep:?}");
    }
}
