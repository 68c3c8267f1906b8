//! Runs the applicable checks on a resolved [`Scenario`].

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::adjoint::{solve_first_adjoint, solve_second_adjoint, CotangentPath, DualPair};
use crate::along::{BaseGeometry, StageField};
use crate::conditions::{
    critical_set, endpoint_form_value, fit_endpoint_multiplier, geodesic_residual, kernel_direction, kernel_membership, max_principle_residual,
    multiplier_rank, pointwise_scan, second_order_term, second_variation_of_energy, spike_samples, stationarity_residual, sufficient_margin_scan,
    ConditionReport, CriticalControlSet, RankReport, Verdict, Witness,
};
use crate::distance::{lipschitz_equivalence_sampler, Region};
use crate::dynamics::{apriori_bounds_check, Control, ControlGrid, ControlSet};
use crate::error::{Error, Result};
use crate::scenario::{random_sine_fields, BaseSpec, DynamicsSpec, Scenario, SineField};
use crate::variation::{verify_classical_expansion, verify_needle_taylor, SlopeReport};

/// Which checks a command runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slice {
    All,
    Necessary,
    Sufficient,
    Endpoint,
    Slopes,
}

impl Slice {
    fn has(self, other: Slice) -> bool {
        self == Slice::All || self == other
    }
}

/// Most critical grid controls the integral check enumerates.
pub const CRITICAL_GRID_BUDGET: usize = 4096;
/// Largest allowed ratio between the sampled gradient bound and the sampled
/// transported-difference quotient of the dynamics.
pub const LIPSCHITZ_FACTOR_TOL: f64 = 2.0;
pub const KERNEL_GAP_TOL: f64 = 1e-6;
pub const NEEDLE_EPSILONS: [f64; 4] = [0.2, 0.1, 0.05, 0.025];
/// A slope row whose largest entry is below this is exact to noise.
pub const NOISE_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, Serialize)]
pub struct TrajectorySummary {
    pub steps: usize,
    pub horizon: f64,
    pub cost: f64,
    pub y0: Vec<f64>,
    pub y_end: Vec<f64>,
    pub y1: Option<Vec<f64>>,
    pub base: String,
    pub nu: f64,
    pub psi1: Vec<f64>,
    /// Set for brute-force bases: the number of controls compared.
    pub enumerated: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SlopeTable {
    pub kind: String,
    pub eps: Vec<f64>,
    pub rows: Vec<SlopeTableRow>,
    pub box_violations: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SlopeTableRow {
    pub label: String,
    pub values: Vec<f64>,
    pub slope: f64,
}

impl SlopeTable {
    fn from_report(kind: &str, r: &SlopeReport) -> Self {
        SlopeTable {
            kind: kind.into(),
            eps: r.eps.clone(),
            rows: r
                .rows
                .iter()
                .map(|row| SlopeTableRow {
                    label: row.label.clone(),
                    values: row.values.clone(),
                    slope: row.slope,
                })
                .collect(),
            box_violations: r.box_violations,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Evaluation {
    pub trajectory: TrajectorySummary,
    pub conditions: Vec<ConditionReport>,
    pub slopes: Vec<SlopeTable>,
    pub rank: Option<RankReport>,
    pub notes: Vec<String>,
}

/// The base geometry and its first order multipliers.
pub struct Extremal {
    pub base: BaseGeometry,
    pub duals: DualPair,
    pub psi: CotangentPath,
}

pub fn extremal(sc: &Scenario) -> Result<Extremal> {
    let base = BaseGeometry::build(&sc.problem, &sc.ubar, sc.spec.solver.step, &[])?;
    let duals = if sc.fixed_endpoint() {
        fit_endpoint_multiplier(&base, -1.0)?
    } else {
        DualPair::free_endpoint(base.dim())
    };
    let psi = solve_first_adjoint(&base, &duals)?;
    Ok(Extremal { base, duals, psi })
}

fn sort_key(id: &str) -> usize {
    const ORDER: &[&str] = &[
        "apriori_growth",
        "apriori_perturbation",
        "lipschitz_equivalence_factor",
        "endpoint_reached",
        "max_principle",
        "stationarity",
        "pointwise_second_order",
        "integral_second_order",
        "sufficient_margin",
        "geodesic_residual",
        "energy_second_variation",
        "energy_jacobi_mode",
        "kernel_gap",
        "endpoint_form",
        "endpoint_form_scaling",
        "multiplier_rank",
        "slope_needle_V-X",
        "slope_needle_V-X-Y",
        "slope_classical_Ve-eV",
        "slope_classical_Ve-eV-e2Y",
    ];
    ORDER.iter().position(|o| *o == id).unwrap_or(ORDER.len())
}

pub fn evaluate(sc: &Scenario, slice: Slice) -> Result<Evaluation> {
    let ex = extremal(sc)?;
    let p = &sc.problem;
    let s = &sc.spec.solver;
    let mut notes = Vec::new();
    let mut conds: Vec<ConditionReport> = Vec::new();
    let mut slopes = Vec::new();
    let mut rank = None;

    if let BaseSpec::BruteForce { intervals } = sc.spec.base {
        notes.push(format!(
            "base control is the exhaustive optimum over {} grid controls on {intervals} intervals, computed by this toolkit",
            sc.enumeration.map_or(0, |e| e.1)
        ));
    }
    if slice == Slice::All {
        match apriori(sc) {
            Ok(r) => conds.extend(r),
            Err(e) => conds.push(ConditionReport::upper("apriori_growth", f64::NAN, 0.0, vec![]).with_verdict(Verdict::Inconclusive).noted(&format!("not evaluated: {e}"))),
        }
        if let Some(y1) = &p.y1 {
            let gap = (ex.base.traj.end() - y1).amax();
            conds.push(ConditionReport::upper("endpoint_reached", gap, 1e-6, vec![]));
        }
    }

    if slice.has(Slice::Necessary) {
        conds.push(max_principle_residual(p, &ex.base, &ex.psi, ex.duals.nu, s.tol));
        match &p.control_set {
            ControlSet::FiniteSet { .. } => {
                let second = solve_second_adjoint(&ex.base, &ex.duals)?;
                let crit = critical_set(p, &ex.base, &ex.psi, ex.duals.nu, s.tol_h)?;
                let multi = crit.members.iter().filter(|m| m.len() > 1).count();
                notes.push(format!("{multi} of {} nodes have more than one critical control value", crit.refs.len()));
                conds.push(pointwise_scan(p, &ex.base, &second, ex.duals.nu, &crit, s.tol)?);
                let controls = critical_grid_controls(&ex.base, &crit)?;
                let values: Vec<f64> = controls.par_iter().map(|u| second_order_term(p, &ex.base, &second, ex.duals.nu, u)).collect::<Result<_>>()?;
                let (worst, value) = values.iter().enumerate().fold((0, f64::NEG_INFINITY), |a, (i, v)| if *v > a.1 { (i, *v) } else { a });
                let witness = controls[worst].as_grid().map(|g| Witness {
                    t: None,
                    control: Some(g.values.iter().map(|v| v[0]).collect()),
                    value,
                    note: format!("largest of {} critical grid controls (first control component per piece)", controls.len()),
                });
                conds.push(ConditionReport::upper("integral_second_order", value, s.tol, witness.into_iter().collect()));
            }
            ControlSet::OpenBox { .. } => {
                conds.push(stationarity_residual(p, &ex.base, &ex.psi, ex.duals.nu, s.stationarity_tol)?);
                notes.push("critical-set second order conditions apply to finite control sets and were not evaluated".into());
            }
        }
    }

    if slice.has(Slice::Sufficient) {
        if sc.fixed_endpoint() {
            notes.push("the spike sufficiency scan needs a free endpoint and was not evaluated".into());
        } else {
            conds.push(sufficient_margin_scan(p, &sc.ubar, &ex.duals, s.beta, s.eps0, s.samples, sc.spec.seed, s.step)?);
        }
    }

    if slice.has(Slice::Endpoint) {
        if matches!(sc.spec.problem.dynamics, DynamicsSpec::FrameEnergy) {
            conds.extend(energy_checks(sc, &ex)?);
        }
        if sc.fixed_endpoint() && p.control_set.is_box() {
            let (reports, r) = endpoint_checks(sc, &ex)?;
            conds.extend(reports);
            rank = Some(r);
        } else if slice == Slice::Endpoint {
            notes.push("endpoint checks need a fixed endpoint and an open control set".into());
        }
    }

    if slice.has(Slice::Slopes) {
        let (reports, table) = slope_checks(sc)?;
        conds.extend(reports);
        slopes.push(table);
    }

    conds.sort_by_key(|c| sort_key(&c.id));
    let end = ex.base.traj.end();
    Ok(Evaluation {
        trajectory: TrajectorySummary {
            steps: ex.base.steps(),
            horizon: p.horizon,
            cost: ex.base.traj.cost,
            y0: p.y0.as_slice().to_vec(),
            y_end: end.as_slice().to_vec(),
            y1: p.y1.as_ref().map(|v| v.as_slice().to_vec()),
            base: base_label(&sc.spec.base).into(),
            nu: ex.duals.nu,
            psi1: ex.duals.psi1.as_slice().to_vec(),
            enumerated: sc.enumeration.map(|e| e.1),
        },
        conditions: conds,
        slopes,
        rank,
        notes,
    })
}

fn base_label(b: &BaseSpec) -> &'static str {
    match b {
        BaseSpec::BruteForce { .. } => "brute_force",
        BaseSpec::Grid { .. } => "grid",
        BaseSpec::Constant { .. } => "constant",
        BaseSpec::Riccati => "riccati",
        BaseSpec::Geodesic => "geodesic",
        BaseSpec::GeodesicVelocity { .. } => "geodesic_velocity",
    }
}

/// Grid controls on the pieces of the base grid whose value on every piece is
/// critical at every node of the piece.
pub fn critical_grid_controls(base: &BaseGeometry, crit: &CriticalControlSet) -> Result<Vec<Control>> {
    let tr = &base.traj;
    let allowed: Vec<Vec<usize>> = tr
        .node_refs()
        .iter()
        .map(|refs| (0..crit.values.len()).filter(|&j| refs.iter().all(|r| crit.contains(*r, &crit.values[j]))).collect())
        .collect();
    let count = allowed.iter().try_fold(1usize, |acc, a| acc.checked_mul(a.len())).unwrap_or(usize::MAX);
    if count > CRITICAL_GRID_BUDGET {
        return Err(Error::Budget {
            count: count as u128,
            budget: CRITICAL_GRID_BUDGET as u128,
        });
    }
    let knots: Vec<f64> = std::iter::once(0.0).chain(tr.segments.iter().map(|&(_, b)| tr.times[b])).collect();
    Ok((0..count)
        .map(|mut idx| {
            let mut values = vec![DVector::zeros(0); allowed.len()];
            for (v, a) in values.iter_mut().zip(&allowed).rev() {
                *v = crit.values[a[idx % a.len()]].clone();
                idx /= a.len();
            }
            Control::Grid(ControlGrid { knots: knots.clone(), values })
        })
        .collect())
}

fn apriori(sc: &Scenario) -> Result<Vec<ConditionReport>> {
    let p = &sc.problem;
    let s = &sc.spec.solver;
    let others: Vec<Control> = spike_samples(p, &sc.ubar, s.eps0, 6, sc.spec.seed)
        .into_iter()
        .map(|(a, w, v)| sc.ubar.splice(a, a + w, Control::constant(p.horizon, v)))
        .collect();
    let ap = apriori_bounds_check(p, &sc.ubar, &others, s.step.max(1e-2), 10)?;
    let note = format!("sampled Lipschitz constant {:.6e}", ap.lipschitz);
    let w = |v: f64| Witness { t: None, control: None, value: v, note: note.clone() };
    let mut out = vec![
        ConditionReport::lower("apriori_growth", ap.growth_margin, 0.0, vec![w(ap.growth_margin)]),
        ConditionReport::lower("apriori_perturbation", ap.perturbation_margin, 0.0, vec![w(ap.perturbation_margin)]),
    ];
    let tr = crate::dynamics::integrate_trajectory(p, &sc.ubar, s.step.max(1e-2))?;
    let n = p.chart.dim();
    let lo: Vec<f64> = (0..n).map(|i| tr.points.iter().map(|x| x[i]).fold(f64::INFINITY, f64::min) - 0.1).collect();
    let hi: Vec<f64> = (0..n).map(|i| tr.points.iter().map(|x| x[i]).fold(f64::NEG_INFINITY, f64::max) + 0.1).collect();
    let region = Region { lower: lo, upper: hi };
    let probes: Vec<DVector<f64>> = match &p.control_set {
        ControlSet::FiniteSet { values } => values.clone(),
        ControlSet::OpenBox { lower, upper } => vec![(lower + upper) * 0.5, lower * 0.75 + upper * 0.25],
    };
    let mut worst = (1.0f64, Vec::new());
    for u in &probes {
        let dynamics = p.dynamics.clone();
        let u2 = u.clone();
        let field = move |x: &DVector<f64>| dynamics.f(0.0, x.as_slice(), u2.as_slice());
        let rep = lipschitz_equivalence_sampler(&p.chart, &field, &region, 64, 0.05, sc.spec.seed)?;
        if rep.factor() >= worst.0 || worst.1.is_empty() {
            worst = (rep.factor(), vec![Witness {
                t: None,
                control: Some(u.as_slice().to_vec()),
                value: rep.factor(),
                note: format!("max |grad f| {:.6e}, max transported quotient {:.6e}", rep.max_grad, rep.max_ratio),
            }]);
        }
    }
    out.push(ConditionReport::upper("lipschitz_equivalence_factor", worst.0, LIPSCHITZ_FACTOR_TOL, worst.1));
    Ok(out)
}

fn energy_checks(sc: &Scenario, ex: &Extremal) -> Result<Vec<ConditionReport>> {
    let p = &sc.problem;
    let s = &sc.spec.solver;
    let n = p.chart.dim();
    let mut out = vec![ConditionReport::upper("geodesic_residual", geodesic_residual(p, &ex.base), s.tol, vec![])];
    let fields = random_sine_fields(n, s.energy_fields, s.max_mode, p.horizon, sc.spec.seed);
    let values: Vec<f64> = fields.par_iter().map(|f| second_variation_of_energy(&ex.base, |t| f.eval(t))).collect::<Result<_>>()?;
    let (i, min) = values.iter().enumerate().fold((0, f64::INFINITY), |a, (i, v)| if *v < a.1 { (i, *v) } else { a });
    out.push(ConditionReport::lower(
        "energy_second_variation",
        min,
        -s.tol,
        vec![Witness {
            t: None,
            control: None,
            value: min,
            note: format!("smallest of {} seeded sine fields (field {i})", values.len()),
        }],
    ));
    if n == 2 {
        let u0 = sc.ubar.at(0.0);
        if u0.norm() > 0.0 {
            let normal = DVector::from_column_slice(&[-u0[1], u0[0]]) / u0.norm();
            let mode = SineField::mode(normal, p.horizon);
            let v = second_variation_of_energy(&ex.base, |t| mode.eval(t))?;
            out.push(ConditionReport::lower(
                "energy_jacobi_mode",
                v,
                -s.tol,
                vec![Witness {
                    t: None,
                    control: None,
                    value: v,
                    note: "sin(pi t / T) times the unit normal".into(),
                }],
            ));
        }
    }
    Ok(out)
}

fn endpoint_checks(sc: &Scenario, ex: &Extremal) -> Result<(Vec<ConditionReport>, RankReport)> {
    let p = &sc.problem;
    let s = &sc.spec.solver;
    let n = p.chart.dim();
    let fields = random_sine_fields(n, s.kernel_pairs, s.max_mode, p.horizon, sc.spec.seed.wrapping_add(1));
    let scaled = solve_first_adjoint(&ex.base, &ex.duals.scaled(s.scale))?;
    let rows: Vec<(f64, f64, f64, f64)> = fields
        .par_iter()
        .map(|f| -> Result<_> {
            let xi = kernel_direction(&ex.base, |t| f.eval(t))?;
            let kc = kernel_membership(&ex.base, &xi)?;
            let v = endpoint_form_value(p, &ex.base, &ex.psi, ex.duals.nu, &xi, &kc.v);
            let vc = endpoint_form_value(p, &ex.base, &scaled, ex.duals.nu * s.scale, &xi, &kc.v);
            Ok((v, vc, kc.gap, kc.tol))
        })
        .collect::<Result<_>>()?;
    let worst = |k: fn(&(f64, f64, f64, f64)) -> f64| rows.iter().enumerate().fold((0, f64::NEG_INFINITY), |a, (i, r)| if k(r) > a.1 { (i, k(r)) } else { a });
    let (gi, gap) = worst(|r| r.2);
    let (fi, form) = worst(|r| r.0);
    let c = s.scale;
    let (si, defect) = rows.iter().enumerate().fold((0, 0.0f64), |a, (i, r)| {
        let d = (r.1 - c * r.0).abs() / (1.0 + (c * r.0).abs());
        if d > a.1 {
            (i, d)
        } else {
            a
        }
    });
    let flips = rows.iter().filter(|r| (r.0 <= s.tol) != (r.1 <= s.tol * c)).count();
    let w = |i: usize, value: f64, note: &str| Witness {
        t: None,
        control: None,
        value,
        note: format!("{note} (pair {i} of {})", rows.len()),
    };
    let mut out = vec![
        ConditionReport::upper("kernel_gap", gap, KERNEL_GAP_TOL, vec![w(gi, gap, "largest |V(T)|")]),
        ConditionReport::upper("endpoint_form", form, s.tol, vec![w(fi, form, "largest form value")]),
    ];
    let mut scaling = ConditionReport::upper("endpoint_form_scaling", defect, 1e-12, vec![w(si, defect, &format!("relative defect of value(c nu, c psi1) - c value(nu, psi1), c = {c}"))]);
    if flips > 0 {
        scaling = scaling.with_verdict(Verdict::Violated);
    }
    out.push(scaling);
    let mut rng_fields = random_sine_fields(p.control_set.dim(), 2 * n + 2, s.max_mode, p.horizon, sc.spec.seed.wrapping_add(2));
    let probes: Vec<StageField> = rng_fields
        .drain(..)
        .map(|f| {
            let smp = &ex.base.traj.samples;
            (0..ex.base.steps()).map(|k| std::array::from_fn(|st| f.eval(smp.stage_time(k, st)).0)).collect()
        })
        .collect();
    let r = multiplier_rank(p, &ex.base, &probes)?;
    out.push(ConditionReport::lower("multiplier_rank", r.rank as f64, n as f64, vec![]));
    Ok((out, r))
}

fn slope_checks(sc: &Scenario) -> Result<(Vec<ConditionReport>, SlopeTable)> {
    let p = &sc.problem;
    let s = &sc.spec.solver;
    let eps: Vec<f64> = s.slopes.epsilons.clone().unwrap_or_else(|| NEEDLE_EPSILONS.iter().map(|e| e * p.horizon.min(1.0)).collect());
    let judge = |id: &str, row: &crate::variation::SlopeRow, bound: f64, lower: bool| {
        if row.max() <= NOISE_FLOOR {
            return ConditionReport::upper(id, row.max(), NOISE_FLOOR, vec![]).noted("exact to noise: largest entry of the row");
        }
        let r = if lower {
            ConditionReport::lower(id, row.slope, bound, vec![])
        } else {
            ConditionReport::upper(id, (row.slope - 2.0).abs(), bound, vec![])
        };
        r.noted(&format!("slope {:.6} over {} steps", row.slope, row.values.len()))
    };
    match &p.control_set {
        ControlSet::FiniteSet { values } => {
            let start = s.slopes.start * p.horizon;
            if start + eps[0] > p.horizon {
                return Err(Error::Config("needle sweep leaves the horizon".into()));
            }
            let ub = sc.ubar.at(start);
            let v = match &s.slopes.value {
                Some(v) => DVector::from_column_slice(v),
                None => values.iter().find(|v| **v != ub).cloned().ok_or_else(|| Error::Config("the control set has a single member".into()))?,
            };
            let rep = verify_needle_taylor(p, &sc.ubar, &Control::constant(p.horizon, v), start, &eps, s.step)?;
            let a = rep.row("V-X");
            let b = rep.row("V-X-Y");
            Ok((
                vec![judge("slope_needle_V-X", a, 1.5, true), judge("slope_needle_V-X-Y", b, 2.2, true)],
                SlopeTable::from_report("needle", &rep),
            ))
        }
        ControlSet::OpenBox { lower, upper } => {
            let dir = match &s.slopes.value {
                Some(v) => DVector::from_column_slice(v),
                None => (upper - lower) * 0.05,
            };
            let h = p.horizon;
            let v = Control::smooth("classical_direction", h, move |t| &dir * (1.0 + (std::f64::consts::PI * t / h).sin()));
            let rep = verify_classical_expansion(p, &sc.ubar, &v, &eps, s.step)?;
            let a = rep.row("Ve-eV");
            let b = rep.row("Ve-eV-e2Y");
            Ok((
                vec![
                    judge("slope_classical_Ve-eV", a, 0.2, false),
                    judge("slope_classical_Ve-eV-e2Y", b, 2.5, true),
                ],
                SlopeTable::from_report("classical", &rep),
            ))
        }
    }
}
