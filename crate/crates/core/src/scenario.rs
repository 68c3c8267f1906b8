//! Scenario definitions: the JSON schema, the builtin dynamics registry, the
//! three desk scenarios and the brute-force optimum over grid controls.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::builtin::{FlatLq, FrameFieldEnergy, LinearEuclidean, RotationDecay, SphereDrift};
use crate::dynamics::{integrate_trajectory, Control, ControlGrid, ControlProblem, ControlSet, Dynamics};
use crate::error::{Error, Result};
use crate::manifold::{geodesic, log_map, ChartSpec, CurvePath, ManifoldChart};

pub const SCHEMA_VERSION: u32 = 1;

/// Largest number of grid controls `brute_force_optimum` enumerates.
pub const ENUMERATION_BUDGET: u128 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub schema: u32,
    pub name: String,
    pub chart: ChartSpec,
    pub problem: ProblemSpec,
    pub base: BaseSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<OutputSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub dynamics: DynamicsSpec,
    pub control_set: ControlSetSpec,
    pub y0: Vec<f64>,
    /// Fixed terminal point; `null` for a free endpoint.
    #[serde(default)]
    pub y1: Option<Vec<f64>>,
    pub horizon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builtin", rename_all = "snake_case", deny_unknown_fields)]
pub enum DynamicsSpec {
    /// `u³e^{−(R²+|x|²)}(x₂∂₁ − x₁∂₂)` with cost `u²e^{−(R²+|x|²)}`.
    RotationDecay {
        #[serde(rename = "R")]
        radius: f64,
    },
    /// `ẏ = u`, `f⁰ = (y² + u²)/2` on the line.
    FlatLq,
    /// `ẏ = Ay + Bu`, `f⁰ = ½yᵀQy + ½uᵀRu + cᵀy`; matrices as row lists.
    Linear {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        #[serde(default)]
        q: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        r: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        c: Option<Vec<f64>>,
    },
    /// `ẏ = Σuᵢeᵢ(y)` over the chart's orthonormal frame, `f⁰ = ½|u|²`.
    FrameEnergy,
    SphereDrift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlSetSpec {
    Finite(Vec<Vec<f64>>),
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseSpec {
    /// Exhaustive search over piecewise-constant controls on `intervals` pieces.
    BruteForce { intervals: usize },
    Grid { values: Vec<Vec<f64>> },
    Constant { value: Vec<f64> },
    /// The optimal feedback of the flat LQ problem.
    Riccati,
    /// Frame components of the geodesic from `y0` to `y1`.
    Geodesic,
    /// Frame components of the geodesic with initial velocity `velocity`;
    /// the terminal point is where it lands at the horizon.
    GeodesicVelocity { velocity: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    /// Largest RK4 step.
    pub step: f64,
    /// Relative step of synthesized partials.
    pub fd_step: f64,
    /// Tolerance of the sign conditions.
    pub tol: f64,
    /// Thickness of the critical set; `null` for `1e−7(1 + |H(ū)|)`.
    pub tol_h: Option<f64>,
    pub stationarity_tol: f64,
    pub beta: f64,
    pub eps0: f64,
    pub samples: usize,
    /// Random fields in the energy and endpoint-form scans.
    pub energy_fields: usize,
    pub kernel_pairs: usize,
    /// Highest Fourier sine mode of the random fields.
    pub max_mode: usize,
    /// Multiplier scaling used by the covariance check.
    pub scale: f64,
    pub slopes: SlopesSpec,
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec {
            step: 1e-3,
            fd_step: crate::dynamics::DEFAULT_FD_STEP,
            tol: 1e-8,
            tol_h: None,
            stationarity_tol: 1e-6,
            beta: 0.01,
            eps0: 0.05,
            samples: 200,
            energy_fields: 50,
            kernel_pairs: 20,
            max_mode: 8,
            scale: 2.0,
            slopes: SlopesSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlopesSpec {
    /// Decreasing sweep; `null` picks the needle or classical default.
    pub epsilons: Option<Vec<f64>>,
    /// Needle start as a fraction of the horizon.
    pub start: f64,
    /// Needle replacement value; `null` picks the first member different from ū.
    pub value: Option<Vec<f64>>,
}

impl Default for SlopesSpec {
    fn default() -> Self {
        SlopesSpec { epsilons: None, start: 0.3, value: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: Option<String>,
}

impl ScenarioSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ScenarioSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario specs serialize")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::Config(format!("unsupported schema {} (expected {SCHEMA_VERSION})", self.schema)));
        }
        let s = &self.solver;
        for (name, v) in [
            ("step", s.step),
            ("fd_step", s.fd_step),
            ("tol", s.tol),
            ("stationarity_tol", s.stationarity_tol),
            ("eps0", s.eps0),
            ("scale", s.scale),
            ("horizon", self.problem.horizon),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if let Some(t) = s.tol_h {
            if !(t > 0.0) {
                return Err(Error::Config(format!("tol_h must be positive, got {t}")));
            }
        }
        if !(s.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be nonnegative, got {}", s.beta)));
        }
        if s.max_mode == 0 {
            return Err(Error::Config("max_mode must be at least 1".into()));
        }
        if let Some(e) = &s.slopes.epsilons {
            if e.len() < 2 || e.iter().any(|x| !(*x > 0.0)) || e.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::Config("slope epsilons must be positive and strictly decreasing".into()));
            }
        }
        if !(0.0..1.0).contains(&s.slopes.start) {
            return Err(Error::Config("slope start must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if r == 0 || c == 0 || rows.iter().any(|x| x.len() != c) {
        return Err(Error::Config(format!("matrix `{what}` must be a nonempty list of equal-length rows")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Resolves a dynamics entry of the builtin registry.
pub fn build_dynamics(spec: &DynamicsSpec, chart: &ManifoldChart) -> Result<Arc<dyn Dynamics>> {
    Ok(match spec {
        DynamicsSpec::RotationDecay { radius } => {
            if !(*radius > 0.0) {
                return Err(Error::Config(format!("R must be positive, got {radius}")));
            }
            Arc::new(RotationDecay::new(*radius))
        }
        DynamicsSpec::FlatLq => Arc::new(FlatLq),
        DynamicsSpec::Linear { a, b, q, r, c } => {
            let a = matrix(a, "a")?;
            let b = matrix(b, "b")?;
            let (n, m) = (a.nrows(), b.ncols());
            if a.ncols() != n || b.nrows() != n {
                return Err(Error::Config("linear dynamics needs square a and b with matching rows".into()));
            }
            let q = q.as_ref().map(|x| matrix(x, "q")).transpose()?.unwrap_or_else(|| DMatrix::zeros(n, n));
            let r = r.as_ref().map(|x| matrix(x, "r")).transpose()?.unwrap_or_else(|| DMatrix::zeros(m, m));
            let c = c.as_ref().map(|x| DVector::from_column_slice(x)).unwrap_or_else(|| DVector::zeros(n));
            if q.shape() != (n, n) || r.shape() != (m, m) || c.len() != n {
                return Err(Error::Config("linear cost matrices do not match the state and control dimensions".into()));
            }
            Arc::new(LinearEuclidean::new(a, b).with_cost(q, r, c))
        }
        DynamicsSpec::FrameEnergy => Arc::new(FrameFieldEnergy { chart: chart.clone() }),
        DynamicsSpec::SphereDrift => Arc::new(SphereDrift),
    })
}

pub fn build_control_set(spec: &ControlSetSpec) -> Result<ControlSet> {
    let set = match spec {
        ControlSetSpec::Finite(values) => ControlSet::FiniteSet {
            values: values.iter().map(|v| DVector::from_column_slice(v)).collect(),
        },
        ControlSetSpec::Box { lower, upper } => ControlSet::OpenBox {
            lower: DVector::from_column_slice(lower),
            upper: DVector::from_column_slice(upper),
        },
    };
    set.validate().map_err(|e| Error::Config(format!("control set: {e}")))?;
    Ok(set)
}

/// A resolved scenario: the problem and its base control.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub problem: ControlProblem,
    pub ubar: Control,
    /// Cost of the brute-force optimum and the number of controls searched.
    pub enumeration: Option<(f64, usize)>,
}

impl Scenario {
    pub fn from_spec(spec: ScenarioSpec) -> Result<Self> {
        spec.validate()?;
        let chart = spec.chart.build()?;
        let dynamics = build_dynamics(&spec.problem.dynamics, &chart)?;
        let set = build_control_set(&spec.problem.control_set)?;
        let p = &spec.problem;
        let mut problem = ControlProblem::new(chart.clone(), dynamics, set, DVector::from_column_slice(&p.y0), p.horizon)
            .map_err(|e| Error::Config(format!("problem: {e}")))?
            .with_fd_step(spec.solver.fd_step);
        if let Some(y1) = &p.y1 {
            if y1.len() != p.y0.len() {
                return Err(Error::Config("y1 and y0 have different lengths".into()));
            }
            problem = problem.with_endpoint(DVector::from_column_slice(y1));
        }
        let mut enumeration = None;
        let ubar = match &spec.base {
            BaseSpec::BruteForce { intervals } => {
                let (grid, cost, count) = brute_force_optimum(&problem, *intervals, spec.solver.step)?;
                enumeration = Some((cost, count));
                Control::Grid(grid)
            }
            BaseSpec::Grid { values } => {
                let g = ControlGrid::uniform(p.horizon, values.iter().map(|v| DVector::from_column_slice(v)).collect());
                g.validate().map_err(|e| Error::Config(format!("base grid: {e}")))?;
                if values.iter().any(|v| !problem.control_set.contains(&DVector::from_column_slice(v))) {
                    return Err(Error::Config("base grid leaves the control set".into()));
                }
                Control::Grid(g)
            }
            BaseSpec::Constant { value } => {
                let v = DVector::from_column_slice(value);
                if !problem.control_set.contains(&v) {
                    return Err(Error::Config("base value is not in the control set".into()));
                }
                Control::constant(p.horizon, v)
            }
            BaseSpec::Riccati => {
                if !matches!(p.dynamics, DynamicsSpec::FlatLq) || p.y1.is_some() {
                    return Err(Error::Config("the riccati base needs the free-endpoint flat_lq dynamics".into()));
                }
                riccati_control(p.y0[0], p.horizon)
            }
            BaseSpec::Geodesic | BaseSpec::GeodesicVelocity { .. } => {
                if !matches!(p.dynamics, DynamicsSpec::FrameEnergy) {
                    return Err(Error::Config("geodesic bases need the frame_energy dynamics".into()));
                }
                let v0 = match &spec.base {
                    BaseSpec::GeodesicVelocity { velocity } => DVector::from_column_slice(velocity),
                    _ => {
                        let y1 = p.y1.as_ref().ok_or_else(|| Error::Config("the geodesic base needs y1".into()))?;
                        log_map(&chart, &problem.y0, &DVector::from_column_slice(y1)).map_err(|e| Error::Config(format!("geodesic base refused: {e}")))? / p.horizon
                    }
                };
                let (u, end) = geodesic_control(&chart, &problem.y0, &v0, p.horizon, spec.solver.step)?;
                if matches!(spec.base, BaseSpec::GeodesicVelocity { .. }) {
                    if let Some(y1) = &p.y1 {
                        if (DVector::from_column_slice(y1) - &end).amax() > 1e-6 {
                            return Err(Error::Config("y1 does not match the end of the geodesic with the given velocity".into()));
                        }
                    }
                    problem = problem.with_endpoint(end);
                }
                u
            }
        };
        Ok(Scenario { spec, problem, ubar, enumeration })
    }

    pub fn fixed_endpoint(&self) -> bool {
        self.problem.y1.is_some()
    }
}

/// The optimal feedback `−tanh(T−t)y(t)` of the flat LQ problem written as
/// an open-loop control, `−y₀ sinh(T−t)/cosh T`.
pub fn riccati_control(y0: f64, horizon: f64) -> Control {
    Control::smooth("riccati", horizon, move |t| DVector::from_element(1, -y0 * (horizon - t).sinh() / horizon.cosh()))
}

fn hermite(path: &CurvePath, t: f64) -> (DVector<f64>, DVector<f64>) {
    let h = path.times[1] - path.times[0];
    let k = ((t / h).floor() as usize).min(path.times.len() - 2);
    let s = (t - path.times[k]) / h;
    let (x0, x1, v0, v1, a0, a1) = (&path.points[k], &path.points[k + 1], &path.velocities[k], &path.velocities[k + 1], &path.accelerations[k], &path.accelerations[k + 1]);
    let (h00, h10, h01, h11) = (2.0 * s.powi(3) - 3.0 * s * s + 1.0, s.powi(3) - 2.0 * s * s + s, -2.0 * s.powi(3) + 3.0 * s * s, s.powi(3) - s * s);
    let x = x0 * h00 + v0 * (h10 * h) + x1 * h01 + v1 * (h11 * h);
    let v = v0 * h00 + a0 * (h10 * h) + v1 * h01 + a1 * (h11 * h);
    (x, v)
}

/// Frame components `uᵢ(t) = ⟨γ̇(t), eᵢ(γ(t))⟩` of the geodesic from `x` with
/// initial velocity `v`, and its end point. The geodesic is sampled at a
/// quarter of `step` and interpolated by cubic Hermite polynomials.
pub fn geodesic_control(chart: &ManifoldChart, x: &DVector<f64>, v: &DVector<f64>, horizon: f64, step: f64) -> Result<(Control, DVector<f64>)> {
    let n = (horizon / (0.25 * step)).ceil().max(4.0);
    let path = geodesic(chart, x, &(v * horizon), 1.0, 1.0 / n)?;
    let end = path.end().clone();
    let chart = chart.clone();
    let path = Arc::new(path);
    let u = Control::smooth("geodesic", horizon, move |t| {
        let (x, w) = hermite(&path, (t / horizon).clamp(0.0, 1.0));
        let p = x.as_slice();
        chart.orthonormal_frame(p).transpose() * chart.metric(p) * w / horizon
    });
    Ok((u, end))
}

/// Exact minimizer of the cost over controls constant on `intervals` equal
/// pieces with values in the finite control set. Ties go to the smallest
/// index sequence in lexicographic order (first interval most significant).
/// Returns the grid, its cost and the number of controls searched.
pub fn brute_force_optimum(problem: &ControlProblem, intervals: usize, step: f64) -> Result<(ControlGrid, f64, usize)> {
    let values = match &problem.control_set {
        ControlSet::FiniteSet { values } => values.clone(),
        ControlSet::OpenBox { .. } => return Err(Error::Unsupported("brute force needs a finite control set".into())),
    };
    if intervals == 0 {
        return Err(Error::Config("brute force needs at least one interval".into()));
    }
    if problem.y1.is_some() {
        return Err(Error::Unsupported("brute force handles free endpoints only".into()));
    }
    let k = values.len() as u128;
    let count = (0..intervals).try_fold(1u128, |acc, _| acc.checked_mul(k)).unwrap_or(u128::MAX);
    if count > ENUMERATION_BUDGET {
        return Err(Error::Budget { count, budget: ENUMERATION_BUDGET });
    }
    let count = count as usize;
    let grid_of = |idx: usize| {
        let mut digits = vec![0usize; intervals];
        let mut r = idx;
        for d in digits.iter_mut().rev() {
            *d = r % values.len();
            r /= values.len();
        }
        ControlGrid::uniform(problem.horizon, digits.iter().map(|&d| values[d].clone()).collect())
    };
    let best = (0..count)
        .into_par_iter()
        .map(|idx| integrate_trajectory(problem, &Control::Grid(grid_of(idx)), step).map(|t| (t.cost, idx)))
        .try_reduce(
            || (f64::INFINITY, usize::MAX),
            |a, b| Ok(if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) { b } else { a }),
        )?;
    Ok((grid_of(best.1), best.0, count))
}

/// A field `c(t) = Σₖ aₖ sin(kπt/T)` in frame components with its derivative.
#[derive(Clone, Debug, PartialEq)]
pub struct SineField {
    pub horizon: f64,
    /// `coeffs[k][i]`: mode `k + 1` of component i.
    pub coeffs: Vec<DVector<f64>>,
}

impl SineField {
    /// Coefficients uniform in `[−1, 1]`, damped by `1/k`.
    pub fn random(dim: usize, max_mode: usize, horizon: f64, rng: &mut ChaCha8Rng) -> Self {
        let coeffs = (1..=max_mode).map(|k| DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0) / k as f64)).collect();
        SineField { horizon, coeffs }
    }

    /// `sin(πt/T)·dir`, the lowest Jacobi mode along `dir`.
    pub fn mode(dir: DVector<f64>, horizon: f64) -> Self {
        SineField { horizon, coeffs: vec![dir] }
    }

    pub fn eval(&self, t: f64) -> (DVector<f64>, DVector<f64>) {
        let n = self.coeffs[0].len();
        let w = PI / self.horizon;
        self.coeffs.iter().enumerate().fold((DVector::zeros(n), DVector::zeros(n)), |(c, d), (k, a)| {
            let kw = (k + 1) as f64 * w;
            (c + a * (kw * t).sin(), d + a * (kw * (kw * t).cos()))
        })
    }
}

/// Seeded sine fields for the energy and endpoint-form scans.
pub fn random_sine_fields(dim: usize, count: usize, max_mode: usize, horizon: f64, seed: u64) -> Vec<SineField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| SineField::random(dim, max_mode, horizon, &mut rng)).collect()
}

fn chart_spec(builtin: &str, radius: Option<f64>) -> ChartSpec {
    let mut c = ChartSpec::builtin(builtin).expect("builtin chart");
    c.params.radius = radius;
    c
}

/// The hyperbolic surface with the rotation-decay dynamics on `U = {1,2,3,4}`,
/// base control from brute force over `intervals` pieces.
pub fn scenario_hyperbolic_discrete(radius: f64, y0: [f64; 2], intervals: usize, horizon: f64) -> ScenarioSpec {
    ScenarioSpec {
        schema: SCHEMA_VERSION,
        name: "hyperbolic_discrete".into(),
        chart: chart_spec("hyperbolic_R", Some(radius)),
        problem: ProblemSpec {
            dynamics: DynamicsSpec::RotationDecay { radius },
            control_set: ControlSetSpec::Finite(vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]]),
            y0: y0.to_vec(),
            y1: None,
            horizon,
        },
        base: BaseSpec::BruteForce { intervals },
        solver: SolverSpec::default(),
        seed: 1,
        output: None,
    }
}

/// Geodesic energy on a two-dimensional chart with the chart's orthonormal
/// frame as control fields: `to` is either the endpoint (joined by the
/// minimizing geodesic) or an initial velocity.
pub fn scenario_geodesic_energy(chart: ChartSpec, y0: [f64; 2], to: GeodesicTarget, horizon: f64) -> ScenarioSpec {
    let (y1, base, name) = match to {
        GeodesicTarget::Endpoint(y1) => (Some(y1.to_vec()), BaseSpec::Geodesic, "geodesic_energy"),
        GeodesicTarget::Velocity(v) => (None, BaseSpec::GeodesicVelocity { velocity: v.to_vec() }, "geodesic_energy_velocity"),
    };
    ScenarioSpec {
        schema: SCHEMA_VERSION,
        name: name.into(),
        chart,
        problem: ProblemSpec {
            dynamics: DynamicsSpec::FrameEnergy,
            control_set: ControlSetSpec::Box {
                lower: vec![-5.0, -5.0],
                upper: vec![5.0, 5.0],
            },
            y0: y0.to_vec(),
            y1,
            horizon,
        },
        base,
        solver: SolverSpec::default(),
        seed: 1,
        output: None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GeodesicTarget {
    Endpoint([f64; 2]),
    Velocity([f64; 2]),
}

/// `ẏ = u` on the line, `f⁰ = (y² + u²)/2`, `y₀ = 1`, `T = 1`, free endpoint,
/// with the Riccati optimum as base.
pub fn scenario_flat_lq() -> ScenarioSpec {
    let mut chart = chart_spec("euclidean", None);
    chart.dim = 1;
    chart.name = "line".into();
    ScenarioSpec {
        schema: SCHEMA_VERSION,
        name: "flat_lq".into(),
        chart,
        problem: ProblemSpec {
            dynamics: DynamicsSpec::FlatLq,
            control_set: ControlSetSpec::Box { lower: vec![-5.0], upper: vec![5.0] },
            y0: vec![1.0],
            y1: None,
            horizon: 1.0,
        },
        base: BaseSpec::Riccati,
        solver: SolverSpec::default(),
        seed: 1,
        output: None,
    }
}

/// The S² quarter equator from `(π/2, 0)` to `(π/2, π/2)` in unit time.
pub fn scenario_sphere_quarter_equator() -> ScenarioSpec {
    scenario_geodesic_energy(chart_spec("sphere", None), [PI / 2.0, 0.0], GeodesicTarget::Endpoint([PI / 2.0, PI / 2.0]), 1.0)
}

/// The S² equator arc of length 1.5π at unit speed, past the conjugate point.
pub fn scenario_sphere_long_arc() -> ScenarioSpec {
    let mut s = scenario_geodesic_energy(chart_spec("sphere", None), [PI / 2.0, 0.0], GeodesicTarget::Velocity([0.0, 1.0]), 1.5 * PI);
    s.name = "geodesic_energy_long_arc".into();
    s
}
