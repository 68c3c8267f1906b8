//! The controlled system `ẏ = f(t, y, u)`, its running cost `f⁰`, control
//! signals and trajectories.
//!
//! Derivatives in x are covariant:
//! `(∇f)ⁱ_j = ∂_j fⁱ + Γⁱ_jm fᵐ` and
//! `(∇²f)ⁱ_jk = ∂_k(∇f)ⁱ_j + Γⁱ_km (∇f)ᵐ_j − Γᵐ_kj (∇f)ⁱ_m`
//! (the newest derivative takes the last slot). When a [`Dynamics`] supplies no
//! coordinate partials they come from five-point differences and the result
//! is flagged.

pub mod builtin;
mod control;
mod trajectory;

pub use control::{ekeland_distance, Control, ControlGrid, ControlSet, TimeGrid};
pub use trajectory::{
    apriori_bounds_check, evaluate_cost, integrate_trajectory, integrate_trajectory_on, integrate_trajectory_with_breaks, AprioriReport, NodeRef,
    Trajectory,
};

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::manifold::ManifoldChart;

/// Coordinate x-partials at `(t, x, u)`.
#[derive(Clone, Debug, PartialEq)]
pub struct XPartials {
    /// `[(i, j)] = ∂_j fⁱ`.
    pub dxf: DMatrix<f64>,
    /// `[k][(i, j)] = ∂_k ∂_j fⁱ`.
    pub dxxf: Vec<DMatrix<f64>>,
    pub dxf0: DVector<f64>,
    pub dxxf0: DMatrix<f64>,
}

/// Coordinate u-partials at `(t, x, u)`.
#[derive(Clone, Debug, PartialEq)]
pub struct UPartials {
    /// `[(i, a)] = ∂_a fⁱ`.
    pub duf: DMatrix<f64>,
    pub duf0: DVector<f64>,
    /// `[a][(i, b)] = ∂_a ∂_b fⁱ`.
    pub duuf: Vec<DMatrix<f64>>,
    pub duuf0: DMatrix<f64>,
    /// `[a][(i, j)] = ∂_a ∂_j fⁱ`.
    pub duxf: Vec<DMatrix<f64>>,
    /// `[(a, j)] = ∂_a ∂_j f⁰`.
    pub duxf0: DMatrix<f64>,
}

/// Right-hand side and running cost, in chart coordinates.
pub trait Dynamics: Send + Sync {
    fn name(&self) -> String;
    fn state_dim(&self) -> usize;
    fn control_dim(&self) -> usize;
    fn f(&self, t: f64, x: &[f64], u: &[f64]) -> DVector<f64>;
    fn f0(&self, t: f64, x: &[f64], u: &[f64]) -> f64;

    fn x_partials(&self, _t: f64, _x: &[f64], _u: &[f64]) -> Option<XPartials> {
        None
    }

    fn u_partials(&self, _t: f64, _x: &[f64], _u: &[f64]) -> Option<UPartials> {
        None
    }
}

/// Default relative step of the synthesized partials.
pub const DEFAULT_FD_STEP: f64 = 1e-3;

fn stencil<F: Fn(f64) -> DVector<f64>>(g: F, h: f64) -> DVector<f64> {
    (g(-2.0 * h) - g(-h) * 8.0 + g(h) * 8.0 - g(2.0 * h)) / (12.0 * h)
}

fn shifted(x: &[f64], m: usize, d: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    y[m] += d;
    y
}

/// `f` and `f⁰` stacked as one vector, for differencing both at once.
fn stacked(dy: &dyn Dynamics, t: f64, x: &[f64], u: &[f64]) -> DVector<f64> {
    let f = dy.f(t, x, u);
    let n = f.len();
    let mut out = DVector::zeros(n + 1);
    out.rows_mut(0, n).copy_from(&f);
    out[n] = dy.f0(t, x, u);
    out
}

fn fd_first(g: &dyn Fn(&[f64]) -> DVector<f64>, x: &[f64], rel: f64) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = (0..x.len())
        .map(|m| {
            let h = rel * (1.0 + x[m].abs());
            stencil(|d| g(&shifted(x, m, d)), h)
        })
        .collect();
    DMatrix::from_columns(&cols)
}

/// Partials by nested five-point differences.
pub fn fd_x_partials(dy: &dyn Dynamics, t: f64, x: &[f64], u: &[f64], rel: f64) -> XPartials {
    let n = x.len();
    let g = |y: &[f64]| stacked(dy, t, y, u);
    let d1 = fd_first(&g, x, rel);
    let mut dxxf = Vec::with_capacity(n);
    let mut dxxf0 = DMatrix::zeros(n, n);
    for k in 0..n {
        let h = rel * (1.0 + x[k].abs());
        let dk = stencil(|d| DVector::from_column_slice(fd_first(&g, &shifted(x, k, d), rel).as_slice()), h);
        let dk = DMatrix::from_column_slice(n + 1, n, dk.as_slice());
        dxxf.push(dk.rows(0, n).into_owned());
        dxxf0.set_row(k, &dk.row(n));
    }
    let dxxf0 = (&dxxf0 + dxxf0.transpose()) * 0.5;
    XPartials {
        dxf: d1.rows(0, n).into_owned(),
        dxxf,
        dxf0: d1.row(n).transpose(),
        dxxf0,
    }
}

pub fn fd_u_partials(dy: &dyn Dynamics, t: f64, x: &[f64], u: &[f64], rel: f64) -> UPartials {
    let n = x.len();
    let m = u.len();
    let gu = |v: &[f64]| stacked(dy, t, x, v);
    let du = fd_first(&gu, u, rel);
    let mut duuf = Vec::with_capacity(m);
    let mut duuf0 = DMatrix::zeros(m, m);
    let mut duxf = Vec::with_capacity(m);
    let mut duxf0 = DMatrix::zeros(m, n);
    for a in 0..m {
        let h = rel * (1.0 + u[a].abs());
        let da = stencil(|d| DVector::from_column_slice(fd_first(&gu, &shifted(u, a, d), rel).as_slice()), h);
        let da = DMatrix::from_column_slice(n + 1, m, da.as_slice());
        duuf.push(da.rows(0, n).into_owned());
        duuf0.set_row(a, &da.row(n));
        let dx = stencil(
            |d| {
                let v = shifted(u, a, d);
                DVector::from_column_slice(fd_first(&|y: &[f64]| stacked(dy, t, y, &v), x, rel).as_slice())
            },
            h,
        );
        let dx = DMatrix::from_column_slice(n + 1, n, dx.as_slice());
        duxf.push(dx.rows(0, n).into_owned());
        duxf0.set_row(a, &dx.row(n));
    }
    UPartials {
        duf: du.rows(0, n).into_owned(),
        duf0: du.row(n).transpose(),
        duuf,
        duuf0: (&duuf0 + duuf0.transpose()) * 0.5,
        duxf,
        duxf0,
    }
}

/// Covariant x-derivatives of f and f⁰ at one point.
#[derive(Clone, Debug, PartialEq)]
pub struct CovariantDerivs {
    pub f: DVector<f64>,
    pub f0: f64,
    /// `[(i, j)] = (∇f)ⁱ_j`, so `∇_X f = df · X`.
    pub df: DMatrix<f64>,
    /// `[k][(i, j)] = (∇²f)ⁱ_jk`.
    pub d2f: Vec<DMatrix<f64>>,
    /// `∂_j f⁰`.
    pub df0: DVector<f64>,
    /// `(∇²f⁰)_jk`.
    pub d2f0: DMatrix<f64>,
    /// Partials came from differences.
    pub synthesized: bool,
}

impl CovariantDerivs {
    /// `∇²f(X, Y)` as a vector: `(∇²f)ⁱ_jk Xʲ Yᵏ`.
    pub fn hess_f(&self, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let n = self.f.len();
        let mut out = DVector::zeros(n);
        for k in 0..n {
            out += &self.d2f[k] * x * y[k];
        }
        out
    }
}

/// u-derivatives, with the mixed one made covariant in x:
/// `(∂_a ∇f)ⁱ_j = ∂_a∂_j fⁱ + Γⁱ_jm ∂_a fᵐ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlDerivs {
    pub duf: DMatrix<f64>,
    pub duf0: DVector<f64>,
    pub duuf: Vec<DMatrix<f64>>,
    pub duuf0: DMatrix<f64>,
    pub dudxf: Vec<DMatrix<f64>>,
    pub dudxf0: DMatrix<f64>,
    pub synthesized: bool,
}

/// The problem `(f, f⁰, U, y₀, T)` with an optional fixed endpoint.
#[derive(Clone)]
pub struct ControlProblem {
    pub chart: ManifoldChart,
    pub dynamics: Arc<dyn Dynamics>,
    pub control_set: ControlSet,
    pub y0: DVector<f64>,
    pub y1: Option<DVector<f64>>,
    pub horizon: f64,
    /// Relative step for synthesized partials.
    pub fd_step: f64,
}

impl std::fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlProblem")
            .field("chart", &self.chart.name())
            .field("dynamics", &self.dynamics.name())
            .field("control_set", &self.control_set)
            .field("y0", &self.y0.as_slice())
            .field("y1", &self.y1.as_ref().map(|v| v.as_slice().to_vec()))
            .field("horizon", &self.horizon)
            .finish()
    }
}

impl ControlProblem {
    pub fn new(chart: ManifoldChart, dynamics: Arc<dyn Dynamics>, control_set: ControlSet, y0: DVector<f64>, horizon: f64) -> Result<Self> {
        control_set.validate()?;
        if dynamics.state_dim() != chart.dim() || y0.len() != chart.dim() {
            return Err(Error::Dimension(format!(
                "dynamics `{}` has state dimension {}, chart has {}",
                dynamics.name(),
                dynamics.state_dim(),
                chart.dim()
            )));
        }
        if dynamics.control_dim() != control_set.dim() {
            return Err(Error::Dimension(format!(
                "dynamics `{}` takes {} controls, control set has dimension {}",
                dynamics.name(),
                dynamics.control_dim(),
                control_set.dim()
            )));
        }
        chart.check(y0.as_slice())?;
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        Ok(ControlProblem {
            chart,
            dynamics,
            control_set,
            y0,
            y1: None,
            horizon,
            fd_step: DEFAULT_FD_STEP,
        })
    }

    pub fn with_endpoint(mut self, y1: DVector<f64>) -> Self {
        self.y1 = Some(y1);
        self
    }

    pub fn with_fd_step(mut self, step: f64) -> Self {
        self.fd_step = step;
        self
    }

    pub fn f(&self, t: f64, x: &[f64], u: &DVector<f64>) -> DVector<f64> {
        self.dynamics.f(t, x, u.as_slice())
    }

    pub fn f0(&self, t: f64, x: &[f64], u: &DVector<f64>) -> f64 {
        self.dynamics.f0(t, x, u.as_slice())
    }

    pub fn covariant(&self, t: f64, x: &[f64], u: &DVector<f64>) -> CovariantDerivs {
        let n = x.len();
        let u = u.as_slice();
        let (p, synthesized) = match self.dynamics.x_partials(t, x, u) {
            Some(p) => (p, false),
            None => (fd_x_partials(self.dynamics.as_ref(), t, x, u, self.fd_step), true),
        };
        let f = self.dynamics.f(t, x, u);
        let f0 = self.dynamics.f0(t, x, u);
        if self.chart.is_flat_analytic() {
            return CovariantDerivs {
                f,
                f0,
                df: p.dxf,
                d2f: p.dxxf,
                df0: p.dxf0,
                d2f0: p.dxxf0,
                synthesized,
            };
        }
        let gam = self.chart.christoffel(x);
        let dgam = self.chart.christoffel_partials(x);
        let n3 = n * n * n;
        let dg = |m: usize, k: usize, i: usize, j: usize| dgam[m * n3 + (k * n + i) * n + j];
        let df = DMatrix::from_fn(n, n, |i, j| p.dxf[(i, j)] + (0..n).map(|m| gam.get(i, j, m) * f[m]).sum::<f64>());
        let mut d2f = Vec::with_capacity(n);
        for k in 0..n {
            d2f.push(DMatrix::from_fn(n, n, |i, j| {
                let mut d = p.dxxf[k][(i, j)];
                for m in 0..n {
                    d += dg(k, i, j, m) * f[m] + gam.get(i, j, m) * p.dxf[(m, k)];
                    d += gam.get(i, k, m) * df[(m, j)] - gam.get(m, k, j) * df[(i, m)];
                }
                d
            }));
        }
        let d2f0 = DMatrix::from_fn(n, n, |j, k| p.dxxf0[(j, k)] - (0..n).map(|m| gam.get(m, j, k) * p.dxf0[m]).sum::<f64>());
        CovariantDerivs {
            f,
            f0,
            df,
            d2f,
            df0: p.dxf0,
            d2f0,
            synthesized,
        }
    }

    pub fn control_derivs(&self, t: f64, x: &[f64], u: &DVector<f64>) -> ControlDerivs {
        let n = x.len();
        let u = u.as_slice();
        let (p, synthesized) = match self.dynamics.u_partials(t, x, u) {
            Some(p) => (p, false),
            None => (fd_u_partials(self.dynamics.as_ref(), t, x, u, self.fd_step), true),
        };
        let gam = self.chart.christoffel(x);
        let dudxf = (0..p.duf.ncols())
            .map(|a| DMatrix::from_fn(n, n, |i, j| p.duxf[a][(i, j)] + (0..n).map(|m| gam.get(i, j, m) * p.duf[(m, a)]).sum::<f64>()))
            .collect();
        ControlDerivs {
            duf: p.duf,
            duf0: p.duf0,
            duuf: p.duuf,
            duuf0: p.duuf0,
            dudxf,
            dudxf0: p.duxf0,
            synthesized,
        }
    }

    /// Whether x-partials are synthesized by differences.
    pub fn synthesizes_x_partials(&self) -> bool {
        let u = match &self.control_set {
            ControlSet::FiniteSet { values } => values[0].clone(),
            ControlSet::OpenBox { lower, upper } => (lower + upper) * 0.5,
        };
        self.dynamics.x_partials(0.0, self.y0.as_slice(), u.as_slice()).is_none()
    }
}

/// Dynamics from closures; all partials are synthesized.
pub struct ClosureDynamics {
    pub name: String,
    pub n: usize,
    pub m: usize,
    #[allow(clippy::type_complexity)]
    pub f: Box<dyn Fn(f64, &[f64], &[f64]) -> DVector<f64> + Send + Sync>,
    #[allow(clippy::type_complexity)]
    pub f0: Box<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>,
}

impl ClosureDynamics {
    pub fn new<F, G>(name: &str, n: usize, m: usize, f: F, f0: G) -> Self
    where
        F: Fn(f64, &[f64], &[f64]) -> DVector<f64> + Send + Sync + 'static,
        G: Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    {
        ClosureDynamics {
            name: name.into(),
            n,
            m,
            f: Box::new(f),
            f0: Box::new(f0),
        }
    }
}

impl Dynamics for ClosureDynamics {
    fn name(&self) -> String {
        self.name.clone()
    }
    fn state_dim(&self) -> usize {
        self.n
    }
    fn control_dim(&self) -> usize {
        self.m
    }
    fn f(&self, t: f64, x: &[f64], u: &[f64]) -> DVector<f64> {
        (self.f)(t, x, u)
    }
    fn f0(&self, t: f64, x: &[f64], u: &[f64]) -> f64 {
        (self.f0)(t, x, u)
    }
}
