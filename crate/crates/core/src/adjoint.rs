//! First and second order duals along a base trajectory, the transition
//! matrices of the frame-component variational equation, and the Hamiltonian
//! `H^ν(t, x, ψ, u) = ψ(f(t, x, u)) + ν f⁰(t, x, u)` with its derivatives.
//!
//! In parallel-frame components with `F = (⟨∇_{e_j} f, eᵢ⟩)`:
//! `ṗ = −Fᵀp − ν Eᵀ∇f⁰` for `pᵢ = ψ(eᵢ)`, and
//! `Ẇ = −FᵀW − WF + M − Hmat`, `W(T) = 0`, with
//! `M_ik = R(ψ̃, eᵢ, f, e_k)` and `Hmat_ik = ∇²_x H^ν(eᵢ, e_k)`.
//! Only `½(W + Wᵀ)` enters the second order conditions.

use nalgebra::{DMatrix, DVector};

use crate::along::{BaseGeometry, StageField, StageGeom};
use crate::dynamics::ControlProblem;
use crate::error::{Error, Result};
use crate::manifold::{integrate_along, Direction};

/// A covector field along the base curve, per node.
#[derive(Clone, Debug, PartialEq)]
pub struct CotangentPath {
    pub times: Vec<f64>,
    /// `ψ(eᵢ)`.
    pub comps: Vec<DVector<f64>>,
    /// Chart components `ψ_k`.
    pub covectors: Vec<DVector<f64>>,
}

/// Multiplier pair `(ν, ψ₁)` with `ν ≤ 0` and `ψ₁` a covector at `ȳ(T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DualPair {
    pub nu: f64,
    pub psi1: DVector<f64>,
}

impl DualPair {
    pub fn new(nu: f64, psi1: DVector<f64>) -> Result<Self> {
        if nu > 0.0 || !nu.is_finite() {
            return Err(Error::Precondition(format!("multiplier ν must be nonpositive, got {nu}")));
        }
        Ok(DualPair { nu, psi1 })
    }

    /// `ν = −1`, `ψ₁ = 0`: the free-endpoint setting.
    pub fn free_endpoint(n: usize) -> Self {
        DualPair { nu: -1.0, psi1: DVector::zeros(n) }
    }

    pub fn scaled(&self, c: f64) -> Self {
        DualPair {
            nu: self.nu * c,
            psi1: &self.psi1 * c,
        }
    }

    /// Scales so that `max(|ν|, |ψ₁|) = 1`, with `|ψ₁|` the conorm at `x`.
    pub fn normalized(&self, base: &BaseGeometry, problem: &ControlProblem) -> Self {
        let end = base.traj.end();
        let s = self.nu.abs().max(problem.chart.conorm(end.as_slice(), &self.psi1));
        if s > 0.0 {
            self.scaled(1.0 / s)
        } else {
            self.clone()
        }
    }
}

/// `Eᵀ∇f⁰` at a stage.
fn cost_gradient(s: &StageGeom) -> DVector<f64> {
    s.e.transpose() * &s.cov.df0
}

/// `(∇²f(eᵢ, e_k))` contracted with the chart covector `psi`, plus `ν∇²f⁰`.
pub fn hessian_matrix(s: &StageGeom, psi: &DVector<f64>, nu: f64) -> DMatrix<f64> {
    let n = s.x.len();
    let b = DMatrix::from_fn(n, n, |j, k| (0..n).map(|i| psi[i] * s.cov.d2f[k][(i, j)]).sum::<f64>());
    s.e.transpose() * (b + &s.cov.d2f0 * nu) * &s.e
}

fn frame_terminal(base: &BaseGeometry, psi1: &DVector<f64>) -> Result<DVector<f64>> {
    if psi1.len() != base.dim() {
        return Err(Error::Dimension(format!("ψ₁ has {} components, state has {}", psi1.len(), base.dim())));
    }
    Ok(base.node(base.steps()).co_to_frame(psi1))
}

pub fn solve_first_adjoint(base: &BaseGeometry, duals: &DualPair) -> Result<CotangentPath> {
    let p1 = frame_terminal(base, &duals.psi1)?;
    let nu = duals.nu;
    let comps = base.integrate(Direction::Backward, p1, |s, _, _, p| -(s.fmat.transpose() * p) - cost_gradient(s) * nu);
    Ok(CotangentPath {
        times: base.traj.times.clone(),
        covectors: base.co_to_chart(&comps),
        comps,
    })
}

/// The same dual equation in chart components,
/// `ψ̇_k = Γᵐ_ik ẏⁱ ψ_m − ψᵢ(∇f)ⁱ_k − ν ∂_k f⁰`.
pub fn first_adjoint_chart(base: &BaseGeometry, duals: &DualPair) -> Vec<DVector<f64>> {
    let nu = duals.nu;
    integrate_along(&base.traj.samples, Direction::Backward, duals.psi1.clone(), |k, st, w| {
        let s = &base.stages[k][st];
        s.gam.along(&s.v).transpose() * w - s.cov.df.transpose() * w - &s.cov.df0 * nu
    })
}

/// The second order dual in frame components and as a chart bilinear form
/// `w(X, Y) = (EᵀgX)ᵀ W (EᵀgY)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SecondDual {
    pub psi: CotangentPath,
    pub w: Vec<DMatrix<f64>>,
    pub w_chart: Vec<DMatrix<f64>>,
}

impl SecondDual {
    /// `½(W + Wᵀ)` at node k.
    pub fn sym(&self, k: usize) -> DMatrix<f64> {
        (&self.w[k] + self.w[k].transpose()) * 0.5
    }
}

/// Integrates ψ and W backward together so both see the same stage data.
pub fn solve_second_adjoint(base: &BaseGeometry, duals: &DualPair) -> Result<SecondDual> {
    let n = base.dim();
    let p1 = frame_terminal(base, &duals.psi1)?;
    let nu = duals.nu;
    let mut init = DVector::zeros(n + n * n);
    init.rows_mut(0, n).copy_from(&p1);
    let out = base.integrate(Direction::Backward, init, |s, _, _, z| {
        let p = z.rows(0, n).into_owned();
        let w = DMatrix::from_column_slice(n, n, z.rows(n, n * n).as_slice());
        let psi = s.co_from_frame(&p);
        let dp = -(s.fmat.transpose() * &p) - cost_gradient(s) * nu;
        let dw = -(s.fmat.transpose() * &w) - &w * &s.fmat + s.curvature_matrix(&psi) - hessian_matrix(s, &psi, nu);
        let mut r = DVector::zeros(n + n * n);
        r.rows_mut(0, n).copy_from(&dp);
        r.rows_mut(n, n * n).copy_from(&DVector::from_column_slice(dw.as_slice()));
        r
    });
    let comps: Vec<DVector<f64>> = out.iter().map(|z| z.rows(0, n).into_owned()).collect();
    let w: Vec<DMatrix<f64>> = out.iter().map(|z| DMatrix::from_column_slice(n, n, z.rows(n, n * n).as_slice())).collect();
    let w_chart = w
        .iter()
        .enumerate()
        .map(|(k, wk)| {
            let s = base.node(k);
            s.einv.transpose() * wk * &s.einv
        })
        .collect();
    Ok(SecondDual {
        psi: CotangentPath {
            times: base.traj.times.clone(),
            covectors: base.co_to_chart(&comps),
            comps,
        },
        w,
        w_chart,
    })
}

/// `w` integrated directly in chart components,
/// `ẇ = −(∇f)ᵀw − w∇f + Γ(ẏ)ᵀw + wΓ(ẏ) + m − h` with `m` and `h` the
/// curvature and Hessian forms in coordinates. Cross-check for [`solve_second_adjoint`].
pub fn second_adjoint_chart(base: &BaseGeometry, duals: &DualPair) -> Vec<DMatrix<f64>> {
    let n = base.dim();
    let nu = duals.nu;
    let mut init = DVector::zeros(n + n * n);
    init.rows_mut(0, n).copy_from(&duals.psi1);
    let out = integrate_along(&base.traj.samples, Direction::Backward, init, |k, st, z| {
        let s = &base.stages[k][st];
        let psi = z.rows(0, n).into_owned();
        let w = DMatrix::from_column_slice(n, n, z.rows(n, n * n).as_slice());
        let ga = s.gam.along(&s.v);
        let dpsi = ga.transpose() * &psi - s.cov.df.transpose() * &psi - &s.cov.df0 * nu;
        let pt = s.g.clone().try_inverse().expect("metric is invertible") * &psi;
        let unit = |i: usize| {
            let mut v = DVector::zeros(n);
            v[i] = 1.0;
            v
        };
        let m = DMatrix::from_fn(n, n, |i, j| s.riem.form(&s.g, &pt, &unit(i), &s.cov.f, &unit(j)));
        let h = DMatrix::from_fn(n, n, |j, kk| (0..n).map(|i| psi[i] * s.cov.d2f[kk][(i, j)]).sum::<f64>()) + &s.cov.d2f0 * nu;
        let a = &s.cov.df - &ga;
        let dw = -(a.transpose() * &w) - &w * &a + m - h;
        let mut r = DVector::zeros(n + n * n);
        r.rows_mut(0, n).copy_from(&dpsi);
        r.rows_mut(n, n * n).copy_from(&DVector::from_column_slice(dw.as_slice()));
        r
    });
    out.iter().map(|z| DMatrix::from_column_slice(n, n, z.rows(n, n * n).as_slice())).collect()
}

/// `Φ' = FΦ`, `Φ(0) = I` and `(Φ⁻¹)' = −Φ⁻¹F`, integrated separately.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub phi: Vec<DMatrix<f64>>,
    pub phi_inv: Vec<DMatrix<f64>>,
}

impl Transition {
    /// Largest `|Φ·Φ⁻¹ − I|` over nodes.
    pub fn identity_defect(&self) -> f64 {
        self.phi
            .iter()
            .zip(&self.phi_inv)
            .map(|(a, b)| {
                let n = a.nrows();
                (a * b - DMatrix::identity(n, n)).amax()
            })
            .fold(0.0, f64::max)
    }
}

fn matrix_flow(base: &BaseGeometry, left: bool) -> Vec<DMatrix<f64>> {
    let n = base.dim();
    let id = DMatrix::<f64>::identity(n, n);
    base.integrate(Direction::Forward, DVector::from_column_slice(id.as_slice()), |s, _, _, z| {
        let m = DMatrix::from_column_slice(n, n, z.as_slice());
        let d = if left { &s.fmat * m } else { -(m * &s.fmat) };
        DVector::from_column_slice(d.as_slice())
    })
    .iter()
    .map(|z| DMatrix::from_column_slice(n, n, z.as_slice()))
    .collect()
}

pub fn solve_transition(base: &BaseGeometry) -> Transition {
    Transition {
        phi: matrix_flow(base, true),
        phi_inv: matrix_flow(base, false),
    }
}

/// `X(t) = Φ(t) ∫₀ᵗ Φ⁻¹(s) F₁(s) ds` from a stage-sampled forcing, with Φ⁻¹
/// and the integral carried together.
pub fn variation_of_constants(base: &BaseGeometry, tr: &Transition, f1: &StageField) -> Vec<DVector<f64>> {
    let n = base.dim();
    let id = DMatrix::<f64>::identity(n, n);
    let mut init = DVector::zeros(n * n + n);
    init.rows_mut(0, n * n).copy_from(&DVector::from_column_slice(id.as_slice()));
    let out = base.integrate(Direction::Forward, init, |s, k, st, z| {
        let m = DMatrix::from_column_slice(n, n, z.rows(0, n * n).as_slice());
        let mut r = DVector::zeros(n * n + n);
        r.rows_mut(0, n * n).copy_from(&DVector::from_column_slice((-(&m * &s.fmat)).as_slice()));
        r.rows_mut(n * n, n).copy_from(&(&m * &f1[k][st]));
        r
    });
    out.iter().zip(&tr.phi).map(|(z, phi)| phi * z.rows(n * n, n)).collect()
}

/// Value and derivatives of `H^ν` at one point, all in chart components.
#[derive(Clone, Debug, PartialEq)]
pub struct HamiltonianDerivs {
    pub h: f64,
    /// `∇_x H`, a covector.
    pub dx: DVector<f64>,
    /// `∇²_x H(X, Y) = Xᵀ dxx Y`.
    pub dxx: DMatrix<f64>,
    pub du: Option<DVector<f64>>,
    pub duu: Option<DMatrix<f64>>,
    /// `[(a, j)] = ∂_a (∇_x H)_j`.
    pub dudx: Option<DMatrix<f64>>,
}

pub fn hamiltonian(problem: &ControlProblem, t: f64, x: &DVector<f64>, psi: &DVector<f64>, u: &DVector<f64>, nu: f64) -> f64 {
    psi.dot(&problem.f(t, x.as_slice(), u)) + nu * problem.f0(t, x.as_slice(), u)
}

pub fn hamiltonian_derivs(problem: &ControlProblem, t: f64, x: &DVector<f64>, psi: &DVector<f64>, u: &DVector<f64>, nu: f64) -> HamiltonianDerivs {
    let n = x.len();
    let c = problem.covariant(t, x.as_slice(), u);
    let h = psi.dot(&c.f) + nu * c.f0;
    let dx = c.df.transpose() * psi + &c.df0 * nu;
    let dxx = DMatrix::from_fn(n, n, |j, k| (0..n).map(|i| psi[i] * c.d2f[k][(i, j)]).sum::<f64>()) + &c.d2f0 * nu;
    let (du, duu, dudx) = if problem.control_set.is_box() {
        let d = problem.control_derivs(t, x.as_slice(), u);
        let m = u.len();
        (
            Some(d.duf.transpose() * psi + &d.duf0 * nu),
            Some(DMatrix::from_fn(m, m, |a, b| psi.dot(&d.duuf[a].column(b)) + nu * d.duuf0[(a, b)])),
            Some(DMatrix::from_fn(m, n, |a, j| psi.dot(&d.dudxf[a].column(j)) + nu * d.dudxf0[(a, j)])),
        )
    } else {
        (None, None, None)
    };
    HamiltonianDerivs { h, dx, dxx, du, duu, dudx }
}
