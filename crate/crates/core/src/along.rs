//! Geometry cached along a base trajectory: a parallel orthonormal frame and,
//! at every RK4 stage, the metric, connection, curvature and the covariant
//! derivatives of `f(t, ·, ū(t))`. Linear equations along the base curve are
//! integrated in frame components, where `∇_ẏ` becomes `d/dt`.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{integrate_trajectory_with_breaks, Control, ControlDerivs, ControlProblem, CovariantDerivs, NodeRef, Trajectory};
use crate::error::Result;
use crate::manifold::{integrate_along, Christoffel, Direction, Riemann};

/// Everything linear equations need at one stage point.
#[derive(Clone, Debug)]
pub struct StageGeom {
    pub t: f64,
    pub x: DVector<f64>,
    /// `ẏ` at the stage.
    pub v: DVector<f64>,
    pub u: DVector<f64>,
    /// Frame vectors as columns.
    pub e: DMatrix<f64>,
    /// `Eᵀg`: frame components `⟨X, eᵢ⟩ = (einv·X)ᵢ`.
    pub einv: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub gam: Christoffel,
    pub riem: Riemann,
    pub cov: CovariantDerivs,
    /// `F = (⟨∇_{e_j} f, e_i⟩)`.
    pub fmat: DMatrix<f64>,
    pub ctrl: Option<ControlDerivs>,
}

impl StageGeom {
    pub fn to_frame(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.einv * x
    }

    pub fn from_frame(&self, q: &DVector<f64>) -> DVector<f64> {
        &self.e * q
    }

    /// Frame components `ψ(eᵢ)` of a covector.
    pub fn co_to_frame(&self, w: &DVector<f64>) -> DVector<f64> {
        self.e.transpose() * w
    }

    pub fn co_from_frame(&self, p: &DVector<f64>) -> DVector<f64> {
        &self.g * (&self.e * p)
    }

    /// Frame components of `R(eᵢ, a, b, c)` for all i.
    pub fn curvature_row(&self, a: &DVector<f64>, b: &DVector<f64>, c: &DVector<f64>) -> DVector<f64> {
        let n = self.x.len();
        DVector::from_fn(n, |i, _| self.riem.form(&self.g, &self.e.column(i).into_owned(), a, b, c))
    }

    /// `(R(ψ̃, eᵢ, f, e_k))_{ik}` with ψ̃ the vector dual to the covector `psi`.
    pub fn curvature_matrix(&self, psi: &DVector<f64>) -> DMatrix<f64> {
        let n = self.x.len();
        let pt = self.g.clone().try_inverse().expect("metric is invertible") * psi;
        let f = &self.cov.f;
        DMatrix::from_fn(n, n, |i, k| self.riem.form(&self.g, &pt, &self.e.column(i).into_owned(), f, &self.e.column(k).into_owned()))
    }
}

/// A base trajectory with its parallel frame and stage cache.
#[derive(Clone, Debug)]
pub struct BaseGeometry {
    pub traj: Trajectory,
    /// Frame at every node.
    pub frames: Vec<DMatrix<f64>>,
    pub stages: Vec<[StageGeom; 3]>,
}

fn stage_geom(problem: &ControlProblem, t: f64, x: &DVector<f64>, v: &DVector<f64>, u: &DVector<f64>, e: DMatrix<f64>, with_control: bool) -> StageGeom {
    let p = x.as_slice();
    let g = problem.chart.metric(p);
    let cov = problem.covariant(t, p, u);
    let einv = e.transpose() * &g;
    let fmat = &einv * &cov.df * &e;
    StageGeom {
        t,
        x: x.clone(),
        v: v.clone(),
        u: u.clone(),
        einv,
        g,
        gam: problem.chart.christoffel(p),
        riem: problem.chart.curvature(p),
        fmat,
        ctrl: with_control.then(|| problem.control_derivs(t, p, u)),
        cov,
        e,
    }
}

impl BaseGeometry {
    /// Integrates `ū` on a grid aligned with its own breakpoints and `breaks`,
    /// then transports the chart's orthonormal frame at y₀ along it.
    pub fn build(problem: &ControlProblem, control: &Control, max_step: f64, breaks: &[f64]) -> Result<Self> {
        let traj = integrate_trajectory_with_breaks(problem, control, max_step, breaks)?;
        Ok(Self::from_trajectory(problem, traj))
    }

    pub fn from_trajectory(problem: &ControlProblem, traj: Trajectory) -> Self {
        let n = problem.chart.dim();
        let chart = &problem.chart;
        let smp = &traj.samples;
        let e0 = chart.orthonormal_frame(problem.y0.as_slice());
        let rate = |x: &DVector<f64>, v: &DVector<f64>, e: &DMatrix<f64>| -> DMatrix<f64> { -chart.christoffel(x.as_slice()).along(v) * e };
        let flat = integrate_along(smp, Direction::Forward, DVector::from_column_slice(e0.as_slice()), |k, s, p| {
            let e = DMatrix::from_column_slice(n, n, p.as_slice());
            DVector::from_column_slice(rate(&smp.x[k][s], &smp.v[k][s], &e).as_slice())
        });
        let frames: Vec<DMatrix<f64>> = flat.iter().map(|p| DMatrix::from_column_slice(n, n, p.as_slice())).collect();
        let with_control = problem.control_set.is_box();
        let stages = (0..traj.steps())
            .map(|k| {
                let h = smp.step_width(k);
                let (e0, e1) = (&frames[k], &frames[k + 1]);
                let r0 = rate(&smp.x[k][0], &smp.v[k][0], e0);
                let r1 = rate(&smp.x[k][2], &smp.v[k][2], e1);
                let em = (e0 + e1) * 0.5 + (r0 - r1) * (h / 8.0);
                let es = [e0.clone(), em, e1.clone()];
                std::array::from_fn(|s| stage_geom(problem, smp.stage_time(k, s), &smp.x[k][s], &smp.v[k][s], &traj.controls[k][s], es[s].clone(), with_control))
            })
            .collect();
        BaseGeometry { traj, frames, stages }
    }

    pub fn steps(&self) -> usize {
        self.stages.len()
    }

    pub fn dim(&self) -> usize {
        self.traj.points[0].len()
    }

    pub fn at(&self, r: NodeRef) -> &StageGeom {
        &self.stages[r.step][r.stage]
    }

    /// Stage data at a node, taken from the step that starts there (or the
    /// last step for the final node).
    pub fn node(&self, k: usize) -> &StageGeom {
        if k < self.steps() {
            &self.stages[k][0]
        } else {
            &self.stages[k - 1][2]
        }
    }

    /// Largest `|EᵀgE − I|` over nodes.
    pub fn orthonormality_drift(&self) -> f64 {
        (0..=self.steps())
            .map(|k| {
                let s = self.node(k);
                let n = s.e.ncols();
                (s.e.transpose() * &s.g * &s.e - DMatrix::identity(n, n)).amax()
            })
            .fold(0.0, f64::max)
    }

    /// Node values of frame components as chart vectors.
    pub fn to_chart(&self, comps: &[DVector<f64>]) -> Vec<DVector<f64>> {
        comps.iter().enumerate().map(|(k, q)| &self.frames[k] * q).collect()
    }

    /// Node values of frame covector components as chart covectors.
    pub fn co_to_chart(&self, comps: &[DVector<f64>]) -> Vec<DVector<f64>> {
        comps.iter().enumerate().map(|(k, p)| self.node(k).co_from_frame(p)).collect()
    }

    /// Forward or backward RK4 of `p' = rhs(stage, p)` in frame components.
    pub fn integrate<F>(&self, dir: Direction, init: DVector<f64>, mut rhs: F) -> Vec<DVector<f64>>
    where
        F: FnMut(&StageGeom, usize, usize, &DVector<f64>) -> DVector<f64>,
    {
        integrate_along(&self.traj.samples, dir, init, |k, s, p| rhs(&self.stages[k][s], k, s, p))
    }

    /// Composite Simpson of a node integrand.
    pub fn integrate_nodes<F: FnMut(&StageGeom, NodeRef) -> f64>(&self, mut g: F) -> f64 {
        self.traj.integrate(|r| g(self.at(r), r))
    }
}

/// Values of a signal at every stage of a base grid.
pub type StageField = Vec<[DVector<f64>; 3]>;

/// Samples a control signal at the stage times of the base grid.
pub fn sample_stages(base: &BaseGeometry, c: &Control) -> StageField {
    let smp = &base.traj.samples;
    (0..base.steps())
        .map(|k| {
            let mid = smp.stage_time(k, 1);
            std::array::from_fn(|s| c.eval(smp.stage_time(k, s), mid))
        })
        .collect()
}
