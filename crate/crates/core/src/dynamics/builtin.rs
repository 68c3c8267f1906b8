//! Builtin systems with analytic coordinate partials where they are cheap.

use nalgebra::{DMatrix, DVector};

use super::{Dynamics, UPartials, XPartials};
use crate::manifold::ManifoldChart;

fn dv(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

fn zeros_stack(k: usize, r: usize, c: usize) -> Vec<DMatrix<f64>> {
    vec![DMatrix::zeros(r, c); k]
}

/// Decaying rotation in the plane:
/// `f = u³ e^{−(R² + |x|²)} (x₂ ∂₁ − x₁ ∂₂)`, `f⁰ = u² e^{−(R² + |x|²)}`.
/// It preserves `|x|`, so the state stays on its circle about the origin.
#[derive(Clone, Debug)]
pub struct RotationDecay {
    pub radius: f64,
}

impl RotationDecay {
    pub fn new(radius: f64) -> Self {
        RotationDecay { radius }
    }

    fn decay(&self, x: &[f64]) -> f64 {
        (-(self.radius * self.radius + x[0] * x[0] + x[1] * x[1])).exp()
    }
}

/// Field, Jacobian and second partials of `c(x)·(x₂, −x₁)` for
/// `c = a·e^{−(R²+|x|²)}`.
fn rotation_parts(c: f64, x: &[f64]) -> (DVector<f64>, DMatrix<f64>, Vec<DMatrix<f64>>) {
    let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
    let f = dv(&[c * x[1], -c * x[0]]);
    let j = DMatrix::from_fn(2, 2, |i, j| {
        if i == 0 {
            -2.0 * x[j] * c * x[1] + c * d(j, 1)
        } else {
            2.0 * x[j] * c * x[0] - c * d(j, 0)
        }
    });
    let h = (0..2)
        .map(|k| {
            DMatrix::from_fn(2, 2, |i, j| {
                if i == 0 {
                    -2.0 * d(j, k) * x[1] * c - 2.0 * x[j] * d(k, 1) * c + 4.0 * x[j] * x[1] * x[k] * c - 2.0 * x[k] * c * d(j, 1)
                } else {
                    2.0 * d(j, k) * x[0] * c + 2.0 * x[j] * d(k, 0) * c - 4.0 * x[j] * x[0] * x[k] * c + 2.0 * x[k] * c * d(j, 0)
                }
            })
        })
        .collect();
    (f, j, h)
}

impl Dynamics for RotationDecay {
    fn name(&self) -> String {
        format!("rotation_decay(R={})", self.radius)
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn f(&self, _t: f64, x: &[f64], u: &[f64]) -> DVector<f64> {
        let c = u[0].powi(3) * self.decay(x);
        dv(&[c * x[1], -c * x[0]])
    }
    fn f0(&self, _t: f64, x: &[f64], u: &[f64]) -> f64 {
        u[0] * u[0] * self.decay(x)
    }

    fn x_partials(&self, _t: f64, x: &[f64], u: &[f64]) -> Option<XPartials> {
        let e = self.decay(x);
        let (_, dxf, dxxf) = rotation_parts(u[0].powi(3) * e, x);
        let d = u[0] * u[0] * e;
        Some(XPartials {
            dxf,
            dxxf,
            dxf0: dv(&[-2.0 * x[0] * d, -2.0 * x[1] * d]),
            dxxf0: DMatrix::from_fn(2, 2, |j, k| (4.0 * x[j] * x[k] - if j == k { 2.0 } else { 0.0 }) * d),
        })
    }

    fn u_partials(&self, _t: f64, x: &[f64], u: &[f64]) -> Option<UPartials> {
        let e = self.decay(x);
        let (duf, duxf, _) = rotation_parts(3.0 * u[0] * u[0] * e, x);
        let (duuf, _, _) = rotation_parts(6.0 * u[0] * e, x);
        let du0 = 2.0 * u[0] * e;
        Some(UPartials {
            duf: DMatrix::from_column_slice(2, 1, duf.as_slice()),
            duf0: dv(&[du0]),
            duuf: vec![DMatrix::from_column_slice(2, 1, duuf.as_slice())],
            duuf0: DMatrix::from_element(1, 1, 2.0 * e),
            duxf: vec![duxf],
            duxf0: DMatrix::from_row_slice(1, 2, &[-2.0 * x[0] * du0, -2.0 * x[1] * du0]),
        })
    }
}

/// The vector field of [`RotationDecay`] for a fixed control value.
pub fn rotation_field(radius: f64, u: f64) -> impl Fn(&DVector<f64>) -> DVector<f64> + Sync + Send {
    let dy = RotationDecay::new(radius);
    move |x: &DVector<f64>| dy.f(0.0, x.as_slice(), &[u])
}

/// `ẏ = u`, `f⁰ = (y² + u²)/2` on the real line.
#[derive(Clone, Copy, Debug)]
pub struct FlatLq;

impl Dynamics for FlatLq {
    fn name(&self) -> String {
        "flat_lq".into()
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn f(&self, _t: f64, _x: &[f64], u: &[f64]) -> DVector<f64> {
        dv(&[u[0]])
    }
    fn f0(&self, _t: f64, x: &[f64], u: &[f64]) -> f64 {
        0.5 * (x[0] * x[0] + u[0] * u[0])
    }
    fn x_partials(&self, _t: f64, x: &[f64], _u: &[f64]) -> Option<XPartials> {
        Some(XPartials {
            dxf: DMatrix::zeros(1, 1),
            dxxf: zeros_stack(1, 1, 1),
            dxf0: dv(&[x[0]]),
            dxxf0: DMatrix::identity(1, 1),
        })
    }
    fn u_partials(&self, _t: f64, _x: &[f64], u: &[f64]) -> Option<UPartials> {
        Some(UPartials {
            duf: DMatrix::identity(1, 1),
            duf0: dv(&[u[0]]),
            duuf: zeros_stack(1, 1, 1),
            duuf0: DMatrix::identity(1, 1),
            duxf: zeros_stack(1, 1, 1),
            duxf0: DMatrix::zeros(1, 1),
        })
    }
}

/// `f = Ax + Bu`, `f⁰ = ½xᵀQx + ½uᵀRu + cᵀx` in flat coordinates.
#[derive(Clone, Debug)]
pub struct LinearEuclidean {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl LinearEuclidean {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Self {
        let (n, m) = (a.nrows(), b.ncols());
        LinearEuclidean {
            a,
            b,
            q: DMatrix::zeros(n, n),
            r: DMatrix::zeros(m, m),
            c: DVector::zeros(n),
        }
    }

    pub fn with_cost(mut self, q: DMatrix<f64>, r: DMatrix<f64>, c: DVector<f64>) -> Self {
        self.q = q;
        self.r = r;
        self.c = c;
        self
    }
}

impl Dynamics for LinearEuclidean {
    fn name(&self) -> String {
        format!("linear({}x{})", self.a.nrows(), self.b.ncols())
    }
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }
    fn control_dim(&self) -> usize {
        self.b.ncols()
    }
    fn f(&self, _t: f64, x: &[f64], u: &[f64]) -> DVector<f64> {
        &self.a * dv(x) + &self.b * dv(u)
    }
    fn f0(&self, _t: f64, x: &[f64], u: &[f64]) -> f64 {
        let (x, u) = (dv(x), dv(u));
        0.5 * x.dot(&(&self.q * &x)) + 0.5 * u.dot(&(&self.r * &u)) + self.c.dot(&x)
    }
    fn x_partials(&self, _t: f64, x: &[f64], _u: &[f64]) -> Option<XPartials> {
        let n = self.a.nrows();
        Some(XPartials {
            dxf: self.a.clone(),
            dxxf: zeros_stack(n, n, n),
            dxf0: (&self.q + self.q.transpose()) * dv(x) * 0.5 + &self.c,
            dxxf0: (&self.q + self.q.transpose()) * 0.5,
        })
    }
    fn u_partials(&self, _t: f64, _x: &[f64], u: &[f64]) -> Option<UPartials> {
        let (n, m) = (self.a.nrows(), self.b.ncols());
        let rs = (&self.r + self.r.transpose()) * 0.5;
        Some(UPartials {
            duf: self.b.clone(),
            duf0: &rs * dv(u),
            duuf: zeros_stack(m, n, m),
            duuf0: rs,
            duxf: zeros_stack(m, n, n),
            duxf0: DMatrix::zeros(m, n),
        })
    }
}

/// `f = Σ uᵢ eᵢ(x)` over the chart's orthonormal frame, `f⁰ = ½|f|² = ½|u|²`.
/// Every admissible curve is reachable, so optimal trajectories are geodesics.
#[derive(Clone, Debug)]
pub struct FrameFieldEnergy {
    pub chart: ManifoldChart,
}

impl Dynamics for FrameFieldEnergy {
    fn name(&self) -> String {
        format!("frame_energy({})", self.chart.name())
    }
    fn state_dim(&self) -> usize {
        self.chart.dim()
    }
    fn control_dim(&self) -> usize {
        self.chart.dim()
    }
    fn f(&self, _t: f64, x: &[f64], u: &[f64]) -> DVector<f64> {
        self.chart.orthonormal_frame(x) * dv(u)
    }
    fn f0(&self, _t: f64, _x: &[f64], u: &[f64]) -> f64 {
        0.5 * u.iter().map(|v| v * v).sum::<f64>()
    }
}

/// A smooth drift on the sphere chart `(θ, φ)`:
/// `f = 0.3u cos φ ∂_θ + (0.6 + 0.2u) ∂_φ`, `f⁰ = u² + cos θ`.
#[derive(Clone, Copy, Debug)]
pub struct SphereDrift;

impl Dynamics for SphereDrift {
    fn name(&self) -> String {
        "sphere_drift".into()
    }
    fn state_dim(&self) -> usize {
        2
    }
    fn control_dim(&self) -> usize {
        1
    }
    fn f(&self, _t: f64, x: &[f64], u: &[f64]) -> DVector<f64> {
        dv(&[0.3 * u[0] * x[1].cos(), 0.6 + 0.2 * u[0]])
    }
    fn f0(&self, _t: f64, x: &[f64], u: &[f64]) -> f64 {
        u[0] * u[0] + x[0].cos()
    }
    fn x_partials(&self, _t: f64, x: &[f64], u: &[f64]) -> Option<XPartials> {
        let mut dxf = DMatrix::zeros(2, 2);
        dxf[(0, 1)] = -0.3 * u[0] * x[1].sin();
        let mut d22 = DMatrix::zeros(2, 2);
        d22[(0, 1)] = -0.3 * u[0] * x[1].cos();
        Some(XPartials {
            dxf,
            dxxf: vec![DMatrix::zeros(2, 2), d22],
            dxf0: dv(&[-x[0].sin(), 0.0]),
            dxxf0: DMatrix::from_row_slice(2, 2, &[-x[0].cos(), 0.0, 0.0, 0.0]),
        })
    }
    fn u_partials(&self, _t: f64, x: &[f64], u: &[f64]) -> Option<UPartials> {
        let mut dux = DMatrix::zeros(2, 2);
        dux[(0, 1)] = -0.3 * x[1].sin();
        Some(UPartials {
            duf: DMatrix::from_column_slice(2, 1, &[0.3 * x[1].cos(), 0.2]),
            duf0: dv(&[2.0 * u[0]]),
            duuf: zeros_stack(1, 2, 1),
            duuf0: DMatrix::from_element(1, 1, 2.0),
            duxf: vec![dux],
            duxf0: DMatrix::zeros(1, 2),
        })
    }
}
