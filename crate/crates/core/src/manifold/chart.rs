use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Metric evaluator for user-defined charts.
pub type MetricFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// The metric family carried by a chart.
#[derive(Clone)]
pub enum Geometry {
    Euclidean,
    /// Round sphere of the given radius in polar coordinates (θ, φ).
    Sphere { radius: f64 },
    /// Hyperboloid sheet `x₀² − |x|² = R²` parametrized by the spatial coords x.
    Hyperbolic { radius: f64 },
    Custom(MetricFn),
}

impl fmt::Debug for Geometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Geometry::Euclidean => write!(f, "Euclidean"),
            Geometry::Sphere { radius } => write!(f, "Sphere {{ radius: {radius} }}"),
            Geometry::Hyperbolic { radius } => write!(f, "Hyperbolic {{ radius: {radius} }}"),
            Geometry::Custom(_) => write!(f, "Custom"),
        }
    }
}

/// How connection and curvature are obtained.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Derivation {
    /// Closed forms for the builtin geometries.
    Analytic,
    /// Γ from five-point differences of the metric and R from differences of Γ.
    /// The step is relative: `h·(1 + |x_m|)`.
    FiniteDifference { step: f64 },
}

/// `Γᵏ_ij` stored densely as `data[(k·n + i)·n + j]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Christoffel {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Christoffel {
    pub fn zeros(n: usize) -> Self {
        Christoffel { n, data: vec![0.0; n * n * n] }
    }

    #[inline]
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.data[(k * self.n + i) * self.n + j]
    }

    /// `Γᵏ_ij a^i b^j`.
    pub fn contract(&self, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        DVector::from_fn(n, |k, _| {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += self.data[(k * n + i) * n + j] * a[i] * b[j];
                }
            }
            s
        })
    }

    /// The matrix `A^k_j = Γᵏ_ij a^i`, so that `A b = Γ(a, b)`.
    pub fn along(&self, a: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n;
        DMatrix::from_fn(n, n, |k, j| (0..n).map(|i| self.get(k, i, j) * a[i]).sum())
    }
}

/// `Rˡ_ijk` stored densely as `data[((l·n + i)·n + j)·n + k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Riemann {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Riemann {
    #[inline]
    pub fn get(&self, l: usize, i: usize, j: usize, k: usize) -> f64 {
        let n = self.n;
        self.data[((l * n + i) * n + j) * n + k]
    }

    /// `R(X,Y)Z`.
    pub fn apply(&self, x: &DVector<f64>, y: &DVector<f64>, z: &DVector<f64>) -> DVector<f64> {
        let n = self.n;
        DVector::from_fn(n, |l, _| {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        s += self.get(l, i, j, k) * x[i] * y[j] * z[k];
                    }
                }
            }
            s
        })
    }

    /// `R(X,Y,Z,W) = ⟨R(X,Y)Z, W⟩`.
    pub fn form(
        &self,
        g: &DMatrix<f64>,
        x: &DVector<f64>,
        y: &DVector<f64>,
        z: &DVector<f64>,
        w: &DVector<f64>,
    ) -> f64 {
        (g * self.apply(x, y, z)).dot(w)
    }

    /// Lowered components `R_ijkl = ⟨R(∂_i,∂_j)∂_k, ∂_l⟩`.
    pub fn lowered(&self, g: &DMatrix<f64>) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n * n * n];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        out[((i * n + j) * n + k) * n + l] =
                            (0..n).map(|m| g[(l, m)] * self.get(m, i, j, k)).sum();
                    }
                }
            }
        }
        out
    }

    /// Largest violation of the lowered-tensor symmetries, scaled by the
    /// largest entry.
    pub fn symmetry_defect(&self, g: &DMatrix<f64>) -> f64 {
        let n = self.n;
        let r = self.lowered(g);
        let at = |i: usize, j: usize, k: usize, l: usize| r[((i * n + j) * n + k) * n + l];
        let scale = r.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let v = at(i, j, k, l);
                        worst = worst
                            .max((v + at(j, i, k, l)).abs())
                            .max((v + at(i, j, l, k)).abs())
                            .max((v - at(k, l, i, j)).abs());
                    }
                }
            }
        }
        worst / scale
    }
}

/// A Riemannian metric on a coordinate box, with connection and curvature
/// evaluators. Immutable after construction.
#[derive(Clone, Debug)]
pub struct ManifoldChart {
    name: String,
    dim: usize,
    lower: Vec<f64>,
    upper: Vec<f64>,
    geometry: Geometry,
    derivation: Derivation,
    injectivity_hint: Option<f64>,
}

const DEFAULT_FD_STEP: f64 = 1e-3;

impl ManifoldChart {
    pub fn euclidean(dim: usize) -> Self {
        assert!(dim >= 1);
        ManifoldChart {
            name: "euclidean".into(),
            dim,
            lower: vec![-1e6; dim],
            upper: vec![1e6; dim],
            geometry: Geometry::Euclidean,
            derivation: Derivation::Analytic,
            injectivity_hint: None,
        }
    }

    /// Unit sphere in polar coordinates, θ ∈ [0.01, π − 0.01].
    pub fn sphere() -> Self {
        Self::sphere_with_radius(1.0)
    }

    pub fn sphere_with_radius(radius: f64) -> Self {
        assert!(radius > 0.0);
        ManifoldChart {
            name: "sphere".into(),
            dim: 2,
            lower: vec![0.01, -20.0],
            upper: vec![PI - 0.01, 20.0],
            geometry: Geometry::Sphere { radius },
            derivation: Derivation::Analytic,
            injectivity_hint: Some(PI * radius),
        }
    }

    /// Hyperboloid model of the hyperbolic plane with parameter R.
    pub fn hyperbolic(radius: f64) -> Self {
        assert!(radius > 0.0);
        ManifoldChart {
            name: "hyperbolic_R".into(),
            dim: 2,
            lower: vec![-10.0; 2],
            upper: vec![10.0; 2],
            geometry: Geometry::Hyperbolic { radius },
            derivation: Derivation::Analytic,
            injectivity_hint: None,
        }
    }

    /// A chart defined only by its metric; connection and curvature are always
    /// finite-difference derived.
    pub fn custom(name: &str, lower: Vec<f64>, upper: Vec<f64>, metric: MetricFn) -> Self {
        assert_eq!(lower.len(), upper.len());
        ManifoldChart {
            name: name.into(),
            dim: lower.len(),
            lower,
            upper,
            geometry: Geometry::Custom(metric),
            derivation: Derivation::FiniteDifference { step: DEFAULT_FD_STEP },
            injectivity_hint: None,
        }
    }

    pub fn with_derivation(mut self, derivation: Derivation) -> Self {
        if !matches!(self.geometry, Geometry::Custom(_)) {
            self.derivation = derivation;
        }
        self
    }

    pub fn with_domain(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), self.dim);
        assert_eq!(upper.len(), self.dim);
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn with_injectivity_hint(mut self, hint: Option<f64>) -> Self {
        self.injectivity_hint = hint;
        self
    }

    pub fn with_name(mut self, name: &str) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn derivation(&self) -> Derivation {
        self.derivation
    }

    pub fn injectivity_hint(&self) -> Option<f64> {
        self.injectivity_hint
    }

    pub fn domain(&self) -> (&[f64], &[f64]) {
        (&self.lower, &self.upper)
    }

    /// Constant sectional curvature of the builtin geometries.
    pub fn constant_curvature(&self) -> Option<f64> {
        match self.geometry {
            Geometry::Euclidean => Some(0.0),
            Geometry::Sphere { radius } => Some(1.0 / (radius * radius)),
            Geometry::Hyperbolic { radius } => Some(-1.0 / (radius * radius)),
            Geometry::Custom(_) => None,
        }
    }

    /// Euclidean geometry with closed-form derivation, where exp and log are
    /// coordinate addition and subtraction.
    pub fn is_flat_analytic(&self) -> bool {
        matches!(self.geometry, Geometry::Euclidean) && self.derivation == Derivation::Analytic
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| v.is_finite() && *v >= *lo && *v <= *hi)
    }

    pub fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension(format!(
                "point has {} coordinates, chart dimension is {}",
                x.len(),
                self.dim
            )));
        }
        if self.contains(x) {
            Ok(())
        } else {
            Err(Error::Domain { coords: x.to_vec() })
        }
    }

    /// Metric matrix without domain checks.
    pub fn metric(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.dim;
        match &self.geometry {
            Geometry::Euclidean => DMatrix::identity(n, n),
            Geometry::Sphere { radius } => {
                let a2 = radius * radius;
                let s = x[0].sin();
                DMatrix::from_row_slice(2, 2, &[a2, 0.0, 0.0, a2 * s * s])
            }
            Geometry::Hyperbolic { radius } => {
                let s2 = radius * radius + x.iter().map(|v| v * v).sum::<f64>();
                DMatrix::from_fn(n, n, |i, j| {
                    let d = if i == j { 1.0 } else { 0.0 };
                    d - x[i] * x[j] / s2
                })
            }
            Geometry::Custom(m) => m(x),
        }
    }

    pub fn metric_at(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check(x)?;
        let g = self.metric(x);
        if g.clone().cholesky().is_none() {
            return Err(Error::Numeric(format!("metric is not positive definite at {x:?}")));
        }
        Ok(g)
    }

    fn fd_step(&self, xm: f64) -> f64 {
        let h = match self.derivation {
            Derivation::FiniteDifference { step } => step,
            Derivation::Analytic => DEFAULT_FD_STEP,
        };
        h * (1.0 + xm.abs())
    }

    /// Coordinate partials of the metric, `dg[m] = ∂_m g`.
    pub fn metric_partials(&self, x: &[f64]) -> Vec<DMatrix<f64>> {
        let n = self.dim;
        (0..n)
            .map(|m| {
                let h = self.fd_step(x[m]);
                let mut y = x.to_vec();
                let mut at = |d: f64| {
                    y[m] = x[m] + d;
                    self.metric(&y)
                };
                (at(-2.0 * h) - at(-h) * 8.0 + at(h) * 8.0 - at(2.0 * h)) / (12.0 * h)
            })
            .collect()
    }

    /// Writes `Γᵏ_ij(x)` into `out` (length n³) without domain checks.
    pub fn christoffel_into(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dim;
        match (&self.geometry, self.derivation) {
            (Geometry::Euclidean, Derivation::Analytic) => out.iter_mut().for_each(|v| *v = 0.0),
            (Geometry::Sphere { .. }, Derivation::Analytic) => {
                out.iter_mut().for_each(|v| *v = 0.0);
                let (s, c) = x[0].sin_cos();
                // Γ^θ_φφ, Γ^φ_θφ = Γ^φ_φθ
                out[3] = -s * c;
                out[5] = c / s;
                out[6] = c / s;
            }
            (Geometry::Hyperbolic { radius }, Derivation::Analytic) => {
                let r2 = radius * radius;
                let s2 = r2 + x.iter().map(|v| v * v).sum::<f64>();
                for l in 0..n {
                    for i in 0..n {
                        for j in 0..n {
                            let d = if i == j { 1.0 } else { 0.0 };
                            out[(l * n + i) * n + j] = -(x[l] / r2) * (d - x[i] * x[j] / s2);
                        }
                    }
                }
            }
            _ => {
                let g = self.metric(x);
                let gi = g.try_inverse().unwrap_or_else(|| DMatrix::from_element(n, n, f64::NAN));
                let dg = self.metric_partials(x);
                for k in 0..n {
                    for i in 0..n {
                        for j in 0..n {
                            let mut s = 0.0;
                            for l in 0..n {
                                s += gi[(k, l)] * (dg[i][(l, j)] + dg[j][(l, i)] - dg[l][(i, j)]);
                            }
                            out[(k * n + i) * n + j] = 0.5 * s;
                        }
                    }
                }
            }
        }
    }

    pub fn christoffel(&self, x: &[f64]) -> Christoffel {
        let mut c = Christoffel::zeros(self.dim);
        self.christoffel_into(x, &mut c.data);
        c
    }

    pub fn christoffel_at(&self, x: &[f64]) -> Result<Christoffel> {
        self.metric_at(x)?;
        let c = self.christoffel(x);
        if c.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("singular metric at {x:?}")));
        }
        Ok(c)
    }

    /// `∂_m Γᵏ_ij` stored as `data[((m·n + k)·n + i)·n + j]`, by five-point
    /// differences of the connection.
    pub fn christoffel_partials(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let n3 = n * n * n;
        let mut out = vec![0.0; n * n3];
        let mut buf = vec![0.0; n3];
        let mut y = x.to_vec();
        for m in 0..n {
            let h = self.fd_step(x[m]);
            for (d, w) in [(-2.0, 1.0), (-1.0, -8.0), (1.0, 8.0), (2.0, -1.0)] {
                y[m] = x[m] + d * h;
                self.christoffel_into(&y, &mut buf);
                for q in 0..n3 {
                    out[m * n3 + q] += w * buf[q] / (12.0 * h);
                }
            }
            y[m] = x[m];
        }
        out
    }

    /// Curvature tensor without domain checks.
    pub fn curvature(&self, x: &[f64]) -> Riemann {
        let n = self.dim;
        let mut data = vec![0.0; n * n * n * n];
        let analytic_k = match (&self.geometry, self.derivation) {
            (Geometry::Custom(_), _) | (_, Derivation::FiniteDifference { .. }) => None,
            _ => self.constant_curvature(),
        };
        if let Some(k) = analytic_k {
            let g = self.metric(x);
            for l in 0..n {
                for i in 0..n {
                    for j in 0..n {
                        for kk in 0..n {
                            let dli = if l == i { 1.0 } else { 0.0 };
                            let dlj = if l == j { 1.0 } else { 0.0 };
                            data[((l * n + i) * n + j) * n + kk] =
                                k * (g[(j, kk)] * dli - g[(i, kk)] * dlj);
                        }
                    }
                }
            }
        } else {
            let gam = self.christoffel(x);
            let dg = self.christoffel_partials(x);
            let n3 = n * n * n;
            let dgam = |m: usize, k: usize, i: usize, j: usize| dg[m * n3 + (k * n + i) * n + j];
            for l in 0..n {
                for i in 0..n {
                    for j in 0..n {
                        for k in 0..n {
                            let mut s = dgam(i, l, j, k) - dgam(j, l, i, k);
                            for m in 0..n {
                                s += gam.get(l, i, m) * gam.get(m, j, k)
                                    - gam.get(l, j, m) * gam.get(m, i, k);
                            }
                            data[((l * n + i) * n + j) * n + k] = s;
                        }
                    }
                }
            }
        }
        Riemann { n, data }
    }

    pub fn curvature_at(&self, x: &[f64]) -> Result<Riemann> {
        self.christoffel_at(x)?;
        Ok(self.curvature(x))
    }

    /// `R(X,Y,Y,X) / (|X|²|Y|² − ⟨X,Y⟩²)`.
    pub fn sectional_curvature(&self, x: &[f64], a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
        let g = self.metric_at(x)?;
        let aa = (&g * a).dot(a);
        let bb = (&g * b).dot(b);
        let ab = (&g * a).dot(b);
        let area2 = aa * bb - ab * ab;
        if area2 <= 1e-14 * aa * bb || aa == 0.0 || bb == 0.0 {
            return Err(Error::DegeneratePlane);
        }
        Ok(self.curvature(x).form(&g, a, b, b, a) / area2)
    }

    pub fn inner(&self, x: &[f64], a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        (self.metric(x) * a).dot(b)
    }

    pub fn norm(&self, x: &[f64], a: &DVector<f64>) -> f64 {
        self.inner(x, a, a).max(0.0).sqrt()
    }

    pub fn lower(&self, x: &[f64], v: &DVector<f64>) -> DVector<f64> {
        self.metric(x) * v
    }

    pub fn raise(&self, x: &[f64], w: &DVector<f64>) -> DVector<f64> {
        let g = self.metric(x);
        g.cholesky()
            .map(|c| c.solve(w))
            .unwrap_or_else(|| DVector::from_element(w.len(), f64::NAN))
    }

    /// Norm of a covector, `|ω| = sqrt(ω g⁻¹ ω)`.
    pub fn conorm(&self, x: &[f64], w: &DVector<f64>) -> f64 {
        self.raise(x, w).dot(w).max(0.0).sqrt()
    }

    /// Orthonormal basis (columns) from Gram-Schmidt on the coordinate basis.
    pub fn orthonormal_frame(&self, x: &[f64]) -> DMatrix<f64> {
        let g = self.metric(x);
        let n = self.dim;
        let mut e = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut v = DVector::<f64>::zeros(n);
            v[j] = 1.0;
            for i in 0..j {
                let ei = e.column(i).into_owned();
                let c = (&g * &ei).dot(&v);
                v -= ei * c;
            }
            let nv = (&g * &v).dot(&v).sqrt();
            e.set_column(j, &(v / nv));
        }
        e
    }

    /// Largest residual of `∂_k g_ij − Γˡ_ki g_lj − Γˡ_kj g_il`.
    pub fn compatibility_defect(&self, x: &[f64]) -> f64 {
        let n = self.dim;
        let g = self.metric(x);
        let dg = self.metric_partials(x);
        let c = self.christoffel(x);
        let mut worst = 0.0f64;
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let mut r = dg[k][(i, j)];
                    for l in 0..n {
                        r -= c.get(l, k, i) * g[(l, j)] + c.get(l, k, j) * g[(i, l)];
                    }
                    worst = worst.max(r.abs());
                }
            }
        }
        worst
    }

    /// Largest `|Γᵏ_ij − Γᵏ_ji|`.
    pub fn torsion_defect(&self, x: &[f64]) -> f64 {
        let n = self.dim;
        let c = self.christoffel(x);
        let mut worst = 0.0f64;
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    worst = worst.max((c.get(k, i, j) - c.get(k, j, i)).abs());
                }
            }
        }
        worst
    }
}
