//! Riemannian geometry in a single coordinate chart.
//!
//! Index conventions: `Γ[k][i][j] = Γᵏ_ij`, `R[l][i][j][k] = Rˡ_ijk` with
//! `R(∂_i, ∂_j)∂_k = Rˡ_ijk ∂_l` and `R(X,Y)Z = ∇_X∇_Y Z − ∇_Y∇_X Z − ∇_[X,Y] Z`.
//! The four-slot form is `R(X,Y,Z,W) = ⟨R(X,Y)Z, W⟩`, so sectional curvature is
//! `R(X,Y,Y,X) / |X∧Y|²`.

mod chart;
mod curve;
mod geodesic;
mod spec;

pub use chart::{Christoffel, Derivation, Geometry, ManifoldChart, Riemann};
pub use curve::{
    covariant_rate_residual, integrate_along, CurveSamples, Direction, StageIndex,
};
pub use geodesic::{
    covariant_derivative_field, exp_map, exp_map_with, geodesic, log_map, log_map_with,
    parallel_transport, parallel_transport_covector, transport_covectors, transport_difference_quotient,
    transport_vectors, CurvePath, LogOptions, DEFAULT_STEP,
};
pub use spec::ChartSpec;

use nalgebra::DVector;

/// A point given by its chart coordinates.
pub type Point = DVector<f64>;

/// Contravariant components at a base point.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVec {
    pub base: Point,
    pub comps: DVector<f64>,
}

/// Covariant components at a base point.
#[derive(Clone, Debug, PartialEq)]
pub struct CotangentVec {
    pub base: Point,
    pub comps: DVector<f64>,
}

impl TangentVec {
    pub fn new(base: Point, comps: DVector<f64>) -> Self {
        TangentVec { base, comps }
    }

    pub fn lower(&self, chart: &ManifoldChart) -> CotangentVec {
        CotangentVec {
            base: self.base.clone(),
            comps: chart.lower(self.base.as_slice(), &self.comps),
        }
    }

    pub fn norm(&self, chart: &ManifoldChart) -> f64 {
        chart.norm(self.base.as_slice(), &self.comps)
    }
}

impl CotangentVec {
    pub fn new(base: Point, comps: DVector<f64>) -> Self {
        CotangentVec { base, comps }
    }

    pub fn raise(&self, chart: &ManifoldChart) -> TangentVec {
        TangentVec {
            base: self.base.clone(),
            comps: chart.raise(self.base.as_slice(), &self.comps),
        }
    }

    /// Pairing with a tangent vector at the same base.
    pub fn apply(&self, v: &DVector<f64>) -> f64 {
        self.comps.dot(v)
    }
}
