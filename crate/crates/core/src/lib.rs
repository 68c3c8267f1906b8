//! Optimal control of ODEs on Riemannian manifolds, evaluated numerically in a
//! single coordinate chart.
//!
//! The layers build on each other: [`manifold`] (charts, geodesics, transport),
//! [`distance`] (squared-distance calculus and curvature identities),
//! [`dynamics`] (controlled ODE, cost, control grids), [`along`] (integration of
//! linear systems along a base curve), [`variation`] (needle and classical
//! variations), [`adjoint`] (first/second order duals and the parallel frame),
//! [`conditions`] (maximum principle and second order conditions) and
//! [`scenario`]/[`cli`] (builtin problems, reports, command line). [`suite`]
//! bundles the seeded geometry self-checks.

pub mod adjoint;
pub mod along;
pub mod cli;
pub mod conditions;
pub mod distance;
pub mod dynamics;
pub mod error;
pub mod evaluate;
pub mod flat;
pub mod manifold;
pub mod numeric;
pub mod report;
pub mod scenario;
pub mod suite;
pub mod variation;

pub use error::{Error, Result};
