use serde::{Deserialize, Serialize};

use super::chart::{Derivation, ManifoldChart};
use crate::error::{Error, Result};

/// JSON description of a builtin chart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartSpec {
    pub name: String,
    pub dim: usize,
    /// `[lower, upper]` per coordinate; `null` keeps the builtin box.
    #[serde(default)]
    pub domain_box: Option<Vec<[f64; 2]>>,
    /// `"euclidean"`, `"sphere"` or `"hyperbolic_R"`.
    pub builtin: String,
    #[serde(default)]
    pub params: ChartParams,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChartParams {
    /// Sphere radius or the hyperboloid parameter R.
    #[serde(default, rename = "R", alias = "radius")]
    pub radius: Option<f64>,
    /// `"analytic"` (default) or `"finite_difference"`.
    #[serde(default)]
    pub derivation: Option<String>,
    #[serde(default)]
    pub fd_step: Option<f64>,
    #[serde(default)]
    pub injectivity_hint: Option<f64>,
}

impl ChartSpec {
    pub fn builtin(name: &str) -> Result<ChartSpec> {
        let (builtin, dim) = match name {
            "euclidean" => ("euclidean", 2),
            "sphere" => ("sphere", 2),
            "hyperbolic" | "hyperbolic_R" => ("hyperbolic_R", 2),
            other => return Err(Error::Config(format!("unknown builtin chart `{other}`"))),
        };
        Ok(ChartSpec {
            name: builtin.into(),
            dim,
            domain_box: None,
            builtin: builtin.into(),
            params: ChartParams::default(),
        })
    }

    pub fn build(&self) -> Result<ManifoldChart> {
        let radius = self.params.radius.unwrap_or(1.0);
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::Config(format!("chart radius must be positive, got {radius}")));
        }
        let mut chart = match self.builtin.as_str() {
            "euclidean" => {
                if self.dim == 0 || self.dim > 3 {
                    return Err(Error::Config(format!("euclidean chart dimension must be 1..=3, got {}", self.dim)));
                }
                ManifoldChart::euclidean(self.dim)
            }
            "sphere" => ManifoldChart::sphere_with_radius(radius),
            "hyperbolic_R" => ManifoldChart::hyperbolic(radius),
            other => return Err(Error::Config(format!("unknown builtin chart `{other}`"))),
        };
        if chart.dim() != self.dim {
            return Err(Error::Config(format!(
                "builtin `{}` has dimension {}, spec says {}",
                self.builtin,
                chart.dim(),
                self.dim
            )));
        }
        if let Some(b) = &self.domain_box {
            if b.len() != self.dim || b.iter().any(|[lo, hi]| !(lo < hi)) {
                return Err(Error::Config("domain_box must list one increasing [lower, upper] pair per coordinate".into()));
            }
            chart = chart.with_domain(b.iter().map(|p| p[0]).collect(), b.iter().map(|p| p[1]).collect());
        }
        match self.params.derivation.as_deref() {
            None | Some("analytic") => {}
            Some("finite_difference") => {
                let step = self.params.fd_step.unwrap_or(1e-3);
                if !(step > 0.0) {
                    return Err(Error::Config("fd_step must be positive".into()));
                }
                chart = chart.with_derivation(Derivation::FiniteDifference { step });
            }
            Some(other) => return Err(Error::Config(format!("unknown derivation `{other}`"))),
        }
        if let Some(h) = self.params.injectivity_hint {
            if !(h > 0.0) {
                return Err(Error::Config("injectivity_hint must be positive".into()));
            }
            chart = chart.with_injectivity_hint(Some(h));
        }
        Ok(chart.with_name(&self.name))
    }
}
