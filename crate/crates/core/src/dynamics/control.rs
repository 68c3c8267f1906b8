use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Admissible control values.
#[derive(Clone, Debug, PartialEq)]
pub enum ControlSet {
    FiniteSet { values: Vec<DVector<f64>> },
    /// Open box `lower < u < upper` componentwise.
    OpenBox { lower: DVector<f64>, upper: DVector<f64> },
}

impl ControlSet {
    pub fn finite(values: &[f64]) -> Self {
        ControlSet::FiniteSet {
            values: values.iter().map(|v| DVector::from_element(1, *v)).collect(),
        }
    }

    pub fn open_box(lower: &[f64], upper: &[f64]) -> Self {
        ControlSet::OpenBox {
            lower: DVector::from_column_slice(lower),
            upper: DVector::from_column_slice(upper),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ControlSet::FiniteSet { values } => values.first().map_or(0, |v| v.len()),
            ControlSet::OpenBox { lower, .. } => lower.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ControlSet::FiniteSet { values } => {
                if values.is_empty() {
                    return Err(Error::Config("finite control set is empty".into()));
                }
                let m = values[0].len();
                if m == 0 || values.iter().any(|v| v.len() != m || v.iter().any(|c| !c.is_finite())) {
                    return Err(Error::Config("finite control set values must be finite vectors of one common length".into()));
                }
            }
            ControlSet::OpenBox { lower, upper } => {
                if lower.is_empty() || lower.len() != upper.len() || lower.iter().zip(upper.iter()).any(|(a, b)| !(a < b)) {
                    return Err(Error::Config("open box needs lower < upper in every component".into()));
                }
            }
        }
        Ok(())
    }

    /// Index of `u` in a finite set (exact match).
    pub fn index_of(&self, u: &DVector<f64>) -> Option<usize> {
        match self {
            ControlSet::FiniteSet { values } => values.iter().position(|v| v == u),
            ControlSet::OpenBox { .. } => None,
        }
    }

    pub fn contains(&self, u: &DVector<f64>) -> bool {
        match self {
            ControlSet::FiniteSet { .. } => self.index_of(u).is_some(),
            ControlSet::OpenBox { lower, upper } => {
                u.len() == lower.len() && u.iter().zip(lower.iter().zip(upper.iter())).all(|(v, (a, b))| v > a && v < b)
            }
        }
    }

    pub fn is_box(&self) -> bool {
        matches!(self, ControlSet::OpenBox { .. })
    }
}

/// Piecewise-constant control on a partition `knots[0] = 0 < … < knots[N] = T`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlGrid {
    pub knots: Vec<f64>,
    pub values: Vec<DVector<f64>>,
}

impl ControlGrid {
    /// N equal intervals on `[0, horizon]`.
    pub fn uniform(horizon: f64, values: Vec<DVector<f64>>) -> Self {
        let n = values.len();
        let knots = (0..=n).map(|k| horizon * k as f64 / n as f64).collect();
        ControlGrid { knots, values }
    }

    pub fn constant(horizon: f64, n: usize, value: DVector<f64>) -> Self {
        Self::uniform(horizon, vec![value; n])
    }

    pub fn scalar(horizon: f64, values: &[f64]) -> Self {
        Self::uniform(horizon, values.iter().map(|v| DVector::from_element(1, *v)).collect())
    }

    pub fn intervals(&self) -> usize {
        self.values.len()
    }

    pub fn horizon(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() || self.knots.len() != self.values.len() + 1 {
            return Err(Error::Shape(format!(
                "control grid has {} knots for {} values",
                self.knots.len(),
                self.values.len()
            )));
        }
        if self.knots[0] != 0.0 || self.knots.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Shape("control knots must increase from 0".into()));
        }
        Ok(())
    }

    /// Interval containing t (the last interval is closed on the right).
    pub fn interval_of(&self, t: f64) -> usize {
        let n = self.values.len();
        match self.knots[1..n].binary_search_by(|k| k.partial_cmp(&t).unwrap()) {
            Ok(i) => i + 1,
            Err(i) => i,
        }
    }
}

/// A control signal `u(t)`. Every variant can be evaluated on integration
/// steps that never straddle one of its [`breakpoints`](Control::breakpoints).
#[derive(Clone)]
pub enum Control {
    Grid(ControlGrid),
    Smooth {
        label: String,
        horizon: f64,
        f: Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>,
    },
    /// `with` on `[start, end)`, `base` elsewhere.
    Splice {
        base: Arc<Control>,
        start: f64,
        end: f64,
        with: Arc<Control>,
    },
    /// `base + eps · dir`.
    Affine {
        base: Arc<Control>,
        dir: Arc<Control>,
        eps: f64,
    },
}

impl fmt::Debug for Control {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Control::Grid(g) => f.debug_tuple("Grid").field(g).finish(),
            Control::Smooth { label, .. } => write!(f, "Smooth({label})"),
            Control::Splice { base, start, end, with } => f
                .debug_struct("Splice")
                .field("base", base)
                .field("start", start)
                .field("end", end)
                .field("with", with)
                .finish(),
            Control::Affine { base, dir, eps } => {
                f.debug_struct("Affine").field("base", base).field("dir", dir).field("eps", eps).finish()
            }
        }
    }
}

impl From<ControlGrid> for Control {
    fn from(g: ControlGrid) -> Self {
        Control::Grid(g)
    }
}

impl Control {
    pub fn smooth<F>(label: &str, horizon: f64, f: F) -> Self
    where
        F: Fn(f64) -> DVector<f64> + Send + Sync + 'static,
    {
        Control::Smooth {
            label: label.into(),
            horizon,
            f: Arc::new(f),
        }
    }

    pub fn constant(horizon: f64, value: DVector<f64>) -> Self {
        Control::Grid(ControlGrid::constant(horizon, 1, value))
    }

    /// Replaces the signal on `[start, end)` by `with`.
    pub fn splice(&self, start: f64, end: f64, with: Control) -> Self {
        Control::Splice {
            base: Arc::new(self.clone()),
            start,
            end,
            with: Arc::new(with),
        }
    }

    pub fn perturbed(&self, dir: &Control, eps: f64) -> Self {
        Control::Affine {
            base: Arc::new(self.clone()),
            dir: Arc::new(dir.clone()),
            eps,
        }
    }

    pub fn horizon(&self) -> f64 {
        match self {
            Control::Grid(g) => g.horizon(),
            Control::Smooth { horizon, .. } => *horizon,
            Control::Splice { base, .. } | Control::Affine { base, .. } => base.horizon(),
        }
    }

    pub fn as_grid(&self) -> Option<&ControlGrid> {
        match self {
            Control::Grid(g) => Some(g),
            _ => None,
        }
    }

    /// Interior times where the signal may jump, sorted and deduplicated.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.collect_breaks(0.0, self.horizon(), &mut out);
        out.sort_by(|a, b| a.partial_cmp(b).unwrap());
        out.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * (1.0 + b.abs()));
        out
    }

    fn collect_breaks(&self, lo: f64, hi: f64, out: &mut Vec<f64>) {
        let push = |t: f64, out: &mut Vec<f64>| {
            if t > lo && t < hi {
                out.push(t);
            }
        };
        match self {
            Control::Grid(g) => g.knots[1..g.knots.len() - 1].iter().for_each(|t| push(*t, out)),
            Control::Smooth { .. } => {}
            Control::Splice { base, start, end, with } => {
                push(*start, out);
                push(*end, out);
                base.collect_breaks(lo, start.min(hi), out);
                base.collect_breaks(end.max(lo), hi, out);
                with.collect_breaks(start.max(lo), end.min(hi), out);
            }
            Control::Affine { base, dir, .. } => {
                base.collect_breaks(lo, hi, out);
                dir.collect_breaks(lo, hi, out);
            }
        }
    }

    /// Value at time t on an integration step whose midpoint is `mid`; the
    /// midpoint selects the piece, so one-sided limits at jumps come out right.
    pub fn eval(&self, t: f64, mid: f64) -> DVector<f64> {
        match self {
            Control::Grid(g) => g.values[g.interval_of(mid)].clone(),
            Control::Smooth { f, .. } => f(t),
            Control::Splice { base, start, end, with } => {
                if mid >= *start && mid < *end {
                    with.eval(t, mid)
                } else {
                    base.eval(t, mid)
                }
            }
            Control::Affine { base, dir, eps } => base.eval(t, mid) + dir.eval(t, mid) * *eps,
        }
    }

    /// Value just after t.
    pub fn at(&self, t: f64) -> DVector<f64> {
        self.eval(t, t)
    }
}

/// Measure of `{t : u1(t) ≠ u2(t)}` for two grids on the same partition.
pub fn ekeland_distance(u1: &ControlGrid, u2: &ControlGrid) -> Result<f64> {
    if u1.knots != u2.knots {
        return Err(Error::Shape("controls live on different partitions".into()));
    }
    Ok(u1
        .values
        .iter()
        .zip(&u2.values)
        .enumerate()
        .filter(|(_, (a, b))| a != b)
        .map(|(i, _)| u1.knots[i + 1] - u1.knots[i])
        .sum())
}

/// Integration grid: every interval between consecutive breakpoints is split
/// into an even number (at least two) of equal steps no wider than `max_step`,
/// so composite Simpson applies on each piece.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    pub times: Vec<f64>,
    /// Node ranges `(first, last)` of the pieces.
    pub segments: Vec<(usize, usize)>,
}

impl TimeGrid {
    pub fn build(horizon: f64, breakpoints: &[f64], max_step: f64) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        if !(max_step > 0.0) {
            return Err(Error::Config(format!("step must be positive, got {max_step}")));
        }
        let mut edges = vec![0.0];
        edges.extend(breakpoints.iter().copied().filter(|t| *t > 0.0 && *t < horizon));
        edges.push(horizon);
        let mut times = vec![0.0];
        let mut segments = Vec::with_capacity(edges.len() - 1);
        for w in edges.windows(2) {
            let len = w[1] - w[0];
            let mut steps = ((len / max_step) * (1.0 - 1e-12)).ceil().max(2.0) as usize;
            if steps % 2 == 1 {
                steps += 1;
            }
            let first = times.len() - 1;
            for k in 1..steps {
                times.push(w[0] + len * k as f64 / steps as f64);
            }
            times.push(w[1]);
            segments.push((first, times.len() - 1));
        }
        Ok(TimeGrid { times, segments })
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }
}
