//! Stage samples of a base curve and fixed-step RK4 for linear (or any)
//! payload equations carried along it.

use nalgebra::DVector;

use super::chart::ManifoldChart;

/// Position within one RK4 step: start, midpoint, end.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageIndex {
    Start = 0,
    Mid = 1,
    End = 2,
}

/// Positions and velocities of a curve at the three RK4 stage times of every
/// step. Velocities are one-sided at nodes (taken from the step's own control
/// for trajectories), so payload equations see the same data the base
/// integration saw.
#[derive(Clone, Debug)]
pub struct CurveSamples {
    pub times: Vec<f64>,
    pub x: Vec<[DVector<f64>; 3]>,
    pub v: Vec<[DVector<f64>; 3]>,
}

impl CurveSamples {
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn step_width(&self, k: usize) -> f64 {
        self.times[k + 1] - self.times[k]
    }

    pub fn stage_time(&self, k: usize, s: usize) -> f64 {
        self.times[k] + 0.5 * s as f64 * self.step_width(k)
    }

    /// Node position; node k is the start of step k (end of the last step).
    pub fn node(&self, k: usize) -> &DVector<f64> {
        if k < self.steps() {
            &self.x[k][0]
        } else {
            &self.x[k - 1][2]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Integrates `p' = rhs(step, stage, p)` over the sample grid and returns the
/// payload at every node. Forward starts at node 0; backward starts at the
/// last node with `init` as the terminal value.
pub fn integrate_along<F>(
    samples: &CurveSamples,
    dir: Direction,
    init: DVector<f64>,
    mut rhs: F,
) -> Vec<DVector<f64>>
where
    F: FnMut(usize, usize, &DVector<f64>) -> DVector<f64>,
{
    let n = samples.steps();
    let mut out = vec![DVector::zeros(0); n + 1];
    let mut p = init;
    match dir {
        Direction::Forward => {
            out[0] = p.clone();
            for k in 0..n {
                let h = samples.step_width(k);
                let k1 = rhs(k, 0, &p);
                let k2 = rhs(k, 1, &(&p + &k1 * (0.5 * h)));
                let k3 = rhs(k, 1, &(&p + &k2 * (0.5 * h)));
                let k4 = rhs(k, 2, &(&p + &k3 * h));
                p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
                out[k + 1] = p.clone();
            }
        }
        Direction::Backward => {
            out[n] = p.clone();
            for k in (0..n).rev() {
                let h = -samples.step_width(k);
                let k1 = rhs(k, 2, &p);
                let k2 = rhs(k, 1, &(&p + &k1 * (0.5 * h)));
                let k3 = rhs(k, 1, &(&p + &k2 * (0.5 * h)));
                let k4 = rhs(k, 0, &(&p + &k3 * h));
                p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
                out[k] = p.clone();
            }
        }
    }
    out
}

/// Largest `|∇_γ̇ Z|` at interior nodes for a field `Z` along the curve given by
/// node components, using centered five-point differences of the components
/// where five equally spaced nodes are available and three-point ones
/// otherwise. With `Z = γ̇` this is the geodesic residual.
pub fn covariant_rate_residual(
    chart: &ManifoldChart,
    times: &[f64],
    points: &[DVector<f64>],
    velocities: &[DVector<f64>],
    field: &[DVector<f64>],
) -> f64 {
    let n = times.len();
    let mut worst = 0.0f64;
    let uniform = |a: usize, b: usize| {
        let h = times[a + 1] - times[a];
        (a..b).all(|i| ((times[i + 1] - times[i]) - h).abs() <= 1e-12 * h.abs().max(1.0))
    };
    for k in 1..n.saturating_sub(1) {
        let rate = if k >= 2 && k + 2 < n && uniform(k - 2, k + 2) {
            let h = times[k + 1] - times[k];
            (&field[k - 2] - &field[k - 1] * 8.0 + &field[k + 1] * 8.0 - &field[k + 2]) / (12.0 * h)
        } else if uniform(k - 1, k + 1) {
            (&field[k + 1] - &field[k - 1]) / (times[k + 1] - times[k - 1])
        } else {
            continue;
        };
        let x = &points[k];
        let cov = rate + chart.christoffel(x.as_slice()).contract(&velocities[k], &field[k]);
        worst = worst.max(chart.norm(x.as_slice(), &cov));
    }
    worst
}
