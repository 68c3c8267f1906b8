//! Small numerical kernels shared by the geometry and control layers.

use nalgebra::{DMatrix, DVector};

/// Scratch buffers for one classical Runge-Kutta step on a flat state.
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub fn new(len: usize) -> Self {
        Rk4 {
            k1: vec![0.0; len],
            k2: vec![0.0; len],
            k3: vec![0.0; len],
            k4: vec![0.0; len],
            tmp: vec![0.0; len],
        }
    }

    /// Advances `y` by `h` in place. `rhs(t, y, dy)` writes the derivative.
    pub fn step<F>(&mut self, t: f64, y: &mut [f64], h: f64, rhs: &mut F)
    where
        F: FnMut(f64, &[f64], &mut [f64]),
    {
        let n = y.len();
        rhs(t, y, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = y[i] + 0.5 * h * self.k1[i];
        }
        rhs(t + 0.5 * h, &self.tmp, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = y[i] + 0.5 * h * self.k2[i];
        }
        rhs(t + 0.5 * h, &self.tmp, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = y[i] + h * self.k3[i];
        }
        rhs(t + h, &self.tmp, &mut self.k4);
        for i in 0..n {
            y[i] += h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// Fourth-order central difference of a scalar function.
pub fn d1_5pt<F: Fn(f64) -> f64>(f: F, h: f64) -> f64 {
    (f(-2.0 * h) - 8.0 * f(-h) + 8.0 * f(h) - f(2.0 * h)) / (12.0 * h)
}

/// Fourth-order central difference of a vector-valued function.
pub fn d1_5pt_vec<F: Fn(f64) -> DVector<f64>>(f: F, h: f64) -> DVector<f64> {
    (f(-2.0 * h) - f(-h) * 8.0 + f(h) * 8.0 - f(2.0 * h)) / (12.0 * h)
}

/// Second-order central difference.
pub fn d1_3pt<F: Fn(f64) -> f64>(f: F, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// Second-order central second derivative.
pub fn d2_3pt<F: Fn(f64) -> f64>(f: F, h: f64) -> f64 {
    (f(h) - 2.0 * f(0.0) + f(-h)) / (h * h)
}

/// Least-squares slope of log(y) against log(x). Returns NaN if any sample is
/// non-positive or non-finite.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    if xs.len() < 2 || xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return f64::NAN;
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Composite Simpson weights for `steps` equal sub-intervals of width `h`.
/// `steps` must be even.
pub fn simpson_weights(steps: usize, h: f64) -> Vec<f64> {
    assert!(steps >= 2 && steps.is_multiple_of(2), "Simpson needs an even number of steps");
    let mut w = vec![0.0; steps + 1];
    for (i, wi) in w.iter_mut().enumerate() {
        *wi = if i == 0 || i == steps {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        } * h
            / 3.0;
    }
    w
}

/// Symmetric square root of an SPD matrix and its inverse.
pub fn spd_sqrt(g: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let eig = g.clone().symmetric_eigen();
    let s = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let si = s.map(|l| 1.0 / l);
    let q = &eig.eigenvectors;
    (
        q * DMatrix::from_diagonal(&s) * q.transpose(),
        q * DMatrix::from_diagonal(&si) * q.transpose(),
    )
}

/// Matrix exponential by scaling and squaring with a Taylor core. Used only by
/// tests and oracles on small matrices.
pub fn expm(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let norm = a.abs().row_sum().max();
    let mut s = 0;
    let mut scale = 1.0;
    while norm * scale > 0.25 {
        scale *= 0.5;
        s += 1;
    }
    let b = a * scale;
    let mut term = DMatrix::identity(n, n);
    let mut sum = DMatrix::identity(n, n);
    for k in 1..20 {
        term = &term * &b / k as f64;
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rk4_is_fourth_order() {
        let run = |h: f64| {
            let mut y = vec![1.0];
            let mut rk = Rk4::new(1);
            let n = (1.0 / h).round() as usize;
            for k in 0..n {
                rk.step(k as f64 * h, &mut y, h, &mut |_, y, dy| dy[0] = y[0]);
            }
            (y[0] - 1f64.exp()).abs()
        };
        let ratio = run(0.1) / run(0.05);
        assert!(ratio > 14.0, "ratio {ratio}");
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [0.1, 0.05, 0.025];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powi(2)).collect();
        assert!((loglog_slope(&xs, &ys) - 2.0).abs() < 1e-12);
        assert!(loglog_slope(&xs, &[1.0, 0.0, 1.0]).is_nan());
    }

    #[test]
    fn simpson_integrates_cubics_exactly() {
        let w = simpson_weights(4, 0.25);
        let s: f64 = w
            .iter()
            .enumerate()
            .map(|(i, wi)| wi * (i as f64 * 0.25).powi(3))
            .sum();
        assert!((s - 0.25).abs() < 1e-15);
    }

    #[test]
    fn expm_of_rotation_generator() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let e = expm(&a);
        assert!((e[(0, 0)] - 1f64.cos()).abs() < 1e-14);
        assert!((e[(1, 0)] - 1f64.sin()).abs() < 1e-14);
    }
}
