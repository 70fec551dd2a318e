//! Uniform time grids and exact integrals of piecewise-linear grid functions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("horizon {horizon} is not an integer multiple of step {dt}")]
    NotMultiple { horizon: f64, dt: f64 },
    #[error("grid function has {got} values, grid has {expected} points")]
    LengthMismatch { expected: usize, got: usize },
    #[error("grid function value at index {index} is {value}; must be finite and nonnegative")]
    BadValue { index: usize, value: f64 },
}

/// Uniform grid `t_i = i * dt`, `i = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    dt: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, dt: f64) -> Result<Self, GridError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(GridError::BadStep(dt));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(GridError::BadHorizon(horizon));
        }
        let steps = (horizon / dt).round();
        if steps < 1.0 || (steps * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
            return Err(GridError::NotMultiple { horizon, dt });
        }
        Ok(Self {
            dt,
            steps: steps as usize,
        })
    }

    pub fn from_steps(dt: f64, steps: usize) -> Result<Self, GridError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(GridError::BadStep(dt));
        }
        if steps == 0 {
            return Err(GridError::BadHorizon(0.0));
        }
        Ok(Self { dt, steps })
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of intervals.
    #[inline]
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of grid points (`steps + 1`).
    #[inline]
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    #[inline]
    pub fn horizon(&self) -> f64 {
        self.time(self.steps)
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.len()).map(move |i| self.time(i))
    }

    /// Nearest grid index to `t`, if `t` lies on the grid within `1e-9 * dt`.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = t / self.dt;
        let i = x.round();
        if i < 0.0 || i as usize > self.steps || (x - i).abs() > 1e-9 {
            None
        } else {
            Some(i as usize)
        }
    }

    /// Grid with half the step over the same horizon.
    pub fn refined(&self) -> Self {
        Self {
            dt: self.dt / 2.0,
            steps: self.steps * 2,
        }
    }

    pub fn check_len(&self, got: usize) -> Result<(), GridError> {
        if got != self.len() {
            Err(GridError::LengthMismatch {
                expected: self.len(),
                got,
            })
        } else {
            Ok(())
        }
    }

    /// Trapezoid weights on `[t_0, t_i]`, evaluated at index `j <= i`.
    #[inline]
    pub fn trapezoid_weight(&self, i: usize, j: usize) -> f64 {
        trapezoid_weight(self.dt, 0, i, j)
    }
}

/// Trapezoid weight of node `j` for the rule on `[t_lo, t_hi]`.
#[inline]
pub fn trapezoid_weight(dt: f64, lo: usize, hi: usize, j: usize) -> f64 {
    debug_assert!(lo <= j && j <= hi);
    if lo == hi {
        0.0
    } else if j == lo || j == hi {
        0.5 * dt
    } else {
        dt
    }
}

/// A nonnegative force of infection, linear between grid points and
/// constant past the last point, with exact cumulative integrals.
///
/// Also carries, for each registered waning rate `theta`, the backward table
/// `B(t_j) = ∫_{t_j}^{H} exp(-theta (u - t_j)) f(u) du` (`H` = last grid time),
/// from which `∫_b^t (1 - exp(-theta (u - b))) f(u) du` is evaluated without
/// cancellation for any `0 <= b <= t <= H`.
#[derive(Debug, Clone)]
pub struct CumulativeForce {
    dt: f64,
    inv_dt: f64,
    values: Vec<f64>,
    cumulative: Vec<f64>,
    waning: Vec<WaningTable>,
}

#[derive(Debug, Clone)]
struct WaningTable {
    theta: f64,
    backward: Vec<f64>,
}

impl CumulativeForce {
    /// `values[i]` is the force at `i * dt`. At least one value is required.
    pub fn new(dt: f64, values: &[f64], waning_rates: &[f64]) -> Result<Self, GridError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(GridError::BadStep(dt));
        }
        if values.is_empty() {
            return Err(GridError::LengthMismatch {
                expected: 1,
                got: 0,
            });
        }
        for (index, &value) in values.iter().enumerate() {
            if !(value.is_finite() && value >= 0.0) {
                return Err(GridError::BadValue { index, value });
            }
        }
        Ok(Self::new_unchecked(dt, values, waning_rates))
    }

    pub(crate) fn new_unchecked(dt: f64, values: &[f64], waning_rates: &[f64]) -> Self {
        let mut cumulative = Vec::with_capacity(values.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for w in values.windows(2) {
            acc += 0.5 * dt * (w[0] + w[1]);
            cumulative.push(acc);
        }
        let waning = waning_rates
            .iter()
            .filter(|&&theta| theta > 0.0)
            .map(|&theta| {
                let mut backward = vec![0.0; values.len()];
                for j in (0..values.len().saturating_sub(1)).rev() {
                    backward[j] = (-theta * dt).exp() * backward[j + 1]
                        + discounted_cell(theta, dt, values[j], values[j + 1]);
                }
                WaningTable { theta, backward }
            })
            .collect();
        Self {
            dt,
            inv_dt: 1.0 / dt,
            values: values.to_vec(),
            cumulative,
            waning,
        }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn last_time(&self) -> f64 {
        (self.values.len() - 1) as f64 * self.dt
    }

    /// Locate `t` as `(cell index j, offset in [0, dt])`, clamped to the grid.
    #[inline]
    fn locate(&self, t: f64) -> (usize, f64) {
        let last = self.values.len() - 1;
        if last == 0 || t <= 0.0 {
            return (0, 0.0);
        }
        // Truncation is the floor here since t > 0.
        let j = ((t * self.inv_dt) as usize).min(last - 1);
        (j, t - j as f64 * self.dt)
    }

    /// Interpolated force at time `t`.
    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        let last = self.values.len() - 1;
        if t >= self.last_time() {
            return self.values[last];
        }
        let (j, h) = self.locate(t);
        let f0 = self.values[j];
        let f1 = self.values[j + 1];
        f0 + (f1 - f0) * h / self.dt
    }

    /// `∫_0^t f(u) du` for `t >= 0`.
    #[inline]
    pub fn integral_to(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let last = self.values.len() - 1;
        let j = (t * self.inv_dt) as usize;
        if j >= last {
            let end = self.last_time();
            return self.cumulative[last] + (t - end) * self.values[last];
        }
        let h = t - j as f64 * self.dt;
        let f0 = self.values[j];
        let slope = (self.values[j + 1] - f0) * self.inv_dt;
        self.cumulative[j] + h * (f0 + 0.5 * slope * h)
    }

    /// `∫_a^b f(u) du`.
    #[inline]
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            0.0
        } else {
            self.integral_to(b) - self.integral_to(a)
        }
    }

    fn table(&self, theta: f64) -> &WaningTable {
        self.waning
            .iter()
            .find(|w| w.theta == theta)
            .unwrap_or_else(|| panic!("waning rate {theta} was not registered with the force"))
    }

    /// `∫_b^H exp(-theta (u - b)) f(u) du` at arbitrary `b`.
    fn backward_at(&self, table: &WaningTable, b: f64) -> f64 {
        let end = self.last_time();
        if b >= end {
            return 0.0;
        }
        let (j, h) = self.locate(b);
        let f0 = self.values[j];
        let f1 = self.values[j + 1];
        let fb = f0 + (f1 - f0) * h / self.dt;
        let rest = self.dt - h;
        (-table.theta * rest).exp() * table.backward[j + 1]
            + discounted_cell(table.theta, rest, fb, f1)
    }

    /// `∫_b^t (1 - exp(-theta (u - b))) f(u) du` for `0 <= b <= t <= H`.
    pub fn waning_integral(&self, theta: f64, b: f64, t: f64) -> f64 {
        if t <= b {
            return 0.0;
        }
        let table = self.table(theta);
        let discounted = self.backward_at(table, b) - (-theta * (t - b)).exp() * self.backward_at(table, t);
        (self.integral(b, t) - discounted).max(0.0)
    }
}

/// `∫_0^h exp(-theta v) (f0 + (f1 - f0) v / h) dv`.
fn discounted_cell(theta: f64, h: f64, f0: f64, f1: f64) -> f64 {
    if h <= 0.0 {
        return 0.0;
    }
    let x = theta * h;
    // ∫_0^h e^{-θv} dv and ∫_0^h v e^{-θv} dv, with series near x = 0.
    let (m0, m1) = if x < 1e-4 {
        (
            h * (1.0 - x / 2.0 + x * x / 6.0),
            h * h * (0.5 - x / 3.0 + x * x / 8.0),
        )
    } else {
        let e = (-x).exp();
        ((1.0 - e) / theta, (1.0 - e * (1.0 + x)) / (theta * theta))
    };
    f0 * m0 + (f1 - f0) / h * m1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        let n = 200_000;
        let h = (b - a) / n as f64;
        (0..n)
            .map(|k| {
                let x = a + (k as f64 + 0.5) * h;
                f(x) * h
            })
            .sum()
    }

    #[test]
    fn grid_rejects_non_multiples() {
        assert!(TimeGrid::new(1.0, 0.3).is_err());
        assert!(TimeGrid::new(1.0, 0.0).is_err());
        let g = TimeGrid::new(20.0, 0.01).unwrap();
        assert_eq!(g.len(), 2001);
        assert_eq!(g.index_of(5.0), Some(500));
        assert_eq!(g.index_of(5.005), None);
    }

    #[test]
    fn cumulative_matches_midpoint_rule() {
        let dt = 0.1;
        let values: Vec<f64> = (0..=30).map(|i| 1.0 + (i as f64 * 0.37).sin()).collect();
        let force = CumulativeForce::new(dt, &values, &[0.7]).unwrap();
        for &(a, b) in &[(0.0, 3.0), (0.05, 2.33), (1.234, 1.9), (2.9, 3.0)] {
            let exact = brute(|u| force.value(u), a, b);
            assert!((force.integral(a, b) - exact).abs() < 1e-9, "{a} {b}");
            let waning = brute(|u| (1.0 - (-0.7 * (u - a)).exp()) * force.value(u), a, b);
            assert!(
                (force.waning_integral(0.7, a, b) - waning).abs() < 1e-9,
                "waning {a} {b}"
            );
        }
    }

    #[test]
    fn negative_force_rejected() {
        assert!(matches!(
            CumulativeForce::new(0.1, &[0.0, -1.0], &[]),
            Err(GridError::BadValue { index: 1, .. })
        ));
    }
}
