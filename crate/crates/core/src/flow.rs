//! Maturation flow along a mature-population history.
//!
//! `M(s, t, x)` is the maturity at time `s` of a cell whose maturity at time
//! `t` is `x`; it solves `dM/ds = m(M, z(s))` with `M(t, t, x) = x`. The rate
//! `m` is the clamped extension, so the flow is defined on the whole line.

use thiserror::Error;

use crate::rates::ClampedRates;

#[derive(Debug, Error, PartialEq)]
pub enum FlowError {
    #[error("z history: {0}")]
    BadHistory(String),
    #[error("{what} = {value} outside admissible range [{lo}, {hi}]")]
    OutOfRange { what: &'static str, value: f64, lo: f64, hi: f64 },
}

/// Piecewise-linear history of the scaled mature population, held constant
/// outside its time span.
#[derive(Debug, Clone, PartialEq)]
pub struct ZTrajectory {
    times: Vec<f64>,
    values: Vec<f64>,
}

impl ZTrajectory {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self, FlowError> {
        if times.is_empty() || times.len() != values.len() {
            return Err(FlowError::BadHistory("times and values must be non-empty and equal length".into()));
        }
        if times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(FlowError::BadHistory("times must be strictly increasing".into()));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(FlowError::BadHistory("values must be finite and non-negative".into()));
        }
        Ok(Self { times, values })
    }

    pub fn constant(value: f64) -> Self {
        Self { times: vec![0.0], values: vec![value] }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn span(&self) -> (f64, f64) {
        (self.times[0], *self.times.last().unwrap())
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.values[0];
        }
        if t >= self.times[n - 1] {
            return self.values[n - 1];
        }
        let hi = self.times.partition_point(|&s| s <= t);
        let lo = hi - 1;
        let w = (t - self.times[lo]) / (self.times[hi] - self.times[lo]);
        self.values[lo] + w * (self.values[hi] - self.values[lo])
    }

    /// Exact `int_a^b |z(u) - other(u)| du` for two piecewise-linear
    /// histories.
    pub fn abs_diff_integral(&self, other: &ZTrajectory, a: f64, b: f64) -> f64 {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        let mut knots: Vec<f64> = self
            .times
            .iter()
            .chain(other.times.iter())
            .copied()
            .filter(|&u| u > a && u < b)
            .collect();
        knots.push(a);
        knots.push(b);
        knots.sort_by(f64::total_cmp);
        knots.dedup();
        let mut total = 0.0;
        for w in knots.windows(2) {
            let (u0, u1) = (w[0], w[1]);
            let d0 = self.eval(u0) - other.eval(u0);
            let d1 = self.eval(u1) - other.eval(u1);
            let len = u1 - u0;
            total += if d0 * d1 >= 0.0 {
                0.5 * (d0.abs() + d1.abs()) * len
            } else {
                // Linear difference crosses zero inside the piece.
                0.5 * (d0 * d0 + d1 * d1) / (d0.abs() + d1.abs()) * len
            };
        }
        total
    }
}

/// Largest integration step of the flow integrator.
pub const DEFAULT_MAX_STEP: f64 = 1e-2;

/// Step-doubling discrepancy above which a step is subdivided.
const STEP_TOLERANCE: f64 = 1e-14;
const MAX_REFINEMENT: u32 = 20;

/// The flow generated by `m` along a fixed `z` history.
#[derive(Debug, Clone, Copy)]
pub struct FlowField<'a> {
    rates: &'a ClampedRates,
    z: &'a ZTrajectory,
    max_step: f64,
}

impl<'a> FlowField<'a> {
    pub fn new(rates: &'a ClampedRates, z: &'a ZTrajectory) -> Self {
        Self { rates, z, max_step: DEFAULT_MAX_STEP }
    }

    pub fn with_max_step(mut self, max_step: f64) -> Self {
        assert!(max_step > 0.0);
        self.max_step = max_step;
        self
    }

    pub fn rates(&self) -> &ClampedRates {
        self.rates
    }

    pub fn z(&self) -> &ZTrajectory {
        self.z
    }

    #[inline]
    pub fn velocity(&self, x: f64, u: f64) -> f64 {
        self.rates.m(x, self.z.eval(u))
    }

    #[inline]
    fn rk4_step(&self, u: f64, x: f64, h: f64) -> f64 {
        let k1 = self.velocity(x, u);
        let k2 = self.velocity(x + 0.5 * h * k1, u + 0.5 * h);
        let k3 = self.velocity(x + 0.5 * h * k2, u + 0.5 * h);
        let k4 = self.velocity(x + h * k3, u + h);
        x + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    }

    /// One step of length `h`, checked against two half steps and
    /// subdivided where they disagree (kinks of the clamped rate or of the
    /// interpolated history).
    fn step(&self, u: f64, x: f64, h: f64) -> f64 {
        self.refined_step(u, x, h, 0)
    }

    fn refined_step(&self, u: f64, x: f64, h: f64, depth: u32) -> f64 {
        let full = self.rk4_step(u, x, h);
        let mid = self.rk4_step(u, x, 0.5 * h);
        let half = self.rk4_step(u + 0.5 * h, mid, 0.5 * h);
        if (half - full).abs() <= STEP_TOLERANCE || depth >= MAX_REFINEMENT {
            return half + (half - full) / 15.0;
        }
        let left = self.refined_step(u, x, 0.5 * h, depth + 1);
        self.refined_step(u + 0.5 * h, left, 0.5 * h, depth + 1)
    }

    fn steps_for(&self, span: f64) -> usize {
        if span == 0.0 {
            return 0;
        }
        let h = self.max_step.min(span / 10.0);
        (span / h).ceil() as usize
    }

    fn integrate(&self, s: f64, t: f64, x: f64, steps: usize) -> f64 {
        if steps == 0 {
            return x;
        }
        let h = (s - t) / steps as f64;
        let mut y = x;
        for k in 0..steps {
            y = self.step(t + k as f64 * h, y, h);
        }
        y
    }

    /// `M(s, t, x)`.
    pub fn flow(&self, s: f64, t: f64, x: f64) -> f64 {
        self.integrate(s, t, x, self.steps_for((s - t).abs()))
    }

    /// `M(s, t, x)` with a Richardson estimate of its integration error.
    pub fn flow_with_error(&self, s: f64, t: f64, x: f64) -> (f64, f64) {
        let steps = self.steps_for((s - t).abs());
        let coarse = self.integrate(s, t, x, steps);
        let fine = self.integrate(s, t, x, 2 * steps);
        (fine, (fine - coarse).abs() / 15.0)
    }

    /// Dense curve `u -> M(u, t, x)` for `u` between `t` and `end`.
    pub fn characteristic(&self, t: f64, x: f64, end: f64) -> Characteristic<'a> {
        let steps = self.steps_for((end - t).abs());
        let mut times = Vec::with_capacity(steps + 1);
        let mut values = Vec::with_capacity(steps + 1);
        times.push(t);
        values.push(x);
        if steps > 0 {
            let h = (end - t) / steps as f64;
            let mut y = x;
            for k in 0..steps {
                y = self.step(t + k as f64 * h, y, h);
                times.push(if k + 1 == steps { end } else { t + (k + 1) as f64 * h });
                values.push(y);
            }
        }
        if end < t {
            times.reverse();
            values.reverse();
        }
        Characteristic { field: *self, times, values }
    }

    /// `h(t, y)`: the maturity at time 0 that reaches `y` at time `t`.
    pub fn inverse_space(&self, t: f64, y: f64) -> Result<f64, FlowError> {
        let lo = self.flow(t, 0.0, 0.0);
        let hi = self.flow(t, 0.0, 1.0);
        let tol = 1e-12;
        if !(y >= lo - tol && y <= hi + tol) {
            return Err(FlowError::OutOfRange { what: "y", value: y, lo, hi });
        }
        let g = |x: f64| self.flow(t, 0.0, x) - y;
        // The backward flow is the inverse up to integration error; polish
        // it against the forward map with a bracketed secant.
        let guess = self.flow(0.0, t, y).clamp(0.0, 1.0);
        Ok(bracketed_secant(g, 0.0, 1.0, lo - y, hi - y, guess, 1e-13))
    }

    /// `kappa(t, y, x)`: the time in `[0, t]` at which a cell must sit at
    /// `x` to reach `y` at time `t`.
    pub fn inverse_time_kappa(&self, t: f64, y: f64, x: f64) -> Result<f64, FlowError> {
        let curve = self.characteristic(t, y, 0.0);
        let start = curve.values[0];
        let tol = 1e-12;
        if !(x <= y + tol && x >= start - tol) {
            return Err(FlowError::OutOfRange { what: "x", value: x, lo: start, hi: y });
        }
        Ok(curve.time_at(x))
    }

    /// `tau(t, y) = kappa(t, y, 0)`: entry time of the cell that leaves the
    /// stem boundary and reaches `y` at time `t`.
    pub fn inverse_time_tau(&self, t: f64, y: f64) -> Result<f64, FlowError> {
        self.inverse_time_kappa(t, y, 0.0)
    }
}

/// Root of increasing `g` on `[a, b]` with `g(a) = ga <= 0 <= g(b) = gb`,
/// starting from `guess`. Illinois-modified regula falsi with a secant
/// first step.
fn bracketed_secant(
    g: impl Fn(f64) -> f64,
    mut a: f64,
    mut b: f64,
    mut ga: f64,
    mut gb: f64,
    guess: f64,
    tol: f64,
) -> f64 {
    if ga >= 0.0 {
        return a;
    }
    if gb <= 0.0 {
        return b;
    }
    let mut x = guess.clamp(a, b);
    let mut gx = g(x);
    let mut side = 0i8;
    for _ in 0..200 {
        if gx.abs() <= tol || b - a <= f64::EPSILON * 4.0 {
            return x;
        }
        if gx < 0.0 {
            a = x;
            ga = gx;
            if side == -1 {
                gb *= 0.5;
            }
            side = -1;
        } else {
            b = x;
            gb = gx;
            if side == 1 {
                ga *= 0.5;
            }
            side = 1;
        }
        x = a - ga * (b - a) / (gb - ga);
        if !(x > a && x < b) {
            x = 0.5 * (a + b);
        }
        gx = g(x);
    }
    x
}

/// Dense solution `u -> M(u, t0, x0)` of the flow ODE, stored at nodes in
/// increasing time. Values between nodes come from one integrator step
/// started at the nearest node.
#[derive(Debug, Clone)]
pub struct Characteristic<'a> {
    field: FlowField<'a>,
    times: Vec<f64>,
    values: Vec<f64>,
}

impl<'a> Characteristic<'a> {
    pub fn span(&self) -> (f64, f64) {
        (self.times[0], *self.times.last().unwrap())
    }

    /// Stored nodes `(times, values)`.
    pub fn nodes(&self) -> (&[f64], &[f64]) {
        (&self.times, &self.values)
    }

    pub fn eval(&self, u: f64) -> f64 {
        let n = self.times.len();
        if n == 1 {
            return self.values[0];
        }
        let u = u.clamp(self.times[0], self.times[n - 1]);
        let hi = self.times.partition_point(|&s| s < u).min(n - 1);
        let j = if hi > 0 && (u - self.times[hi - 1]) < (self.times[hi] - u) { hi - 1 } else { hi };
        let h = u - self.times[j];
        if h == 0.0 {
            self.values[j]
        } else {
            self.field.step(self.times[j], self.values[j], h)
        }
    }

    /// `d/du M(u, t0, x0) = m(M, z(u))`.
    pub fn slope(&self, u: f64) -> f64 {
        self.field.velocity(self.eval(u), u)
    }

    /// The time at which the curve passes through `x`, clamped to the span.
    pub fn time_at(&self, x: f64) -> f64 {
        let n = self.times.len();
        if n == 1 || x <= self.values[0] {
            return self.times[0];
        }
        if x >= self.values[n - 1] {
            return self.times[n - 1];
        }
        let hi = self.values.partition_point(|&v| v < x);
        let (mut a, mut b) = (self.times[hi - 1], self.times[hi]);
        // Newton with bisection fallback inside the bracketing cell; the
        // slope is at least m_min.
        let mut u = a + (x - self.values[hi - 1]) / (self.values[hi] - self.values[hi - 1]) * (b - a);
        for _ in 0..100 {
            let g = self.eval(u) - x;
            if g.abs() <= 1e-15 {
                break;
            }
            if g < 0.0 {
                a = u;
            } else {
                b = u;
            }
            let next = u - g / self.slope(u);
            u = if next > a && next < b { next } else { 0.5 * (a + b) };
            if b - a <= 1e-15 * b.abs().max(1.0) {
                break;
            }
        }
        u
    }
}

/// Flow difference for two histories with its a-priori bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityGap {
    pub gap: f64,
    /// `exp(L_m T) int_s^t |z - z_hat| du` with `T = max(s, t)`.
    pub bound: f64,
    /// `L_m exp(L_m |t - s|) int_s^t |z - z_hat| du`, the Gronwall estimate.
    pub gronwall: f64,
}

pub fn stability_gap(f1: &FlowField, f2: &FlowField, s: f64, t: f64, x: f64) -> StabilityGap {
    let gap = (f1.flow(s, t, x) - f2.flow(s, t, x)).abs();
    let lip = f1.rates().bounds().lip_m;
    let area = f1.z().abs_diff_integral(f2.z(), s, t);
    StabilityGap {
        gap,
        bound: (lip * s.max(t)).exp() * area,
        gronwall: lip * (lip * (t - s).abs()).exp() * area,
    }
}
