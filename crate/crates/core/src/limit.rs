//! Deterministic large-population limit.
//!
//! The limit triple is the stem mass `a(t)`, the immature measure `mu_t`
//! (with density `u(x, t)` when it exists) and the mature mass `z(t)`:
//!
//! ```text
//! a'            = (r(0, z) - m(0, z)) a
//! u_t + (m u)_x = r u,        u(0, t) = a(t)
//! z'            = m(1, z) u(1, t) - d z
//! ```
//!
//! [`solve_upwind`] discretizes the density form with a first-order upwind
//! scheme. [`solve_mild`] works with the measure form: atoms are carried
//! along the maturation flow, stem influx enters as atoms at 0 and mass
//! leaving through 1 feeds `z`. [`density_reconstruct`] and
//! [`characteristic_density`] rebuild `u(., t)` from a stored history.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::empirical::AtomicMeasure;
use crate::flow::{FlowError, FlowField, ZTrajectory};
use crate::rates::{ClampedRates, RateModel};

#[derive(Debug, Error, PartialEq)]
pub enum LimitError {
    #[error("CFL violated: m_hat * dt / dx = {0} > 1")]
    Cfl(f64),
    #[error("negative density {value} at t = {t} (peak {peak})")]
    Negative { t: f64, value: f64, peak: f64 },
    #[error("z fixed point did not converge at t = {t} after {iterations} iterations (last change {change})")]
    Picard { t: f64, iterations: usize, change: f64 },
    #[error("t = {t} beyond stored history ending at {end}")]
    BeyondHistory { t: f64, end: f64 },
    #[error("invalid limit configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

/// Initial immature measure.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialDensity {
    #[default]
    Zero,
    /// `height (1 - ((x - center) / width)^2)^2` on `|x - center| < width`.
    Bump { center: f64, width: f64, height: f64 },
    /// `scale * exp(rate * x)`.
    Exponential { scale: f64, rate: f64 },
    /// Point masses `[location, weight]`; no density.
    Atoms { atoms: Vec<[f64; 2]> },
}

impl InitialDensity {
    pub fn has_density(&self) -> bool {
        !matches!(self, InitialDensity::Atoms { .. })
    }

    /// Density at `x` (zero for atomic data and outside `[0, 1]`).
    pub fn eval(&self, x: f64) -> f64 {
        if !(0.0..=1.0).contains(&x) {
            return 0.0;
        }
        match self {
            InitialDensity::Zero | InitialDensity::Atoms { .. } => 0.0,
            InitialDensity::Bump { center, width, height } => {
                let s = (x - center) / width;
                if s.abs() < 1.0 {
                    height * (1.0 - s * s).powi(2)
                } else {
                    0.0
                }
            }
            InitialDensity::Exponential { scale, rate } => scale * (rate * x).exp(),
        }
    }

    fn check(&self) -> Result<(), LimitError> {
        let bad = |m: &str| Err(LimitError::Config(m.to_string()));
        match self {
            InitialDensity::Zero => Ok(()),
            InitialDensity::Bump { width, height, .. } if !(*width > 0.0 && *height >= 0.0) => {
                bad("bump needs positive width and non-negative height")
            }
            InitialDensity::Exponential { scale, .. } if *scale < 0.0 => bad("exponential scale must be >= 0"),
            InitialDensity::Atoms { atoms }
                if atoms.iter().any(|[x, w]| !(0.0..=1.0).contains(x) || *w < 0.0) =>
            {
                bad("atoms need locations in [0, 1] and non-negative weights")
            }
            _ => Ok(()),
        }
    }
}

/// Settings specific to [`solve_mild`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MildOptions {
    /// Time step; defaults to the upwind default step.
    pub dt: Option<f64>,
    /// Largest integrator step when moving atoms along the flow.
    pub advect_step: f64,
    /// Atoms used to discretize an initial density; 0 means `4 * cells`.
    pub initial_atoms: usize,
    pub picard_damping: f64,
    pub picard_max_iter: usize,
    pub picard_tol: f64,
    /// Accumulate sums over atoms in reverse order.
    pub reverse_order: bool,
}

impl Default for MildOptions {
    fn default() -> Self {
        Self {
            dt: None,
            advect_step: 0.1,
            initial_atoms: 0,
            picard_damping: 1.0,
            picard_max_iter: 50,
            picard_tol: 1e-13,
            reverse_order: false,
        }
    }
}

/// Validated limit-solver configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitConfig {
    pub model: RateModel,
    pub horizon: f64,
    pub a0: f64,
    pub z0: f64,
    pub initial_density: InitialDensity,
    /// Spatial cells `J`; nodes are `x_j = j / J`.
    pub cells: usize,
    pub dt: Option<f64>,
    pub output_times: Vec<f64>,
    pub mild: MildOptions,
    /// Keep `a` at `a0` instead of integrating its equation.
    pub hold_stem: bool,
}

impl LimitConfig {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: RateModel,
        horizon: f64,
        a0: f64,
        z0: f64,
        initial_density: InitialDensity,
        cells: usize,
        dt: Option<f64>,
        output_times: Vec<f64>,
        mild: MildOptions,
    ) -> Result<Self, LimitError> {
        let bad = |m: String| Err(LimitError::Config(m));
        if !(horizon > 0.0 && horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {horizon}"));
        }
        if !(a0 >= 0.0 && z0 >= 0.0) {
            return bad(format!("a0 and z0 must be non-negative, got {a0}, {z0}"));
        }
        if cells < 2 {
            return bad(format!("need at least 2 cells, got {cells}"));
        }
        if let Some(dt) = dt {
            if !(dt > 0.0) {
                return bad(format!("dt must be positive, got {dt}"));
            }
        }
        if output_times.first() != Some(&0.0)
            || output_times.last() != Some(&horizon)
            || output_times.windows(2).any(|w| !(w[0] < w[1]))
        {
            return bad("output times must increase from 0 to the horizon".into());
        }
        if !(mild.advect_step > 0.0 && mild.picard_damping > 0.0 && mild.picard_damping <= 1.0) {
            return bad("mild options: advect_step > 0 and damping in (0, 1] required".into());
        }
        initial_density.check()?;
        Ok(Self { model, horizon, a0, z0, initial_density, cells, dt, output_times, mild, hold_stem: false })
    }

    /// Stem-only start `(a0, 0, 0)` on a uniform output grid.
    pub fn stem_only(model: RateModel, horizon: f64, a0: f64, cells: usize, interval: f64) -> Result<Self, LimitError> {
        let times = crate::config::uniform_grid(horizon, interval).map_err(|e| LimitError::Config(e.to_string()))?;
        Self::new(model, horizon, a0, 0.0, InitialDensity::Zero, cells, None, times, MildOptions::default())
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.cells as f64
    }

    /// Configured step, or half the CFL limit.
    pub fn time_step(&self) -> f64 {
        self.dt.unwrap_or(0.5 * self.dx() / self.model.bounds.m_hat)
    }
}

/// Per-step scalars of a limit solution.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MassHistory {
    pub times: Vec<f64>,
    pub stem: Vec<f64>,
    pub mature: Vec<f64>,
    /// `<mu_t, 1>`.
    pub immature_mass: Vec<f64>,
    /// `<mu_t, r(., z(t))>`.
    pub division: Vec<f64>,
}

impl MassHistory {
    fn push(&mut self, t: f64, a: f64, z: f64, mass: f64, division: f64) {
        self.times.push(t);
        self.stem.push(a);
        self.mature.push(z);
        self.immature_mass.push(mass);
        self.division.push(division);
    }

    pub fn z_trajectory(&self) -> Result<ZTrajectory, FlowError> {
        ZTrajectory::new(self.times.clone(), self.mature.clone())
    }

    /// Linear interpolation of `a`.
    pub fn stem_at(&self, t: f64) -> f64 {
        interpolate(&self.times, &self.stem, t)
    }
}

fn interpolate(times: &[f64], values: &[f64], t: f64) -> f64 {
    let n = times.len();
    if t <= times[0] {
        return values[0];
    }
    if t >= times[n - 1] {
        return values[n - 1];
    }
    let hi = times.partition_point(|&s| s <= t);
    let lo = hi - 1;
    let w = (t - times[lo]) / (times[hi] - times[lo]);
    values[lo] + w * (values[hi] - values[lo])
}

/// Residual of `d/dt <nu, 1> = r(0, z) a + <mu, r> - d z` per step, with
/// `nu = a delta_0 + mu + z delta_1`: forward difference of the total mass
/// against the trapezoid average of the source.
pub fn limit_mass_balance(history: &MassHistory, model: &RateModel) -> Vec<(f64, f64)> {
    let source = |k: usize| {
        let (a, z) = (history.stem[k], history.mature[k]);
        model.r(0.0, z) * a + history.division[k] - model.death * z
    };
    let total = |k: usize| history.stem[k] + history.immature_mass[k] + history.mature[k];
    (0..history.times.len().saturating_sub(1))
        .map(|k| {
            let dt = history.times[k + 1] - history.times[k];
            let rate = (total(k + 1) - total(k)) / dt;
            (0.5 * (history.times[k] + history.times[k + 1]), rate - 0.5 * (source(k) + source(k + 1)))
        })
        .collect()
}

/// Upwind solution sampled at the output times.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityGrid {
    /// Nodes `x_j = j dx`, `j = 0..=J`.
    pub x: Vec<f64>,
    pub dx: f64,
    pub dt: f64,
    pub times: Vec<f64>,
    pub a: Vec<f64>,
    pub z: Vec<f64>,
    /// `u[k][j]`; `u[k][0]` is the boundary value `a`.
    pub u: Vec<Vec<f64>>,
    /// Every step, with trapezoid quadrature in `x`.
    pub history: MassHistory,
    /// Largest relative defect of the discrete mass ledger over all steps.
    pub ledger_max_residual: f64,
    /// Number of tiny negative values set to zero.
    pub clipped: usize,
}

impl DensityGrid {
    /// `<mu, f>` at sample `k` by the trapezoid rule.
    pub fn pair(&self, k: usize, f: impl Fn(f64) -> f64) -> f64 {
        trapezoid(&self.x, &self.u[k], f)
    }

    /// The immature measure at sample `k` as atoms `(x_j, u_j dx)`, `j >= 1`.
    pub fn measure(&self, k: usize) -> AtomicMeasure {
        AtomicMeasure::from_atoms(self.x[1..].iter().zip(&self.u[k][1..]).map(|(&x, &u)| (x, u * self.dx)).collect())
    }
}

fn trapezoid(x: &[f64], u: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    let n = x.len();
    let dx = x[1] - x[0];
    let inner: f64 = (1..n - 1).map(|j| u[j] * f(x[j])).sum();
    dx * (inner + 0.5 * (u[0] * f(x[0]) + u[n - 1] * f(x[n - 1])))
}

/// Explicit first-order upwind scheme.
///
/// With fluxes `F_0 = m(0, z) a` and `F_j = m(x_j, z) u_j`:
///
/// ```text
/// u_j <- u_j - dt/dx (F_j - F_{j-1}) + dt r(x_j, z) u_j,   j = 1..J
/// z   <- z + dt (F_J - d z)
/// a   <- a + dt (r(0, z) - m(0, z)) a
/// ```
///
/// so `a + dx sum_{j>=1} u_j + z` changes by exactly
/// `dt (r(0, z) a + dx sum_j r_j u_j - d z)`, which is checked every step.
pub fn solve_upwind(cfg: &LimitConfig) -> Result<DensityGrid, LimitError> {
    if !cfg.initial_density.has_density() {
        return Err(LimitError::Config("upwind scheme needs an initial density".into()));
    }
    let model = &cfg.model;
    let j_max = cfg.cells;
    let dx = cfg.dx();
    let dt_max = cfg.time_step();
    let cfl = model.bounds.m_hat * dt_max / dx;
    if cfl > 1.0 + 1e-12 {
        return Err(LimitError::Cfl(cfl));
    }
    let x: Vec<f64> = (0..=j_max).map(|j| j as f64 * dx).collect();
    let mut u: Vec<f64> = x.iter().map(|&xj| cfg.initial_density.eval(xj)).collect();
    let mut a = cfg.a0;
    let mut z = cfg.z0;
    u[0] = a;

    let regulated = model.is_regulated();
    let mut r_rate: Vec<f64> = x.iter().map(|&xj| model.r(xj, z)).collect();
    let mut m_rate: Vec<f64> = x.iter().map(|&xj| model.m(xj, z)).collect();
    let mut flux = vec![0.0; j_max + 1];

    let mut out = DensityGrid {
        x: x.clone(),
        dx,
        dt: dt_max,
        times: Vec::with_capacity(cfg.output_times.len()),
        a: Vec::new(),
        z: Vec::new(),
        u: Vec::new(),
        history: MassHistory::default(),
        ledger_max_residual: 0.0,
        clipped: 0,
    };
    let record = |out: &mut DensityGrid, t: f64, a: f64, z: f64, u: &[f64], r_rate: &[f64]| {
        let mass = trapezoid(&out.x, u, |_| 1.0);
        let division = dx * (0.5 * (r_rate[0] * u[0] + r_rate[j_max] * u[j_max])
            + (1..j_max).map(|j| r_rate[j] * u[j]).sum::<f64>());
        out.history.push(t, a, z, mass, division);
    };
    record(&mut out, 0.0, a, z, &u, &r_rate);
    out.times.push(0.0);
    out.a.push(a);
    out.z.push(z);
    out.u.push(u.clone());

    let mut t = 0.0;
    for w in cfg.output_times.windows(2) {
        let span = w[1] - w[0];
        let steps = (span / dt_max * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let dt = span / steps as f64;
        let lambda = dt / dx;
        for step in 0..steps {
            if regulated && step + out.history.times.len() > 1 {
                for (j, &xj) in x.iter().enumerate() {
                    r_rate[j] = model.r(xj, z);
                    m_rate[j] = model.m(xj, z);
                }
            }
            let total_before = a + dx * u[1..].iter().sum::<f64>() + z;
            flux[0] = m_rate[0] * a;
            for j in 1..=j_max {
                flux[j] = m_rate[j] * u[j];
            }
            let division_cells: f64 = (1..=j_max).map(|j| r_rate[j] * u[j]).sum::<f64>() * dx;
            let mut peak: f64 = 0.0;
            for j in 1..=j_max {
                u[j] += -lambda * (flux[j] - flux[j - 1]) + dt * r_rate[j] * u[j];
                peak = peak.max(u[j]);
            }
            let z_new = z + dt * (flux[j_max] - model.death * z);
            let a_new = if cfg.hold_stem { a } else { a + dt * (r_rate[0] - m_rate[0]) * a };
            let expected = (a_new - a) + dt * (flux[0] + division_cells - model.death * z);
            a = a_new;
            z = z_new;
            u[0] = a;
            t = if step + 1 == steps { w[1] } else { w[0] + (step + 1) as f64 * dt };

            let total_after = a + dx * u[1..].iter().sum::<f64>() + z;
            let scale = total_before.abs().max(total_after.abs()).max(f64::MIN_POSITIVE);
            let defect = ((total_after - total_before) - expected).abs() / scale;
            out.ledger_max_residual = out.ledger_max_residual.max(defect);

            let tol = 1e-8 * peak.max(a);
            for v in u[1..].iter_mut() {
                if *v < 0.0 {
                    if *v < -tol {
                        return Err(LimitError::Negative { t, value: *v, peak });
                    }
                    *v = 0.0;
                    out.clipped += 1;
                }
            }
            if regulated {
                for (j, &xj) in x.iter().enumerate() {
                    r_rate[j] = model.r(xj, z);
                    m_rate[j] = model.m(xj, z);
                }
            }
            record(&mut out, t, a, z, &u, &r_rate);
        }
        out.times.push(t);
        out.a.push(a);
        out.z.push(z);
        out.u.push(u.clone());
    }
    Ok(out)
}

/// Mild solution sampled at the output times.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeasureTrajectory {
    pub times: Vec<f64>,
    pub a: Vec<f64>,
    pub z: Vec<f64>,
    /// Immature atoms `(x, w)` at each sample.
    pub atoms: Vec<Vec<(f64, f64)>>,
    pub history: MassHistory,
    pub dt: f64,
    /// Most Picard iterations needed by any step.
    pub max_picard_iterations: usize,
}

impl MeasureTrajectory {
    pub fn measure(&self, k: usize) -> AtomicMeasure {
        AtomicMeasure::from_atoms(self.atoms[k].clone())
    }

    /// `<nu_t, f> = a f(0) + <mu_t, f> + z f(1)`.
    pub fn pair_total(&self, k: usize, f: impl Fn(f64) -> f64) -> f64 {
        self.a[k] * f(0.0) + self.atoms[k].iter().map(|&(x, w)| w * f(x)).sum::<f64>() + self.z[k] * f(1.0)
    }

    /// Nodal density on `cells + 1` nodes from hat-function pairings:
    /// each atom's mass is split linearly between its two nodes.
    pub fn project(&self, k: usize, cells: usize) -> Vec<f64> {
        project_atoms(&self.atoms[k], cells)
    }
}

/// Hat-function projection of atoms onto `cells + 1` uniform nodes,
/// returned as a density (node mass over its dual cell length).
pub fn project_atoms(atoms: &[(f64, f64)], cells: usize) -> Vec<f64> {
    let dx = 1.0 / cells as f64;
    let mut mass = vec![0.0; cells + 1];
    for &(x, w) in atoms {
        let s = (x.clamp(0.0, 1.0) / dx).min(cells as f64);
        let j = (s.floor() as usize).min(cells - 1);
        let frac = s - j as f64;
        mass[j] += w * (1.0 - frac);
        mass[j + 1] += w * frac;
    }
    mass[0] /= 0.5 * dx;
    mass[cells] /= 0.5 * dx;
    for v in mass[1..cells].iter_mut() {
        *v /= dx;
    }
    mass
}

/// An immature atom of the mild solver. `w` is the weight the atom would
/// carry had none of it left; `left` is the fraction already moved to `z`.
#[derive(Debug, Clone, Copy)]
struct Atom {
    x: f64,
    w: f64,
    left: f64,
    /// Width in time over which the atom's mass passes `x = 1`.
    spread: f64,
    crossed_at: Option<f64>,
}

impl Atom {
    fn remaining(&self) -> f64 {
        self.w * (1.0 - self.left)
    }
}

struct AtomStep {
    x: f64,
    w: f64,
    /// Crossing time of `x = 1` inside the step and the weight at that time.
    crossing: Option<(f64, f64)>,
}

/// Moves one atom over `[t0, t0 + h]` with `z` linear between `z0` and `z1`.
/// The weight grows by `exp(int r)` (trapezoid along the path). Atoms
/// past `x = 1` keep moving with the clamped rates.
#[allow(clippy::too_many_arguments)]
fn advance_atom(
    rates: &ClampedRates,
    x: f64,
    w: f64,
    t0: f64,
    h: f64,
    z0: f64,
    z1: f64,
    substeps: usize,
) -> AtomStep {
    let zl = |u: f64| z0 + (u - t0) / h * (z1 - z0);
    let vel = |x: f64, u: f64| rates.m(x, zl(u));
    let hs = h / substeps as f64;
    let mut xp = x;
    let mut growth = 0.0;
    let mut rp = rates.r(xp, z0);
    let mut crossing = None;
    for k in 0..substeps {
        let u = t0 + k as f64 * hs;
        let k1 = vel(xp, u);
        let k2 = vel(xp + 0.5 * hs * k1, u + 0.5 * hs);
        let k3 = vel(xp + 0.5 * hs * k2, u + 0.5 * hs);
        let k4 = vel(xp + hs * k3, u + hs);
        let xn = xp + hs / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        let rn = rates.r(xn, zl(u + hs));
        if xp < 1.0 && xn >= 1.0 {
            let theta = ((1.0 - xp) / (xn - xp)).clamp(0.0, 1.0);
            let exit = u + theta * hs;
            let r_exit = rates.r(1.0, zl(exit));
            crossing = Some((exit, w * (growth + 0.5 * theta * hs * (rp + r_exit)).exp()));
        }
        growth += 0.5 * hs * (rp + rn);
        xp = xn;
        rp = rn;
    }
    AtomStep { x: xp, w: w * growth.exp(), crossing }
}

fn ordered_sum(values: impl DoubleEndedIterator<Item = f64>, reverse: bool) -> f64 {
    if reverse {
        values.rev().fold(0.0, |acc, v| acc + v)
    } else {
        values.fold(0.0, |acc, v| acc + v)
    }
}

/// Outcome of one trial move of an atom for a given end-of-step `z`.
struct Trial {
    atom: Atom,
    /// Mass handed to `z`, already decayed to the end of the step.
    outflow: f64,
}

#[allow(clippy::too_many_arguments)]
fn trial_move(rates: &ClampedRates, atom: &Atom, t0: f64, h: f64, z0: f64, z1: f64, substeps: usize, death: f64) -> Trial {
    let t1 = t0 + h;
    let step = advance_atom(rates, atom.x, atom.w, t0, h, z0, z1, substeps);
    // Crossing time (extrapolated past the step if the atom is still short
    // of 1) and the weight at the clamped time.
    let (exit, w_exit) = match (atom.crossed_at, step.crossing) {
        (Some(e), _) => (e, atom.w),
        (None, Some((e, w))) => (e, w),
        (None, None) => {
            let v = rates.m(step.x, z1);
            (t1 + (1.0 - step.x) / v, step.w)
        }
    };
    let fraction = if exit.is_finite() { ((t1 - exit) / atom.spread + 0.5).clamp(atom.left, 1.0) } else { atom.left };
    let leaving = fraction - atom.left;
    let outflow = if leaving > 0.0 {
        let from = exit.clamp(t0, t1);
        leaving * w_exit * (-death * (t1 - from)).exp()
    } else {
        0.0
    };
    let crossed_at = atom.crossed_at.or(step.crossing.map(|c| c.0));
    Trial { atom: Atom { x: step.x, w: step.w, left: fraction, spread: atom.spread, crossed_at }, outflow }
}

/// Measure-valued solver along characteristics.
///
/// Each step solves for `z(t + h)` by damped fixed-point iteration; within
/// an iterate `z` is linear in time. The stem uses the exponential
/// trapezoid rule and influx `m(0, z) a` enters at `x = 0` as atoms (half
/// a step's worth at each end of the step). An atom stands for mass that
/// entered over a short time window, so its passage through `x = 1` is
/// spread over a window of the same width centred on the crossing time;
/// this keeps the outflow continuous in the trial `z`. Mass reaching `z`
/// decays at rate `d` from its exit time.
pub fn solve_mild(cfg: &LimitConfig) -> Result<MeasureTrajectory, LimitError> {
    let model = &cfg.model;
    let rates = model.extend_clamped();
    let opts = &cfg.mild;
    let dt_max = opts.dt.unwrap_or_else(|| cfg.time_step());
    let regulated = model.is_regulated();
    let death = model.death;
    let lambda = |z: f64| rates.r(0.0, z) - rates.m(0.0, z);
    let atom = |x: f64, w: f64, spread: f64| Atom { x, w, left: 0.0, spread, crossed_at: None };

    let mut atoms: Vec<Atom> = match &cfg.initial_density {
        InitialDensity::Atoms { atoms: given } => {
            let spread = dt_max;
            given.iter().map(|&[x, w]| atom(x, w, spread)).collect()
        }
        InitialDensity::Zero => Vec::new(),
        density => {
            let k = if opts.initial_atoms > 0 { opts.initial_atoms } else { 4 * cfg.cells };
            let spread = (1.0 / (k as f64 * rates.m(1.0, cfg.z0))).min(cfg.horizon);
            (0..k)
                .map(|j| {
                    let x = (j as f64 + 0.5) / k as f64;
                    atom(x, density.eval(x) / k as f64, spread)
                })
                .filter(|a| a.w > 0.0)
                .collect()
        }
    };
    let mut a = cfg.a0;
    let mut z = cfg.z0;
    let mut pending = 0.0;
    let mut out = MeasureTrajectory {
        times: Vec::new(),
        a: Vec::new(),
        z: Vec::new(),
        atoms: Vec::new(),
        history: MassHistory::default(),
        dt: dt_max,
        max_picard_iterations: 0,
    };
    let snapshot = |atoms: &[Atom], pending: f64| {
        let mut v: Vec<(f64, f64)> = atoms.iter().map(|a| (a.x.min(1.0), a.remaining())).collect();
        if pending > 0.0 {
            v.push((0.0, pending));
        }
        v
    };
    let mass_terms = |atoms: &[Atom], pending: f64, z: f64| {
        let mass = ordered_sum(atoms.iter().map(Atom::remaining), opts.reverse_order) + pending;
        let div = ordered_sum(atoms.iter().map(|a| a.remaining() * rates.r(a.x, z)), opts.reverse_order)
            + pending * rates.r(0.0, z);
        (mass, div)
    };
    let (m0, d0) = mass_terms(&atoms, pending, z);
    out.history.push(0.0, a, z, m0, d0);
    out.times.push(0.0);
    out.a.push(a);
    out.z.push(z);
    out.atoms.push(snapshot(&atoms, pending));

    let mut moved: Vec<Trial> = Vec::new();
    for w in cfg.output_times.windows(2) {
        let span = w[1] - w[0];
        let steps = (span / dt_max * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let h = span / steps as f64;
        let substeps = (h / opts.advect_step).ceil().max(1.0) as usize;
        for step in 0..steps {
            let t0 = w[0] + step as f64 * h;
            let t1 = if step + 1 == steps { w[1] } else { t0 + h };
            let inflow = pending + 0.5 * h * rates.m(0.0, z) * a;
            if inflow > 0.0 {
                atoms.push(atom(0.0, inflow, h));
            }
            let mut z_guess = z;
            let mut iterations = 0;
            let (a_new, z_new) = loop {
                iterations += 1;
                let a_new = if cfg.hold_stem { a } else { a * (0.5 * h * (lambda(z) + lambda(z_guess))).exp() };
                moved.clear();
                moved.extend(atoms.iter().map(|at| trial_move(&rates, at, t0, h, z, z_guess, substeps, death)));
                let outflow = ordered_sum(moved.iter().map(|m| m.outflow), opts.reverse_order);
                let z_next = z * (-death * h).exp() + outflow;
                let change = (z_next - z_guess).abs();
                if !regulated || change <= opts.picard_tol * z_next.abs().max(1.0) {
                    break (a_new, z_next);
                }
                if iterations >= opts.picard_max_iter {
                    return Err(LimitError::Picard { t: t1, iterations, change });
                }
                z_guess = (1.0 - opts.picard_damping) * z_guess + opts.picard_damping * z_next;
            };
            out.max_picard_iterations = out.max_picard_iterations.max(iterations);
            atoms.clear();
            atoms.extend(moved.iter().filter(|m| m.atom.left < 1.0).map(|m| m.atom));
            a = a_new;
            z = z_new;
            pending = 0.5 * h * rates.m(0.0, z) * a;
            let (mass, div) = mass_terms(&atoms, pending, z);
            out.history.push(t1, a, z, mass, div);
        }
        out.times.push(w[1]);
        out.a.push(a);
        out.z.push(z);
        out.atoms.push(snapshot(&atoms, pending));
    }
    Ok(out)
}

/// Stored `(a, z)` per step plus density snapshots, for reconstructing the
/// density along characteristics.
#[derive(Debug, Clone)]
pub struct LimitHistory {
    pub steps: MassHistory,
    z: ZTrajectory,
    /// Snapshot times and nodal densities on `nodes`.
    pub snapshot_times: Vec<f64>,
    pub nodes: Vec<f64>,
    pub density: Vec<Vec<f64>>,
}

impl LimitHistory {
    pub fn from_grid(grid: &DensityGrid) -> Result<Self, LimitError> {
        Ok(Self {
            z: grid.history.z_trajectory()?,
            steps: grid.history.clone(),
            snapshot_times: grid.times.clone(),
            nodes: grid.x.clone(),
            density: grid.u.clone(),
        })
    }

    pub fn from_measure(traj: &MeasureTrajectory, cells: usize) -> Result<Self, LimitError> {
        let nodes = (0..=cells).map(|j| j as f64 / cells as f64).collect();
        Ok(Self {
            z: traj.history.z_trajectory()?,
            steps: traj.history.clone(),
            snapshot_times: traj.times.clone(),
            nodes,
            density: (0..traj.times.len()).map(|k| traj.project(k, cells)).collect(),
        })
    }

    pub fn z(&self) -> &ZTrajectory {
        &self.z
    }

    pub fn end(&self) -> f64 {
        *self.steps.times.last().unwrap()
    }

    /// Density at `(s, x)`, bilinear between snapshots and nodes.
    pub fn density_at(&self, s: f64, x: f64) -> f64 {
        let at_snapshot = |k: usize| interpolate(&self.nodes, &self.density[k], x);
        let ts = &self.snapshot_times;
        let n = ts.len();
        if s <= ts[0] {
            return at_snapshot(0);
        }
        if s >= ts[n - 1] {
            return at_snapshot(n - 1);
        }
        let hi = ts.partition_point(|&v| v <= s);
        let w = (s - ts[hi - 1]) / (ts[hi] - ts[hi - 1]);
        (1.0 - w) * at_snapshot(hi - 1) + w * at_snapshot(hi)
    }
}

/// Step used for the central differences in `y`.
const DY: f64 = 1e-4;

/// Density at time `t` and maturities `ys` from the three-term
/// representation: initial density pushed through the flow, stem influx
/// entering at `x = 0`, and divisions over the stored history.
pub fn density_reconstruct(
    history: &LimitHistory,
    rates: &ClampedRates,
    u0: &dyn Fn(f64) -> f64,
    t: f64,
    ys: &[f64],
    quadrature_points: usize,
) -> Result<Vec<f64>, LimitError> {
    if t > history.end() + 1e-12 {
        return Err(LimitError::BeyondHistory { t, end: history.end() });
    }
    let field = FlowField::new(rates, history.z());
    let upper = field.flow(t, 0.0, 1.0);
    let mut out = Vec::with_capacity(ys.len());
    for &y in ys {
        let curve = field.characteristic(t, y, 0.0);
        let plus = field.characteristic(t, y + DY, 0.0);
        let minus = field.characteristic(t, y - DY, 0.0);
        let origin = curve.eval(0.0);
        let mut g = 0.0;
        if origin > 0.0 && y < upper {
            // h(t, y) = M(0, t, y).
            let dh = (plus.eval(0.0) - minus.eval(0.0)) / (2.0 * DY);
            g += u0(origin) * dh;
        } else if origin <= 0.0 {
            let tau = curve.time_at(0.0);
            let dtau = (plus.time_at(0.0) - minus.time_at(0.0)) / (2.0 * DY);
            let zt = history.z().eval(tau);
            g -= rates.m(0.0, zt) * history.steps.stem_at(tau) * dtau;
        }
        let x_lo = origin.max(0.0);
        let x_hi = y.min(1.0);
        if x_hi > x_lo && quadrature_points >= 2 {
            let n = quadrature_points;
            let step = (x_hi - x_lo) / (n - 1) as f64;
            let mut acc = 0.0;
            for i in 0..n {
                let x = x_lo + i as f64 * step;
                let kappa = curve.time_at(x);
                let dkappa = (plus.time_at(x) - minus.time_at(x)) / (2.0 * DY);
                let val = rates.r(x, history.z().eval(kappa)) * dkappa * history.density_at(kappa, x);
                acc += if i == 0 || i == n - 1 { 0.5 * val } else { val };
            }
            g -= acc * step;
        }
        out.push(g);
    }
    Ok(out)
}

/// Density at time `t` by integrating `du/ds = (r - m_x) u` along the
/// characteristic through each `y`, started from `u0` on the initial line
/// or from `a` on the inflow boundary.
pub fn characteristic_density(
    history: &MassHistory,
    rates: &ClampedRates,
    u0: &dyn Fn(f64) -> f64,
    t: f64,
    ys: &[f64],
) -> Result<Vec<f64>, LimitError> {
    let end = *history.times.last().unwrap();
    if t > end + 1e-12 {
        return Err(LimitError::BeyondHistory { t, end });
    }
    let z = history.z_trajectory()?;
    let field = FlowField::new(rates, &z);
    let dm = |x: f64, zv: f64| {
        let e = 1e-6;
        (rates.m(x + e, zv) - rates.m(x - e, zv)) / (2.0 * e)
    };
    let rate = |x: f64, s: f64| {
        let zv = z.eval(s);
        rates.r(x, zv) - dm(x, zv)
    };
    let mut out = Vec::with_capacity(ys.len());
    for &y in ys {
        let curve = field.characteristic(t, y, 0.0);
        let origin = curve.eval(0.0);
        let (start, base) = if origin >= 0.0 {
            (0.0, u0(origin))
        } else {
            let tau = curve.time_at(0.0);
            (tau, history.stem_at(tau))
        };
        let (times, values) = curve.nodes();
        let mut growth = 0.0;
        let first = times.partition_point(|&s| s <= start);
        let mut prev_s = start;
        let mut prev_f = rate(curve.eval(start), start);
        for k in first..times.len() {
            let f = rate(values[k], times[k]);
            growth += 0.5 * (times[k] - prev_s) * (prev_f + f);
            prev_s = times[k];
            prev_f = f;
        }
        out.push(base * growth.exp());
    }
    Ok(out)
}
