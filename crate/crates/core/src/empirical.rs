//! Scaled empirical measures, test functions and the drift/martingale
//! decomposition of the stochastic system.
//!
//! With `X_1^N = X_1 / N`, `X_N^N = X_N / N` and the immature measure
//! `mu = (1/N) sum_{i=2}^{N-1} X_i delta_{i/N}`, each observable splits into
//! its initial value, a drift built from time integrals of the state, and a
//! martingale. Every drift and bracket here is assembled from the exact
//! integrals in [`EventLog`].

use std::fmt;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::rates::RateBounds;
use crate::ssa::{EventLog, Trajectory};

#[derive(Debug, Error, PartialEq)]
pub enum EmpiricalError {
    #[error("test function `{0}` has no finite value at x = 1")]
    UndefinedAtOne(String),
    #[error("unknown test function `{0}`")]
    UnknownTestFunction(String),
    #[error("discrete derivative step must be positive, got {0}")]
    BadStep(f64),
}

/// Finite measure on `[0, 1]` made of weighted atoms.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AtomicMeasure {
    /// `(location, weight)` pairs.
    pub atoms: Vec<(f64, f64)>,
}

impl AtomicMeasure {
    pub fn from_atoms(atoms: Vec<(f64, f64)>) -> Self {
        debug_assert!(atoms.iter().all(|&(x, w)| (0.0..=1.0).contains(&x) && w >= 0.0));
        Self { atoms }
    }

    pub fn pair(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.atoms.iter().map(|&(x, w)| w * f(x)).sum()
    }

    pub fn mass(&self) -> f64 {
        self.atoms.iter().map(|&(_, w)| w).sum()
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

/// Atoms `(i/N, X_i/N)` for `i = 2..N-1`, zero weights included.
pub fn empirical_measure(counts: &[u64]) -> AtomicMeasure {
    let n = counts.len();
    let nf = n as f64;
    AtomicMeasure {
        atoms: (2..n).map(|i| (i as f64 / nf, counts[i - 1] as f64 / nf)).collect(),
    }
}

type RealFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A bounded Lipschitz function on `[0, 1]` with declared bounds.
#[derive(Clone)]
pub struct TestFunction {
    pub name: String,
    eval: RealFn,
    derivative: Option<RealFn>,
    /// Declared bound on `|f|`.
    pub sup: f64,
    /// Declared Lipschitz constant.
    pub lip: f64,
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction")
            .field("name", &self.name)
            .field("sup", &self.sup)
            .field("lip", &self.lip)
            .finish()
    }
}

impl TestFunction {
    pub fn new(
        name: impl Into<String>,
        sup: f64,
        lip: f64,
        eval: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), eval: Arc::new(eval), derivative: None, sup, lip }
    }

    pub fn with_derivative(mut self, d: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.derivative = Some(Arc::new(d));
        self
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        (self.eval)(x)
    }

    pub fn derivative(&self, x: f64) -> Option<f64> {
        self.derivative.as_ref().map(|d| d(x))
    }

    pub fn one() -> Self {
        Self::new("one", 1.0, 0.0, |_| 1.0).with_derivative(|_| 0.0)
    }

    pub fn identity() -> Self {
        Self::new("x", 1.0, 1.0, |x| x).with_derivative(|_| 1.0)
    }

    pub fn square() -> Self {
        Self::new("x2", 1.0, 2.0, |x| x * x).with_derivative(|x| 2.0 * x)
    }

    /// Hat equal to 1 at 0, decreasing linearly to 0 at `eps`.
    pub fn hat_at_zero(eps: f64) -> Self {
        Self::new(format!("hat0_{eps}"), 1.0, 1.0 / eps, move |x| (1.0 - x / eps).max(0.0))
    }

    /// Hat equal to 1 at 1, decreasing linearly to 0 at `1 - eps`.
    pub fn hat_at_one(eps: f64) -> Self {
        Self::new(format!("hat1_{eps}"), 1.0, 1.0 / eps, move |x| (1.0 - (1.0 - x) / eps).max(0.0))
    }

    /// Looks up `one`, `x`, `x2`, `hat0:<eps>` or `hat1:<eps>`.
    pub fn by_name(name: &str) -> Result<Self, EmpiricalError> {
        let unknown = || EmpiricalError::UnknownTestFunction(name.to_string());
        match name {
            "one" => Ok(Self::one()),
            "x" => Ok(Self::identity()),
            "x2" => Ok(Self::square()),
            _ => {
                let (kind, eps) = name.split_once(':').ok_or_else(unknown)?;
                let eps: f64 = eps.parse().map_err(|_| unknown())?;
                if !(eps > 0.0 && eps <= 1.0) {
                    return Err(unknown());
                }
                match kind {
                    "hat0" => Ok(Self::hat_at_zero(eps)),
                    "hat1" => Ok(Self::hat_at_one(eps)),
                    _ => Err(unknown()),
                }
            }
        }
    }
}

/// `(f(x + h) - f(x)) / h`, with sup bound `lip(f)` and Lipschitz bound
/// `2 lip(f) / h`.
pub fn discrete_derivative(f: &TestFunction, h: f64) -> Result<TestFunction, EmpiricalError> {
    if !(h > 0.0) {
        return Err(EmpiricalError::BadStep(h));
    }
    let inner = f.eval.clone();
    Ok(TestFunction::new(
        format!("diff_{}_{}", f.name, h),
        f.lip,
        2.0 * f.lip / h,
        move |x| (inner(x + h) - inner(x)) / h,
    ))
}

/// Integrals of the scaled state over `[0, t]`, built from an event log.
#[derive(Debug, Clone, Copy)]
struct ScaledIntegrals<'a> {
    log: &'a EventLog,
    n: usize,
    nf: f64,
}

impl<'a> ScaledIntegrals<'a> {
    fn new(log: &'a EventLog) -> Self {
        let n = log.n();
        Self { log, n, nf: n as f64 }
    }

    /// `int m(1/N, z) X_1^N ds`.
    fn stem_outflux(&self) -> f64 {
        self.log.differentiation_integral[0] / self.nf
    }

    /// `int (r - m)(1/N, z) X_1^N ds` and `int (r + m)(1/N, z) X_1^N ds`.
    fn stem_drift(&self) -> (f64, f64) {
        let r = self.log.division_integral[0];
        let m = self.log.differentiation_integral[0];
        ((r - m) / self.nf, (r + m) / self.nf)
    }

    /// `int <mu_s, g r> ds` for `g` given on types `i = 2..N-1`.
    fn mu_r(&self, g: impl Fn(usize) -> f64) -> f64 {
        (2..self.n).map(|i| g(i) * self.log.division_integral[i - 1]).sum::<f64>() / self.nf
    }

    /// `int <mu_s, g m> ds`.
    fn mu_m(&self, g: impl Fn(usize) -> f64) -> f64 {
        (2..self.n).map(|i| g(i) * self.log.differentiation_integral[i - 1]).sum::<f64>() / self.nf
    }

    /// `int X_N^N ds`.
    fn mature_occupancy(&self) -> f64 {
        self.log.occupancy_integral[self.n - 1] / self.nf
    }
}

/// Drift terms at one sample time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Drift {
    pub stem: f64,
    pub immature: f64,
    pub mature: f64,
}

fn f_values(f: &TestFunction, n: usize) -> Result<(Vec<f64>, f64), EmpiricalError> {
    let f1 = f.eval(1.0);
    if !f1.is_finite() {
        return Err(EmpiricalError::UndefinedAtOne(f.name.clone()));
    }
    let nf = n as f64;
    Ok(((0..=n).map(|i| f.eval(i as f64 / nf)).collect(), f1))
}

/// Drift terms for a state whose initial and current counts are `start`
/// and `now`, with the log accumulated in between.
pub fn drift_at(
    f: &TestFunction,
    start: &[u64],
    now: &[u64],
    log: &EventLog,
    death: f64,
) -> Result<Drift, EmpiricalError> {
    let s = ScaledIntegrals::new(log);
    let n = s.n;
    let nf = s.nf;
    let (fv, f1) = f_values(f, n)?;
    let delta = |i: usize| nf * (fv[i + 1] - fv[i]);
    let mass0 = empirical_measure(start).mass();
    let mass_t = empirical_measure(now).mass();
    let outflow = mass0 - mass_t + s.mu_r(|_| 1.0) + s.stem_outflux();
    let immature = fv[2] * s.stem_outflux() + s.mu_r(|i| fv[i]) + s.mu_m(delta) - f1 * outflow;
    Ok(Drift {
        stem: s.stem_drift().0,
        immature,
        mature: outflow - death * s.mature_occupancy(),
    })
}

/// Predicted brackets at one sample time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Brackets {
    pub stem: f64,
    pub immature: f64,
    pub mature: f64,
    pub stem_immature: f64,
    pub stem_mature: f64,
    pub immature_mature: f64,
}

/// Predicted quadratic variations and cross brackets from the log.
pub fn brackets_at(f: &TestFunction, log: &EventLog, death: f64) -> Result<Brackets, EmpiricalError> {
    let s = ScaledIntegrals::new(log);
    let n = s.n;
    let nf = s.nf;
    let (fv, f1) = f_values(f, n)?;
    let delta = |i: usize| nf * (fv[i + 1] - fv[i]);
    let outflux = s.stem_outflux();
    let gap2 = fv[2] - f1;
    Ok(Brackets {
        stem: s.stem_drift().1 / nf,
        immature: (s.mu_r(|i| (fv[i] - f1).powi(2))
            + s.mu_m(|i| delta(i).powi(2)) / nf
            + gap2 * gap2 * outflux)
            / nf,
        mature: (s.mu_r(|_| 1.0) + outflux + death * s.mature_occupancy()) / nf,
        stem_immature: (f1 - fv[2]) * outflux / nf,
        stem_mature: -outflux / nf,
        immature_mature: (s.mu_r(|i| fv[i] - f1) + gap2 * outflux) / nf,
    })
}

/// Compensated event counts per compartment: the raw martingales `M_i` for
/// `i = 2..N-1`, plus the scaled stem and mature martingales.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventMartingales {
    /// `M_1^N`.
    pub stem: f64,
    /// `M_i` for types `2..N-1` (index `i - 2`).
    pub immature: Vec<f64>,
    /// `M_N^N`.
    pub mature: f64,
}

pub fn event_martingales(log: &EventLog, death: f64) -> EventMartingales {
    let n = log.n();
    let nf = n as f64;
    let div = |k: usize| log.divisions[k] as f64 - log.division_integral[k];
    let diff = |k: usize| {
        let speed = if k == 0 { 1.0 } else { nf };
        log.differentiations[k] as f64 - speed * log.differentiation_integral[k]
    };
    let death_hat = log.deaths as f64 - death * log.occupancy_integral[n - 1];
    EventMartingales {
        stem: (div(0) - diff(0)) / nf,
        immature: (1..n - 1).map(|k| div(k) + diff(k - 1) - diff(k)).collect(),
        mature: (diff(n - 2) - death_hat) / nf,
    }
}

/// Martingale part of `<mu, f>` rebuilt from compensated event counts:
/// `(1/N) sum_i (f(i/N) - f(1)) M_i`.
pub fn event_martingale_f(mart: &EventMartingales, f: &TestFunction) -> f64 {
    let nf = (mart.immature.len() + 2) as f64;
    let f1 = f.eval(1.0);
    mart.immature
        .iter()
        .enumerate()
        .map(|(j, &m)| (f.eval((j + 2) as f64 / nf) - f1) * m)
        .sum::<f64>()
        / nf
}

/// Both sides of the summed differentiation identity at one time:
/// `int m((N-1)/N, z) X_{N-1} ds` against
/// `<mu_0,1> - <mu_t,1> + int m(1/N,z) X_1^N ds + int <mu, r> ds + (1/N) sum M_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
    /// Largest magnitude among the summands, floored at 1.
    pub scale: f64,
}

impl IdentityCheck {
    pub fn relative_error(&self) -> f64 {
        (self.lhs - self.rhs).abs() / self.scale
    }
}

pub fn telescoping_identity(start: &[u64], now: &[u64], log: &EventLog, death: f64) -> IdentityCheck {
    let s = ScaledIntegrals::new(log);
    let n = s.n;
    let mart = event_martingales(log, death);
    let terms = [
        empirical_measure(start).mass(),
        -empirical_measure(now).mass(),
        s.stem_outflux(),
        s.mu_r(|_| 1.0),
        mart.immature.iter().sum::<f64>() / s.nf,
    ];
    let lhs = log.differentiation_integral[n - 2];
    let scale = terms.iter().fold(lhs.abs(), |acc, t| acc.max(t.abs())).max(1.0);
    IdentityCheck { lhs, rhs: terms.iter().sum(), scale }
}

/// One row of the semimartingale panel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PanelRow {
    pub t: f64,
    pub drift: Drift,
    /// Residual martingales `M_1^N`, `M^{N,f}`, `M^N`.
    pub residual: Drift,
    pub brackets: Brackets,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SemimartingalePanel {
    pub test_function: String,
    pub rows: Vec<PanelRow>,
}

/// Drift terms, martingale residuals and predicted brackets at every
/// sample of `traj`.
pub fn semimartingale_panel(
    traj: &Trajectory,
    f: &TestFunction,
    death: f64,
) -> Result<SemimartingalePanel, EmpiricalError> {
    let start = &traj.counts[0];
    let n = traj.n();
    let nf = n as f64;
    let mu0 = empirical_measure(start);
    let mu0_f = mu0.pair(|x| f.eval(x));
    let mut rows = Vec::with_capacity(traj.times.len());
    for (k, &t) in traj.times.iter().enumerate() {
        let now = &traj.counts[k];
        let log = &traj.logs[k];
        let drift = drift_at(f, start, now, log, death)?;
        let mu_t = empirical_measure(now);
        let residual = Drift {
            stem: (now[0] as f64 - start[0] as f64) / nf - drift.stem,
            immature: mu_t.pair(|x| f.eval(x)) - mu0_f - drift.immature,
            mature: (now[n - 1] as f64 - start[n - 1] as f64) / nf - drift.mature,
        };
        rows.push(PanelRow { t, drift, residual, brackets: brackets_at(f, log, death)? });
    }
    Ok(SemimartingalePanel { test_function: f.name.clone(), rows })
}

/// `E[Y(0)] e^{r_hat T}`: bound on `E sup_{t <= T} (X_1^N + <mu,1> + X_N^N)`.
pub fn sup_total_bound(mean_y0: f64, r_hat: f64, horizon: f64) -> f64 {
    mean_y0 * (r_hat * horizon).exp()
}

/// Bound on `int_0^T E[X_i(s)] ds` for each immature type `i`:
/// `(1/m_min) [E Y(0) + (m_hat / r_hat) E X_1^N(0)] e^{r_hat T}`.
///
/// For `r_hat = 0` the second term becomes `m_hat E X_1^N(0) T`.
pub fn compartment_integral_bound(mean_y0: f64, mean_x1_0: f64, bounds: &RateBounds, horizon: f64) -> f64 {
    let grow = (bounds.r_hat * horizon).exp();
    let stem = if bounds.r_hat > 0.0 {
        bounds.m_hat / bounds.r_hat * mean_x1_0 * grow
    } else {
        bounds.m_hat * mean_x1_0 * horizon
    };
    (mean_y0 * grow + stem) / bounds.m_min
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::rates::RateModel;
    use crate::ssa::simulate;

    #[test]
    fn empirical_measure_examples() {
        let mu = empirical_measure(&[7, 3, 5, 2]);
        assert_eq!(mu.atoms, vec![(0.5, 0.75), (0.75, 1.25)]);
        let zero = empirical_measure(&[4, 0, 0, 0, 9]);
        assert_eq!(zero.len(), 3);
        assert_eq!(zero.mass(), 0.0);
        let mu = empirical_measure(&[1, 2, 3, 4, 5, 6]);
        assert!((mu.pair(|_| 1.0) - (2.0 + 3.0 + 4.0 + 5.0) / 6.0).abs() < 1e-15);
    }

    #[test]
    fn pairing_examples() {
        let mu = AtomicMeasure::from_atoms(vec![(0.5, 2.0)]);
        assert_eq!(mu.pair(|x| x), 1.0);
        assert_eq!(AtomicMeasure::default().pair(|x| x), 0.0);
        let n = 100;
        let uniform = AtomicMeasure::from_atoms((1..=n).map(|i| (i as f64 / n as f64, 1.0 / n as f64)).collect());
        // Right Riemann sum of x^2: (n+1)(2n+1) / (6 n^2).
        let oracle = (n + 1) as f64 * (2 * n + 1) as f64 / (6.0 * (n * n) as f64);
        let got = uniform.pair(|x| x * x);
        assert!((got - oracle).abs() < 1e-14);
        assert!((got - 1.0 / 3.0).abs() < 1e-2);
        // Cell-centred atoms: 1/3 - 1/(12 n^2).
        let centred = AtomicMeasure::from_atoms(
            (1..=n).map(|i| ((i as f64 - 0.5) / n as f64, 1.0 / n as f64)).collect(),
        );
        let got = centred.pair(|x| x * x);
        assert!((got - (1.0 / 3.0 - 1.0 / (12.0 * (n * n) as f64))).abs() < 1e-14);
        assert!((got - 1.0 / 3.0).abs() < 1e-3);
    }

    #[test]
    fn discrete_derivative_examples() {
        let d = discrete_derivative(&TestFunction::identity(), 0.37).unwrap();
        for &x in &[0.0, 0.2, 0.9] {
            assert!((d.eval(x) - 1.0).abs() < 1e-14);
        }
        let c = discrete_derivative(&TestFunction::one(), 0.1).unwrap();
        assert_eq!(c.eval(0.4), 0.0);
        let sq = discrete_derivative(&TestFunction::square(), 0.01).unwrap();
        assert!((sq.eval(0.3) - 0.61).abs() < 1e-12);
        assert!(discrete_derivative(&TestFunction::one(), 0.0).is_err());
    }

    #[test]
    fn by_name_resolves_builtins() {
        assert_eq!(TestFunction::by_name("x2").unwrap().eval(0.5), 0.25);
        let hat = TestFunction::by_name("hat0:0.2").unwrap();
        assert_eq!(hat.eval(0.0), 1.0);
        assert!((hat.eval(0.1) - 0.5).abs() < 1e-15);
        assert_eq!(hat.eval(0.3), 0.0);
        assert!(TestFunction::by_name("sin").is_err());
    }

    #[test]
    fn rejects_function_undefined_at_one() {
        let bad = TestFunction::new("pole", 1.0, 1.0, |x| 1.0 / (1.0 - x));
        let log = EventLog {
            divisions: vec![0; 3],
            differentiations: vec![0; 3],
            deaths: 0,
            division_integral: vec![0.0; 3],
            differentiation_integral: vec![0.0; 3],
            occupancy_integral: vec![0.0; 3],
        };
        assert!(matches!(
            drift_at(&bad, &[0, 0, 0], &[0, 0, 0], &log, 0.0),
            Err(EmpiricalError::UndefinedAtOne(_))
        ));
    }

    fn run(n: usize, seed: u64) -> (Trajectory, f64) {
        let model = RateModel::constant(0.015, 0.02, 0.005).unwrap();
        let cfg = ModelConfig::stem_only(n, 200.0, 2 * n as u64, model, 20.0, seed).unwrap();
        (simulate(&cfg), 0.005)
    }

    #[test]
    fn residuals_match_event_reconstruction() {
        let (traj, d) = run(20, 3);
        let f = TestFunction::square();
        let panel = semimartingale_panel(&traj, &f, d).unwrap();
        for (k, row) in panel.rows.iter().enumerate() {
            let mart = event_martingales(&traj.logs[k], d);
            let scale = 1.0 + row.drift.immature.abs();
            assert!((row.residual.stem - mart.stem).abs() < 1e-9 * scale);
            assert!((row.residual.immature - event_martingale_f(&mart, &f)).abs() < 1e-9 * scale);
            let m_total = mart.immature.iter().sum::<f64>() / 20.0 + mart.mature;
            assert!((row.residual.mature - m_total).abs() < 1e-9 * scale);
        }
        let first = &panel.rows[0];
        assert_eq!(first.residual.stem, 0.0);
        assert_eq!(first.residual.immature, 0.0);
        assert_eq!(first.residual.mature, 0.0);
    }

    #[test]
    fn constant_test_function_has_no_martingale() {
        let (traj, d) = run(15, 8);
        let panel = semimartingale_panel(&traj, &TestFunction::one(), d).unwrap();
        for row in &panel.rows {
            assert!(row.residual.immature.abs() < 1e-12);
            assert_eq!(row.brackets.immature, 0.0);
        }
    }

    #[test]
    fn zero_rates_give_zero_everything() {
        let model = RateModel::constant(0.0, 1e-300, 0.0).unwrap();
        let mut init = vec![0; 6];
        init[0] = 3;
        let cfg = ModelConfig::new(6, 10.0, init, model, vec![0.0, 5.0, 10.0], 1).unwrap();
        let traj = simulate(&cfg);
        let panel = semimartingale_panel(&traj, &TestFunction::identity(), 0.0).unwrap();
        for row in &panel.rows {
            assert!(row.residual.stem.abs() < 1e-12);
            assert!(row.residual.immature.abs() < 1e-12);
            assert!(row.residual.mature.abs() < 1e-12);
            assert!(row.brackets.immature.abs() < 1e-12);
            assert!(row.brackets.mature.abs() < 1e-12);
        }
    }

    #[test]
    fn stem_mature_bracket_is_minus_scaled_outflux() {
        let (traj, d) = run(25, 4);
        let log = traj.final_log();
        let b = brackets_at(&TestFunction::identity(), log, d).unwrap();
        let n = 25.0;
        let oracle = -(log.differentiation_integral[0] / n) / n;
        assert!((b.stem_mature - oracle).abs() <= 1e-15 * oracle.abs());
        assert!(b.stem >= 0.0 && b.immature >= 0.0 && b.mature >= 0.0);
    }

    #[test]
    fn telescoping_identity_holds() {
        for seed in 0..5 {
            let (traj, d) = run(12, seed);
            for k in 0..traj.times.len() {
                let check = telescoping_identity(&traj.counts[0], &traj.counts[k], &traj.logs[k], d);
                assert!(check.relative_error() < 1e-9, "{check:?}");
            }
        }
    }

    #[test]
    fn compartment_bound_zero_growth_limit() {
        let b = RateBounds { r_hat: 0.0, m_hat: 0.02, m_min: 0.02, lip_r: 0.0, lip_m: 0.0 };
        let c = compartment_integral_bound(1.0, 1.0, &b, 10.0);
        assert!((c - (1.0 + 0.2) / 0.02).abs() < 1e-12);
        let b = RateBounds { r_hat: 0.015, ..b };
        let c = compartment_integral_bound(1.0, 1.0, &b, 10.0);
        let oracle = (1.0 + 0.02 / 0.015) * (0.15f64).exp() / 0.02;
        assert!((c - oracle).abs() < 1e-12);
    }
}
