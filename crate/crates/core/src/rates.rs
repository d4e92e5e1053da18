//! Regulated division and differentiation rates.
//!
//! A [`RateModel`] bundles the division rate `r(x, z)`, the differentiation
//! rate `m(x, z)` and the constant death rate `d` of mature cells, where `x`
//! is the maturity level in `[0, 1]` and `z` the scaled mature population.
//! The model also carries user-declared bounds and Lipschitz constants; they
//! are spot-checked by [`validate`] but never estimated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RateError {
    #[error("declared m_min must be positive, got {0}")]
    NonPositiveMMin(f64),
    #[error("declared bound `{name}` is invalid: {value}")]
    InvalidBound { name: &'static str, value: f64 },
    #[error("death rate must be finite and non-negative, got {0}")]
    InvalidDeathRate(f64),
    #[error("tabulated rate: {0}")]
    BadTable(String),
    #[error("rate parameter `{name}` must be finite, got {value}")]
    NonFiniteParameter { name: &'static str, value: f64 },
}

/// Tabulated rate on a tensor grid, bilinear inside and clamped outside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub xs: Vec<f64>,
    pub zs: Vec<f64>,
    /// `values[i][j]` is the rate at `(xs[i], zs[j])`.
    pub values: Vec<Vec<f64>>,
}

impl Table {
    fn check(&self) -> Result<(), RateError> {
        let strictly_increasing = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
        if self.xs.is_empty() || self.zs.is_empty() {
            return Err(RateError::BadTable("empty axis".into()));
        }
        if !strictly_increasing(&self.xs) || !strictly_increasing(&self.zs) {
            return Err(RateError::BadTable("axes must be strictly increasing".into()));
        }
        if self.values.len() != self.xs.len()
            || self.values.iter().any(|row| row.len() != self.zs.len())
        {
            return Err(RateError::BadTable(format!(
                "values must be {}x{}",
                self.xs.len(),
                self.zs.len()
            )));
        }
        if self.values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(RateError::BadTable("non-finite entry".into()));
        }
        Ok(())
    }

    fn bracket(axis: &[f64], v: f64) -> (usize, usize, f64) {
        if axis.len() == 1 || v <= axis[0] {
            return (0, 0, 0.0);
        }
        let last = axis.len() - 1;
        if v >= axis[last] {
            return (last, last, 0.0);
        }
        let hi = axis.partition_point(|&a| a <= v);
        let lo = hi - 1;
        (lo, hi, (v - axis[lo]) / (axis[hi] - axis[lo]))
    }

    fn eval(&self, x: f64, z: f64) -> f64 {
        let (i0, i1, tx) = Self::bracket(&self.xs, x);
        let (j0, j1, tz) = Self::bracket(&self.zs, z);
        let v = &self.values;
        let lo = v[i0][j0] * (1.0 - tz) + v[i0][j1] * tz;
        let hi = v[i1][j0] * (1.0 - tz) + v[i1][j1] * tz;
        lo * (1.0 - tx) + hi * tx
    }
}

fn infinity() -> f64 {
    f64::INFINITY
}

/// Built-in parametric families for `r` and `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum RateFn {
    Constant {
        value: f64,
    },
    /// `c0 + cx * x + cz * min(z, z_cap)`.
    Affine {
        c0: f64,
        #[serde(default)]
        cx: f64,
        #[serde(default)]
        cz: f64,
        #[serde(default = "infinity")]
        z_cap: f64,
    },
    /// `max(base / (1 + gain * z), floor)`: feedback that saturates at `floor`.
    Saturating {
        base: f64,
        gain: f64,
        #[serde(default)]
        floor: f64,
    },
    Tabulated(Table),
}

impl RateFn {
    pub fn constant(value: f64) -> Self {
        RateFn::Constant { value }
    }

    #[inline]
    pub fn eval(&self, x: f64, z: f64) -> f64 {
        match self {
            RateFn::Constant { value } => *value,
            RateFn::Affine { c0, cx, cz, z_cap } => c0 + cx * x + cz * z.min(*z_cap),
            RateFn::Saturating { base, gain, floor } => (base / (1.0 + gain * z)).max(*floor),
            RateFn::Tabulated(t) => t.eval(x, z),
        }
    }

    /// True when the function does not depend on `z`.
    pub fn is_unregulated(&self) -> bool {
        match self {
            RateFn::Constant { .. } => true,
            RateFn::Affine { cz, z_cap, .. } => *cz == 0.0 || *z_cap <= 0.0,
            RateFn::Saturating { base, gain, floor } => *gain == 0.0 || floor >= base,
            RateFn::Tabulated(t) => t.zs.len() == 1,
        }
    }

    fn check(&self) -> Result<(), RateError> {
        let finite = |name: &'static str, value: f64| {
            if value.is_finite() {
                Ok(())
            } else {
                Err(RateError::NonFiniteParameter { name, value })
            }
        };
        match self {
            RateFn::Constant { value } => finite("value", *value),
            RateFn::Affine { c0, cx, cz, z_cap } => {
                finite("c0", *c0)?;
                finite("cx", *cx)?;
                finite("cz", *cz)?;
                if z_cap.is_nan() {
                    return Err(RateError::NonFiniteParameter { name: "z_cap", value: *z_cap });
                }
                Ok(())
            }
            RateFn::Saturating { base, gain, floor } => {
                finite("base", *base)?;
                finite("gain", *gain)?;
                finite("floor", *floor)?;
                if *gain < 0.0 {
                    return Err(RateError::NonFiniteParameter { name: "gain", value: *gain });
                }
                Ok(())
            }
            RateFn::Tabulated(t) => t.check(),
        }
    }

    /// Infimum, supremum and Lipschitz constant (for the `|dx| + |dz|` norm)
    /// over `[0, 1] x [0, inf)`, computed from the family parameters.
    pub fn natural_bounds(&self) -> (f64, f64, f64) {
        match self {
            RateFn::Constant { value } => (*value, *value, 0.0),
            RateFn::Affine { c0, cx, cz, z_cap } => {
                let zc = z_cap.max(0.0);
                let x_lo = c0 + cx.min(0.0);
                let x_hi = c0 + cx.max(0.0);
                let (z_lo, z_hi) = if *cz == 0.0 {
                    (0.0, 0.0)
                } else {
                    let end = cz * zc;
                    (end.min(0.0), end.max(0.0))
                };
                let lip = if zc > 0.0 { cx.abs().max(cz.abs()) } else { cx.abs() };
                (x_lo + z_lo, x_hi + z_hi, lip)
            }
            RateFn::Saturating { base, gain, floor } => {
                let sup = base.max(*floor);
                let inf = if *gain > 0.0 { floor.max(base.min(0.0)) } else { sup };
                let lip = if base > floor { base.abs() * gain } else { 0.0 };
                (inf, sup, lip)
            }
            RateFn::Tabulated(t) => {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                let mut lip: f64 = 0.0;
                for (i, row) in t.values.iter().enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        lo = lo.min(v);
                        hi = hi.max(v);
                        if i + 1 < t.xs.len() {
                            let q = (t.values[i + 1][j] - v).abs() / (t.xs[i + 1] - t.xs[i]);
                            lip = lip.max(q);
                        }
                        if j + 1 < t.zs.len() {
                            let q = (row[j + 1] - v).abs() / (t.zs[j + 1] - t.zs[j]);
                            lip = lip.max(q);
                        }
                    }
                }
                (lo, hi, lip)
            }
        }
    }
}

/// Declared bounds: `0 <= r <= r_hat`, `m_min <= m <= m_hat`, and Lipschitz
/// constants of `r` and `m` for the norm `|x1 - x2| + |z1 - z2|`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateBounds {
    pub r_hat: f64,
    pub m_hat: f64,
    pub m_min: f64,
    pub lip_r: f64,
    pub lip_m: f64,
}

/// Rate functions plus the death rate of mature cells. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateModel {
    pub r: RateFn,
    pub m: RateFn,
    pub death: f64,
    pub bounds: RateBounds,
}

impl RateModel {
    pub fn new(r: RateFn, m: RateFn, death: f64, bounds: RateBounds) -> Result<Self, RateError> {
        r.check()?;
        m.check()?;
        if !(death.is_finite() && death >= 0.0) {
            return Err(RateError::InvalidDeathRate(death));
        }
        if !(bounds.m_min > 0.0) || !bounds.m_min.is_finite() {
            return Err(RateError::NonPositiveMMin(bounds.m_min));
        }
        for (name, value) in [
            ("r_hat", bounds.r_hat),
            ("m_hat", bounds.m_hat),
            ("lip_r", bounds.lip_r),
            ("lip_m", bounds.lip_m),
        ] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(RateError::InvalidBound { name, value });
            }
        }
        if bounds.m_hat < bounds.m_min {
            return Err(RateError::InvalidBound { name: "m_hat", value: bounds.m_hat });
        }
        Ok(Self { r, m, death, bounds })
    }

    /// Builds a model whose declared bounds are the family's own extrema.
    pub fn with_natural_bounds(r: RateFn, m: RateFn, death: f64) -> Result<Self, RateError> {
        let (_, r_hat, lip_r) = r.natural_bounds();
        let (m_min, m_hat, lip_m) = m.natural_bounds();
        let bounds = RateBounds { r_hat: r_hat.max(0.0), m_hat, m_min, lip_r, lip_m };
        Self::new(r, m, death, bounds)
    }

    /// Constant rates with tight declared bounds.
    pub fn constant(r: f64, m: f64, death: f64) -> Result<Self, RateError> {
        Self::with_natural_bounds(RateFn::constant(r), RateFn::constant(m), death)
    }

    #[inline]
    pub fn r(&self, x: f64, z: f64) -> f64 {
        self.r.eval(x, z)
    }

    #[inline]
    pub fn m(&self, x: f64, z: f64) -> f64 {
        self.m.eval(x, z)
    }

    /// Extension to the whole plane obtained by clamping `x` to `[0, 1]` and
    /// `z` to `[0, inf)`.
    pub fn extend_clamped(&self) -> ClampedRates {
        ClampedRates { model: self.clone() }
    }

    pub fn is_regulated(&self) -> bool {
        !(self.r.is_unregulated() && self.m.is_unregulated())
    }
}

/// A [`RateModel`] evaluated on all of `R x R` by clamping its arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct ClampedRates {
    model: RateModel,
}

impl ClampedRates {
    #[inline]
    fn clamp(x: f64, z: f64) -> (f64, f64) {
        (x.clamp(0.0, 1.0), z.max(0.0))
    }

    #[inline]
    pub fn r(&self, x: f64, z: f64) -> f64 {
        let (x, z) = Self::clamp(x, z);
        self.model.r(x, z)
    }

    #[inline]
    pub fn m(&self, x: f64, z: f64) -> f64 {
        let (x, z) = Self::clamp(x, z);
        self.model.m(x, z)
    }

    pub fn death(&self) -> f64 {
        self.model.death
    }

    pub fn bounds(&self) -> &RateBounds {
        &self.model.bounds
    }

    pub fn model(&self) -> &RateModel {
        &self.model
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ViolationKind {
    DivisionNegative,
    DivisionAboveBound,
    DifferentiationBelowMin,
    DifferentiationAboveBound,
    DivisionLipschitz,
    DifferentiationLipschitz,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Violation {
    pub x: f64,
    pub z: f64,
    pub kind: ViolationKind,
    /// Offending value (a rate, or a difference quotient).
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Relative slack on every comparison so that a rate exactly equal to its
/// declared bound is not flagged.
const BOUND_SLACK: f64 = 1e-12;

fn exceeds(value: f64, bound: f64) -> bool {
    value > bound + BOUND_SLACK * bound.abs().max(1.0)
}

/// Spot-checks the declared bounds and Lipschitz constants at `samples`
/// random points of `[0, 1] x [0, inf)`. Deterministic in `seed`.
pub fn validate(model: &RateModel, samples: usize, seed: u64) -> ValidationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = model.bounds;
    let mut violations = Vec::new();
    for _ in 0..samples {
        let x: f64 = rng.random();
        // Mostly moderate z with an exponential tail for large populations.
        let z: f64 = -4.0 * (1.0 - rng.random::<f64>()).ln();
        let r = model.r(x, z);
        let m = model.m(x, z);
        let mut push = |kind, value, bound| violations.push(Violation { x, z, kind, value, bound });
        if r < 0.0 {
            push(ViolationKind::DivisionNegative, r, 0.0);
        }
        if exceeds(r, b.r_hat) {
            push(ViolationKind::DivisionAboveBound, r, b.r_hat);
        }
        if exceeds(b.m_min, m) {
            push(ViolationKind::DifferentiationBelowMin, m, b.m_min);
        }
        if exceeds(m, b.m_hat) {
            push(ViolationKind::DifferentiationAboveBound, m, b.m_hat);
        }

        // Partner point at a log-uniform distance in [1e-4, 1].
        let scale = 10f64.powf(-4.0 * rng.random::<f64>());
        let x2 = (x + scale * (2.0 * rng.random::<f64>() - 1.0)).clamp(0.0, 1.0);
        let z2 = (z + scale * (2.0 * rng.random::<f64>() - 1.0)).max(0.0);
        let dist = (x - x2).abs() + (z - z2).abs();
        if dist > 0.0 {
            let qr = (r - model.r(x2, z2)).abs() / dist;
            let qm = (m - model.m(x2, z2)).abs() / dist;
            if exceeds(qr, b.lip_r) && (qr - b.lip_r) * dist > 1e-14 {
                push(ViolationKind::DivisionLipschitz, qr, b.lip_r);
            }
            if exceeds(qm, b.lip_m) && (qm - b.lip_m) * dist > 1e-14 {
                push(ViolationKind::DifferentiationLipschitz, qm, b.lip_m);
            }
        }
    }
    ValidationReport { samples, violations }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bounds(r_hat: f64, m_min: f64, m_hat: f64) -> RateBounds {
        RateBounds { r_hat, m_hat, m_min, lip_r: 0.0, lip_m: 0.0 }
    }

    #[test]
    fn reference_constant_model_is_clean() {
        let model = RateModel::new(
            RateFn::constant(0.015),
            RateFn::constant(0.02),
            0.005,
            bounds(0.015, 0.02, 0.02),
        )
        .unwrap();
        let report = validate(&model, 2000, 7);
        assert!(report.is_clean(), "{:?}", report.violations.first());
    }

    #[test]
    fn zero_division_rate_is_clean() {
        let model =
            RateModel::new(RateFn::constant(0.0), RateFn::constant(0.02), 0.0, bounds(0.0, 0.02, 0.02))
                .unwrap();
        assert!(validate(&model, 500, 1).is_clean());
    }

    #[test]
    fn low_differentiation_rate_flags_every_sample() {
        let model = RateModel::new(
            RateFn::constant(0.015),
            RateFn::constant(0.01),
            0.005,
            bounds(0.015, 0.02, 0.02),
        )
        .unwrap();
        let report = validate(&model, 300, 3);
        let below = report
            .violations
            .iter()
            .filter(|v| v.kind == ViolationKind::DifferentiationBelowMin)
            .count();
        assert_eq!(below, 300);
        assert_eq!(report.violations.len(), 300);
    }

    #[test]
    fn lipschitz_violation_detected() {
        let m = RateFn::Affine { c0: 0.02, cx: 0.02, cz: 0.0, z_cap: f64::INFINITY };
        let mut model = RateModel::with_natural_bounds(RateFn::constant(0.0), m, 0.0).unwrap();
        assert!(validate(&model, 500, 9).is_clean());
        model.bounds.lip_m = 0.01;
        let report = validate(&model, 500, 9);
        assert!(report
            .violations
            .iter()
            .all(|v| v.kind == ViolationKind::DifferentiationLipschitz));
        assert!(!report.is_clean());
    }

    #[test]
    fn validation_is_deterministic_in_seed() {
        let model = RateModel::new(
            RateFn::constant(0.015),
            RateFn::Saturating { base: 0.04, gain: 2.0, floor: 0.01 },
            0.005,
            bounds(0.015, 0.02, 0.04),
        )
        .unwrap();
        let a = validate(&model, 400, 11);
        let b = validate(&model, 400, 11);
        assert_eq!(a, b);
        assert!(!a.is_clean());
    }

    #[test]
    fn rejects_non_positive_m_min() {
        let err = RateModel::new(RateFn::constant(0.0), RateFn::constant(0.0), 0.0, bounds(0.0, 0.0, 0.0));
        assert_eq!(err.unwrap_err(), RateError::NonPositiveMMin(0.0));
    }

    #[test]
    fn clamped_extension_matches_boundary_values() {
        let m = RateFn::Affine { c0: 0.02, cx: 0.01, cz: 0.001, z_cap: 1.0 };
        let model = RateModel::with_natural_bounds(RateFn::constant(0.01), m, 0.0).unwrap();
        let ext = model.extend_clamped();
        assert_eq!(ext.m(-0.5, 0.3), ext.m(0.0, 0.3));
        assert_eq!(ext.m(1.7, 0.3), model.m(1.0, 0.3));
        assert_eq!(ext.m(0.4, -1.0), ext.m(0.4, 0.0));
        assert_eq!(ext.m(0.4, 0.6), model.m(0.4, 0.6));
        let flat = RateModel::constant(0.0, 0.02, 0.0).unwrap().extend_clamped();
        for &(x, z) in &[(-3.0, -3.0), (0.5, 1e6), (9.0, 2.0)] {
            assert_eq!(flat.m(x, z), 0.02);
        }
    }

    #[test]
    fn tabulated_is_bilinear_and_clamped() {
        let table = Table {
            xs: vec![0.0, 1.0],
            zs: vec![0.0, 2.0],
            values: vec![vec![1.0, 3.0], vec![2.0, 4.0]],
        };
        let f = RateFn::Tabulated(table);
        assert!((f.eval(0.5, 1.0) - 2.5).abs() < 1e-15);
        assert_eq!(f.eval(0.0, 10.0), 3.0);
        let (lo, hi, lip) = f.natural_bounds();
        assert_eq!((lo, hi, lip), (1.0, 4.0, 1.0));
    }

    #[test]
    fn saturating_natural_bounds() {
        let f = RateFn::Saturating { base: 0.04, gain: 2.0, floor: 0.01 };
        let (lo, hi, lip) = f.natural_bounds();
        assert_eq!((lo, hi), (0.01, 0.04));
        assert!((lip - 0.08).abs() < 1e-15);
        assert_eq!(f.eval(0.3, 1e9), 0.01);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn clamped_extension_stays_in_bounds_and_lipschitz(
                x1 in -5.0f64..5.0, z1 in -5.0f64..50.0,
                x2 in -5.0f64..5.0, z2 in -5.0f64..50.0,
            ) {
                let m = RateFn::Saturating { base: 0.05, gain: 0.5, floor: 0.02 };
                let model = RateModel::with_natural_bounds(RateFn::constant(0.01), m, 0.0).unwrap();
                let ext = model.extend_clamped();
                let b = *ext.bounds();
                let (m1, m2) = (ext.m(x1, z1), ext.m(x2, z2));
                prop_assert!(m1 >= b.m_min && m1 <= b.m_hat);
                let dist = (x1 - x2).abs() + (z1 - z2).abs();
                prop_assert!((m1 - m2).abs() <= b.lip_m * dist + 1e-15);
            }
        }
    }
}
