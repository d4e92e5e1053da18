//! Model configuration: validated in-memory form plus the TOML file schema.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::limit::{InitialDensity, LimitConfig, MildOptions};
use crate::rates::{RateBounds, RateError, RateFn, RateModel};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("n_compartments must be at least 3, got {0}")]
    TooFewCompartments(usize),
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("initial_counts has length {got}, expected {expected}")]
    InitialLength { got: usize, expected: usize },
    #[error("cannot parse initial_counts `{0}` (expected a list or \"stem_only: k\")")]
    BadInitialSpec(String),
    #[error("output grid: {0}")]
    BadOutputGrid(String),
    #[error("limit section: {0}")]
    BadLimit(String),
    #[error(transparent)]
    Rates(#[from] RateError),
    #[error("malformed config: {0}")]
    Parse(#[from] toml::de::Error),
}

/// Output times `0, dt, 2 dt, ...` up to and including `horizon`.
pub fn uniform_grid(horizon: f64, interval: f64) -> Result<Vec<f64>, ConfigError> {
    if !(interval > 0.0 && interval.is_finite()) {
        return Err(ConfigError::BadOutputGrid(format!("interval must be positive, got {interval}")));
    }
    let steps = (horizon / interval * (1.0 + 1e-12)).floor() as usize;
    let mut times: Vec<f64> = (0..=steps).map(|k| k as f64 * interval).collect();
    let last = *times.last().unwrap();
    if (horizon - last).abs() > 1e-9 * horizon.max(1.0) {
        times.push(horizon);
    } else {
        *times.last_mut().unwrap() = horizon;
    }
    Ok(times)
}

/// Everything needed to run the stochastic system.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n: usize,
    pub horizon: f64,
    /// Raw counts `X_1(0), ..., X_N(0)`.
    pub initial: Vec<u64>,
    pub model: RateModel,
    /// Sampling times, starting at 0 and ending at `horizon`.
    pub output_times: Vec<f64>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(
        n: usize,
        horizon: f64,
        initial: Vec<u64>,
        model: RateModel,
        output_times: Vec<f64>,
        seed: u64,
    ) -> Result<Self, ConfigError> {
        if n < 3 {
            return Err(ConfigError::TooFewCompartments(n));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(ConfigError::BadHorizon(horizon));
        }
        if initial.len() != n {
            return Err(ConfigError::InitialLength { got: initial.len(), expected: n });
        }
        if output_times.first() != Some(&0.0) {
            return Err(ConfigError::BadOutputGrid("must start at 0".into()));
        }
        if output_times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(ConfigError::BadOutputGrid("times must be strictly increasing".into()));
        }
        if output_times.last() != Some(&horizon) {
            return Err(ConfigError::BadOutputGrid("must end at the horizon".into()));
        }
        Ok(Self { n, horizon, initial, model, output_times, seed })
    }

    /// Stem-only start with `stem` raw cells and a uniform output grid.
    pub fn stem_only(
        n: usize,
        horizon: f64,
        stem: u64,
        model: RateModel,
        interval: f64,
        seed: u64,
    ) -> Result<Self, ConfigError> {
        let mut initial = vec![0; n];
        if n > 0 {
            initial[0] = stem;
        }
        Self::new(n, horizon, initial, model, uniform_grid(horizon, interval)?, seed)
    }
}

/// `initial_counts` as written in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialCountsSpec {
    List(Vec<u64>),
    Text(String),
}

impl InitialCountsSpec {
    pub fn resolve(&self, n: usize) -> Result<Vec<u64>, ConfigError> {
        match self {
            InitialCountsSpec::List(v) => Ok(v.clone()),
            InitialCountsSpec::Text(s) => {
                let bad = || ConfigError::BadInitialSpec(s.clone());
                let (key, value) = s.split_once(':').ok_or_else(bad)?;
                if key.trim() != "stem_only" {
                    return Err(bad());
                }
                let k: u64 = value.trim().parse().map_err(|_| bad())?;
                let mut counts = vec![0; n];
                if n > 0 {
                    counts[0] = k;
                }
                Ok(counts)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatesSection {
    pub r: RateFn,
    pub m: RateFn,
    /// Declared bounds; when absent the family's own extrema are used.
    pub bounds: Option<RateBounds>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitSection {
    #[serde(default = "defaults::a0")]
    pub a0: f64,
    #[serde(default)]
    pub z0: f64,
    #[serde(default)]
    pub initial_density: InitialDensity,
    #[serde(default = "defaults::cells")]
    pub cells: usize,
    /// Time step; defaults to half the CFL limit.
    pub dt: Option<f64>,
    pub output_interval: Option<f64>,
    #[serde(default)]
    pub mild: MildOptions,
}

impl Default for LimitSection {
    fn default() -> Self {
        Self {
            a0: defaults::a0(),
            z0: 0.0,
            initial_density: InitialDensity::default(),
            cells: defaults::cells(),
            dt: None,
            output_interval: None,
            mild: MildOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    /// Spatial cells of the reference limit solution.
    #[serde(default = "defaults::reference_cells")]
    pub reference_cells: usize,
    /// Grid nodes of the bounded-Lipschitz distance.
    #[serde(default = "defaults::bl_nodes")]
    pub bl_nodes: usize,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            reference_cells: defaults::reference_cells(),
            bl_nodes: defaults::bl_nodes(),
        }
    }
}

mod defaults {
    pub fn a0() -> f64 {
        1.0
    }
    pub fn cells() -> usize {
        200
    }
    pub fn reference_cells() -> usize {
        1600
    }
    pub fn bl_nodes() -> usize {
        512
    }
}

/// Top-level TOML document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub n_compartments: usize,
    pub horizon: f64,
    pub death_rate: f64,
    #[serde(default)]
    pub seed: u64,
    pub initial_counts: InitialCountsSpec,
    /// Sampling interval of the stochastic output grid; defaults to `horizon / 100`.
    pub output_interval: Option<f64>,
    pub rates: RatesSection,
    #[serde(default)]
    pub limit: LimitSection,
    #[serde(default)]
    pub compare: CompareSection,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let file: ConfigFile = toml::from_str(text)?;
        file.model_config()?;
        file.limit_config()?;
        Ok(file)
    }

    pub fn rate_model(&self) -> Result<RateModel, ConfigError> {
        let r = self.rates.r.clone();
        let m = self.rates.m.clone();
        Ok(match self.rates.bounds {
            Some(bounds) => RateModel::new(r, m, self.death_rate, bounds)?,
            None => RateModel::with_natural_bounds(r, m, self.death_rate)?,
        })
    }

    fn output_interval(&self) -> f64 {
        self.output_interval.unwrap_or(self.horizon / 100.0)
    }

    pub fn model_config(&self) -> Result<ModelConfig, ConfigError> {
        let n = self.n_compartments;
        if n < 3 {
            return Err(ConfigError::TooFewCompartments(n));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(ConfigError::BadHorizon(self.horizon));
        }
        let initial = self.initial_counts.resolve(n)?;
        let times = uniform_grid(self.horizon, self.output_interval())?;
        ModelConfig::new(n, self.horizon, initial, self.rate_model()?, times, self.seed)
    }

    pub fn limit_config(&self) -> Result<LimitConfig, ConfigError> {
        let l = &self.limit;
        let interval = l.output_interval.unwrap_or_else(|| self.output_interval());
        LimitConfig::new(
            self.rate_model()?,
            self.horizon,
            l.a0,
            l.z0,
            l.initial_density.clone(),
            l.cells,
            l.dt,
            uniform_grid(self.horizon, interval)?,
            l.mild.clone(),
        )
        .map_err(|e| ConfigError::BadLimit(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
n_compartments = 50
horizon = 1000.0
death_rate = 0.005
seed = 42
initial_counts = "stem_only: 50"
output_interval = 10.0

[rates.r]
family = "constant"
value = 0.015

[rates.m]
family = "constant"
value = 0.02
"#;

    #[test]
    fn parses_sample_document() {
        let file = ConfigFile::parse(SAMPLE).unwrap();
        let cfg = file.model_config().unwrap();
        assert_eq!(cfg.n, 50);
        assert_eq!(cfg.initial[0], 50);
        assert_eq!(cfg.initial.iter().sum::<u64>(), 50);
        assert_eq!(cfg.output_times.len(), 101);
        assert_eq!(*cfg.output_times.last().unwrap(), 1000.0);
        assert_eq!(cfg.model.bounds.m_min, 0.02);
        let limit = file.limit_config().unwrap();
        assert_eq!(limit.cells, 200);
    }

    #[test]
    fn explicit_list_and_bounds() {
        let text = r#"
n_compartments = 4
horizon = 5.0
death_rate = 0.0
initial_counts = [7, 3, 5, 2]

[rates.r]
family = "saturating"
base = 0.03
gain = 1.0
floor = 0.01

[rates.m]
family = "affine"
c0 = 0.02
cz = 0.001
z_cap = 1.0

[rates.bounds]
r_hat = 0.03
m_hat = 0.021
m_min = 0.02
lip_r = 0.03
lip_m = 0.001
"#;
        let cfg = ConfigFile::parse(text).unwrap().model_config().unwrap();
        assert_eq!(cfg.initial, vec![7, 3, 5, 2]);
        assert_eq!(cfg.model.bounds.lip_m, 0.001);
    }

    #[test]
    fn rejects_bad_documents() {
        assert!(ConfigFile::parse("n_compartments = ").is_err());
        let two = SAMPLE.replace("n_compartments = 50", "n_compartments = 2");
        assert!(matches!(ConfigFile::parse(&two), Err(ConfigError::TooFewCompartments(2))));
        let bad = SAMPLE.replace("stem_only: 50", "stems: 50");
        assert!(matches!(ConfigFile::parse(&bad), Err(ConfigError::BadInitialSpec(_))));
        let short = SAMPLE.replace("\"stem_only: 50\"", "[1, 2]");
        assert!(matches!(ConfigFile::parse(&short), Err(ConfigError::InitialLength { .. })));
        let zero_m = SAMPLE.replace("value = 0.02", "value = 0.0");
        assert!(matches!(ConfigFile::parse(&zero_m), Err(ConfigError::Rates(_))));
    }

    #[test]
    fn grid_ends_at_horizon() {
        let g = uniform_grid(1.0, 0.3).unwrap();
        assert_eq!(g, vec![0.0, 0.3, 0.6, 0.8999999999999999, 1.0]);
        let g = uniform_grid(1.0, 0.1).unwrap();
        assert_eq!(g.len(), 11);
        assert_eq!(g[10], 1.0);
    }
}
