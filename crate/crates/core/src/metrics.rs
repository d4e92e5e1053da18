//! Bounded-Lipschitz distance between finite measures on `[0, 1]` and the
//! finite-`N` convergence study.
//!
//! The distance is `sup <nu1 - nu2, g>` over test functions with
//! `sup|g| + Lip(g) <= 1`. Measures are snapped onto a uniform grid by
//! linear mass splitting and the supremum is taken over grid functions
//! (piecewise linear between nodes), which gives a lower bound of the
//! continuous distance that is exact when both measures live on the grid.
//!
//! For a fixed sup budget `s` the grid problem is a chain: maximize
//! `sum w_j g_j` subject to `|g_j| <= s` and `|g_{j+1} - g_j| <= (1 - s) dx`,
//! solved exactly by dynamic programming over concave piecewise-linear value
//! functions. The optimum is concave in `s`, which a golden-section search
//! maximizes. [`bl_distance_lp`] solves the same problem as one dense linear
//! program and serves as an independent check.

use serde::Serialize;
use thiserror::Error;

use crate::config::ModelConfig;
use crate::empirical::{empirical_measure, AtomicMeasure};
use crate::limit::{solve_mild, LimitConfig, LimitError};
use crate::ssa::{map_replicates, replicate_rng, Simulator};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("atom at {0} lies outside [0, 1]")]
    OutsideSupport(f64),
    #[error("metric grid needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("linear program needs a non-negative right-hand side")]
    InfeasibleStart,
    #[error("study needs at least one size and one replicate")]
    EmptyStudy,
    #[error("invalid study: {0}")]
    BadStudy(String),
    #[error(transparent)]
    Limit(#[from] LimitError),
}

/// Atoms within this distance outside `[0, 1]` are moved onto the boundary.
const SUPPORT_SLACK: f64 = 1e-12;

/// Linear mass splitting of `measure` onto `nodes` uniform grid nodes:
/// each atom's mass goes to its two neighbouring nodes so that total mass
/// and first moment are preserved.
pub fn snap_to_grid(measure: &AtomicMeasure, nodes: usize) -> Result<Vec<f64>, MetricsError> {
    if nodes < 2 {
        return Err(MetricsError::TooFewNodes(nodes));
    }
    let cells = (nodes - 1) as f64;
    let mut w = vec![0.0; nodes];
    for &(x, mass) in &measure.atoms {
        if !(-SUPPORT_SLACK..=1.0 + SUPPORT_SLACK).contains(&x) {
            return Err(MetricsError::OutsideSupport(x));
        }
        let s = x.clamp(0.0, 1.0) * cells;
        let j = (s.floor() as usize).min(nodes - 2);
        let frac = s - j as f64;
        w[j] += mass * (1.0 - frac);
        w[j + 1] += mass * frac;
    }
    Ok(w)
}

/// Optimal grid test function.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlWitness {
    pub nodes: Vec<f64>,
    pub values: Vec<f64>,
    /// `max |g|` allowed at the optimum; the slope budget is `1 - sup_budget`.
    pub sup_budget: f64,
    /// `sum_j w_j g_j` for the returned values.
    pub value: f64,
}

impl BlWitness {
    /// The witness extended linearly between nodes.
    pub fn eval(&self, x: f64) -> f64 {
        let cells = (self.nodes.len() - 1) as f64;
        let s = x.clamp(0.0, 1.0) * cells;
        let j = (s.floor() as usize).min(self.nodes.len() - 2);
        let frac = s - j as f64;
        self.values[j] * (1.0 - frac) + self.values[j + 1] * frac
    }
}

/// Bounded-Lipschitz distance on a grid of `nodes` nodes.
pub fn bl_distance(
    nu1: &AtomicMeasure,
    nu2: &AtomicMeasure,
    nodes: usize,
) -> Result<(f64, BlWitness), MetricsError> {
    let a = snap_to_grid(nu1, nodes)?;
    let b = snap_to_grid(nu2, nodes)?;
    let w: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    Ok(bl_distance_weights(&w))
}

/// Distance for signed node weights `w` on a uniform grid over `[0, 1]`.
pub fn bl_distance_weights(w: &[f64]) -> (f64, BlWitness) {
    // The problem is invariant under w -> -w; solving it for one canonical
    // sign makes the distance exactly symmetric.
    if w.iter().find(|&&v| v != 0.0).is_some_and(|&v| v < 0.0) {
        let flipped: Vec<f64> = w.iter().map(|v| -v).collect();
        let (d, mut witness) = solve_weights(&flipped);
        for g in witness.values.iter_mut() {
            *g = -*g;
        }
        return (d, witness);
    }
    solve_weights(w)
}

fn solve_weights(w: &[f64]) -> (f64, BlWitness) {
    let k = w.len();
    assert!(k >= 2, "need at least 2 nodes");
    let dx = 1.0 / (k - 1) as f64;
    let nodes: Vec<f64> = (0..k).map(|j| j as f64 * dx).collect();
    let value_at = |s: f64| chain_optimum(w, s, (1.0 - s) * dx).0;

    // Golden-section search for the maximum of the concave function of s.
    let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (value_at(x1), value_at(x2));
    // Run down to floating-point resolution of s.
    for _ in 0..80 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = value_at(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = value_at(x1);
        }
    }
    // The endpoints are kinks often enough to be checked directly.
    let mut best = (0.5 * (lo + hi), f64::NEG_INFINITY);
    for s in [0.5 * (lo + hi), 0.0, 1.0] {
        let v = value_at(s);
        if v > best.1 {
            best = (s, v);
        }
    }
    let s = best.0;
    let (value, values) = chain_optimum(w, s, (1.0 - s) * dx);
    let achieved: f64 = values.iter().zip(w).map(|(g, w)| g * w).sum();
    (value.max(0.0), BlWitness { nodes, values, sup_budget: s, value: achieved })
}

/// Concave piecewise-linear function given by breakpoints sorted in `x`.
type Pwl = Vec<(f64, f64)>;

fn pwl_eval(f: &Pwl, x: f64) -> f64 {
    let hi = f.partition_point(|p| p.0 < x);
    if hi == 0 {
        return f[0].1;
    }
    if hi == f.len() {
        return f[f.len() - 1].1;
    }
    let (a, b) = (f[hi - 1], f[hi]);
    if b.0 == a.0 {
        return a.1.max(b.1);
    }
    a.1 + (x - a.0) / (b.0 - a.0) * (b.1 - a.1)
}

fn pwl_argmax(f: &Pwl) -> usize {
    let mut best = 0;
    for (i, p) in f.iter().enumerate() {
        if p.1 > f[best].1 {
            best = i;
        }
    }
    best
}

/// Exact maximum of `sum w_j g_j` over `|g_j| <= s`, `|g_{j+1} - g_j| <= c`,
/// with a maximizer.
fn chain_optimum(w: &[f64], s: f64, c: f64) -> (f64, Vec<f64>) {
    let k = w.len();
    if s <= 0.0 {
        return (0.0, vec![0.0; k]);
    }
    // f_j(v): best value of the first j + 1 terms with g_j = v.
    let mut f: Pwl = vec![(-s, -w[0] * s), (s, w[0] * s)];
    let mut peaks = Vec::with_capacity(k);
    let mut next: Pwl = Vec::with_capacity(16);
    for &wj in &w[1..] {
        let top = pwl_argmax(&f);
        peaks.push(f[top].0);
        // Window maximum over [v - c, v + c]: the rising part moves left by
        // c, the falling part right by c, with a plateau in between.
        next.clear();
        next.extend(f[..top].iter().map(|&(x, y)| (x - c, y)));
        next.push((f[top].0 - c, f[top].1));
        next.push((f[top].0 + c, f[top].1));
        next.extend(f[top + 1..].iter().map(|&(x, y)| (x + c, y)));
        let left = pwl_eval(&next, -s);
        let right = pwl_eval(&next, s);
        f.clear();
        f.push((-s, left));
        for &(x, y) in next.iter().filter(|p| p.0 > -s && p.0 < s) {
            if x - f.last().unwrap().0 > 1e-15 {
                f.push((x, y));
            }
        }
        if s - f.last().unwrap().0 <= 1e-15 {
            f.pop();
        }
        f.push((s, right));
        for p in f.iter_mut() {
            p.1 += wj * p.0;
        }
    }
    let top = pwl_argmax(&f);
    let value = f[top].1;
    let mut g = vec![0.0; k];
    g[k - 1] = f[top].0;
    for j in (0..k - 1).rev() {
        g[j] = peaks[j].clamp(g[j + 1] - c, g[j + 1] + c).clamp(-s, s);
    }
    (value, g)
}

/// Dense-tableau simplex for `max c.y` subject to `A y <= b`, `y >= 0`,
/// `b >= 0`, with Bland's anti-cycling rule. Returns the optimum and an
/// optimal `y`.
pub fn simplex_max(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> Result<(f64, Vec<f64>), MetricsError> {
    let n = c.len();
    let m = b.len();
    if b.iter().any(|&v| v < 0.0) {
        return Err(MetricsError::InfeasibleStart);
    }
    let width = n + m + 1;
    // Rows 0..m are constraints with slack columns; row m holds the
    // reduced costs of the maximization.
    let mut t = vec![vec![0.0; width]; m + 1];
    for i in 0..m {
        t[i][..n].copy_from_slice(&a[i]);
        t[i][n + i] = 1.0;
        t[i][width - 1] = b[i];
    }
    for j in 0..n {
        t[m][j] = -c[j];
    }
    let mut basis: Vec<usize> = (n..n + m).collect();
    let eps = 1e-12;
    while let Some(enter) = (0..n + m).find(|&j| t[m][j] < -eps) {
        let mut leave: Option<usize> = None;
        let mut best_ratio = f64::INFINITY;
        for i in 0..m {
            if t[i][enter] > eps {
                let ratio = t[i][width - 1] / t[i][enter];
                let better = ratio < best_ratio - 1e-15
                    || (ratio <= best_ratio + 1e-15 && leave.is_some_and(|l| basis[i] < basis[l]));
                if leave.is_none() || better {
                    best_ratio = ratio;
                    leave = Some(i);
                }
            }
        }
        let Some(row) = leave else {
            return Err(MetricsError::Unbounded);
        };
        let pivot = t[row][enter];
        for v in t[row].iter_mut() {
            *v /= pivot;
        }
        let pivot_row = t[row].clone();
        for (i, r) in t.iter_mut().enumerate() {
            if i != row && r[enter] != 0.0 {
                let factor = r[enter];
                for (v, p) in r.iter_mut().zip(&pivot_row) {
                    *v -= factor * p;
                }
            }
        }
        basis[row] = enter;
    }
    let mut y = vec![0.0; n];
    for (i, &bv) in basis.iter().enumerate() {
        if bv < n {
            y[bv] = t[i][width - 1];
        }
    }
    Ok((t[m][width - 1], y))
}

/// The grid distance as one linear program over `(g, s)`, with `g` split
/// into positive and negative parts. Meant for small grids.
pub fn bl_distance_lp(w: &[f64]) -> Result<f64, MetricsError> {
    let k = w.len();
    if k < 2 {
        return Err(MetricsError::TooFewNodes(k));
    }
    let dx = 1.0 / (k - 1) as f64;
    let n = 2 * k + 1;
    let s = 2 * k;
    let mut c = vec![0.0; n];
    for j in 0..k {
        c[j] = w[j];
        c[k + j] = -w[j];
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut row = |coeffs: &[(usize, f64)], rhs: f64| {
        let mut r = vec![0.0; n];
        for &(i, v) in coeffs {
            r[i] += v;
        }
        a.push(r);
        b.push(rhs);
    };
    for j in 0..k {
        row(&[(j, 1.0), (k + j, -1.0), (s, -1.0)], 0.0);
        row(&[(j, -1.0), (k + j, 1.0), (s, -1.0)], 0.0);
    }
    for j in 0..k - 1 {
        row(&[(j + 1, 1.0), (k + j + 1, -1.0), (j, -1.0), (k + j, 1.0), (s, dx)], dx);
        row(&[(j + 1, -1.0), (k + j + 1, 1.0), (j, 1.0), (k + j, -1.0), (s, dx)], dx);
    }
    row(&[(s, 1.0)], 1.0);
    Ok(simplex_max(&c, &a, &b)?.0)
}

/// Per-size results of [`convergence_study`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub replicates: usize,
    /// Distance at the horizon between the mean empirical immature measure
    /// and the limit immature measure.
    pub distance: f64,
    /// Standard error of the witness pairing across replicates.
    pub distance_se: f64,
    /// `|mean X_1 / N - a|` at the horizon and its maximum over output times.
    pub stem_gap: f64,
    pub stem_gap_max: f64,
    pub stem_se: f64,
    /// `|mean X_N / N - z|` at the horizon and its maximum over output times.
    pub mature_gap: f64,
    pub mature_gap_max: f64,
    pub mature_se: f64,
    pub absorbed: usize,
    #[serde(skip)]
    pub witness: BlWitness,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    /// Least-squares slope of `ln distance` against `ln N`.
    pub distance_slope: f64,
    pub distance_decreasing: bool,
    pub stem_gap_decreasing: bool,
    pub mature_gap_decreasing: bool,
}

fn strictly_decreasing(v: impl Iterator<Item = f64>) -> bool {
    let v: Vec<f64> = v.collect();
    v.windows(2).all(|w| w[1] < w[0])
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Initial counts at size `n` matching the limit's initial data: stem
/// `round(a0 n)`, immature `round(u0(i / n))` (so that the atom weight
/// `X_i / n` approximates `u0 dx`) and mature `round(z0 n)`.
pub fn scaled_initial_counts(limit: &LimitConfig, n: usize) -> Vec<u64> {
    let nf = n as f64;
    let mut counts = vec![0u64; n];
    counts[0] = (limit.a0 * nf).round() as u64;
    for (i, c) in counts.iter_mut().enumerate().take(n - 1).skip(1) {
        *c = limit.initial_density.eval((i + 1) as f64 / nf).round() as u64;
    }
    counts[n - 1] = (limit.z0 * nf).round() as u64;
    counts
}

/// Per-replicate observations kept by the study.
struct ReplicateSample {
    x1: Vec<f64>,
    xn: Vec<f64>,
    final_counts: Vec<u64>,
}

/// Runs `replicates` stochastic replicates for each size in `sizes`, using
/// the limit configuration's rates, horizon, output times and initial data,
/// and compares them with the mild limit solution.
pub fn convergence_study(
    limit: &LimitConfig,
    seed: u64,
    sizes: &[usize],
    replicates: usize,
    bl_nodes: usize,
) -> Result<ConvergenceReport, MetricsError> {
    if sizes.is_empty() || replicates == 0 {
        return Err(MetricsError::EmptyStudy);
    }
    let reference = solve_mild(limit)?;
    let last = reference.times.len() - 1;
    let limit_measure = reference.measure(last);
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let config = ModelConfig::new(
            n,
            limit.horizon,
            scaled_initial_counts(limit, n),
            limit.model.clone(),
            limit.output_times.clone(),
            seed,
        )
        .map_err(|e| MetricsError::BadStudy(e.to_string()))?;
        let nf = n as f64;
        let samples: Vec<(ReplicateSample, bool)> = map_replicates(replicates, |k| {
            let mut rng = replicate_rng(config.seed, k);
            let mut sim = Simulator::new(&config.model, &config.initial);
            let mut x1 = Vec::with_capacity(config.output_times.len());
            let mut xn = Vec::with_capacity(config.output_times.len());
            for &t in &config.output_times {
                sim.advance_to(t, &mut rng);
                x1.push(sim.counts()[0] as f64 / nf);
                xn.push(sim.counts()[n - 1] as f64 / nf);
            }
            let absorbed = sim.absorbed_at().is_some();
            (ReplicateSample { x1, xn, final_counts: sim.counts().to_vec() }, absorbed)
        });
        let rf = replicates as f64;
        let mut mean_counts = vec![0.0; n];
        for (s, _) in &samples {
            for (m, &c) in mean_counts.iter_mut().zip(&s.final_counts) {
                *m += c as f64 / rf;
            }
        }
        let mean_measure = AtomicMeasure::from_atoms(
            (1..n - 1).map(|j| ((j + 1) as f64 / nf, mean_counts[j] / nf)).collect(),
        );
        let (distance, witness) = bl_distance(&mean_measure, &limit_measure, bl_nodes)?;
        let pairings: Vec<f64> =
            samples.iter().map(|(s, _)| empirical_measure(&s.final_counts).pair(|x| witness.eval(x))).collect();
        let distance_se = standard_error(&pairings);

        let column = |pick: &dyn Fn(&ReplicateSample) -> &Vec<f64>, k: usize| -> Vec<f64> {
            samples.iter().map(|(s, _)| pick(s)[k]).collect()
        };
        let gaps = |pick: &dyn Fn(&ReplicateSample) -> &Vec<f64>, target: &[f64]| {
            let per_time: Vec<f64> = (0..target.len())
                .map(|k| (column(pick, k).iter().sum::<f64>() / rf - target[k]).abs())
                .collect();
            let max = per_time.iter().copied().fold(0.0, f64::max);
            (per_time[target.len() - 1], max, standard_error(&column(pick, target.len() - 1)))
        };
        let (stem_gap, stem_gap_max, stem_se) = gaps(&|s| &s.x1, &reference.a);
        let (mature_gap, mature_gap_max, mature_se) = gaps(&|s| &s.xn, &reference.z);
        rows.push(ConvergenceRow {
            n,
            replicates,
            distance,
            distance_se,
            stem_gap,
            stem_gap_max,
            stem_se,
            mature_gap,
            mature_gap_max,
            mature_se,
            absorbed: samples.iter().filter(|s| s.1).count(),
            witness,
        });
    }
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let ds: Vec<f64> = rows.iter().map(|r| r.distance).collect();
    let distance_slope = if rows.len() >= 2 && ds.iter().all(|&d| d > 0.0) { log_log_slope(&ns, &ds) } else { f64::NAN };
    Ok(ConvergenceReport {
        distance_decreasing: strictly_decreasing(ds.iter().copied()),
        stem_gap_decreasing: strictly_decreasing(rows.iter().map(|r| r.stem_gap_max)),
        mature_gap_decreasing: strictly_decreasing(rows.iter().map(|r| r.mature_gap_max)),
        distance_slope,
        rows,
    })
}

fn standard_error(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}
