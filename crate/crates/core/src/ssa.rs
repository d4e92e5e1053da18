//! Exact stochastic simulation of the compartment jump process.
//!
//! Compartments are stored 0-based: index `k` holds the raw count of type
//! `k + 1`. Type 1 is the stem compartment and type `N` the mature one.
//! Per-cell event rates at `z = X_N / N`:
//!
//! * division of type `i < N`: `r(i/N, z)`
//! * differentiation `1 -> 2`: `m(1/N, z)`
//! * differentiation `i -> i+1`, `2 <= i <= N-1`: `N m(i/N, z)`
//! * death of type `N`: `d`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::rates::RateModel;

/// Compensated (Neumaier) running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Binary indexed tree over per-compartment propensities.
#[derive(Debug, Clone)]
struct Fenwick {
    tree: Vec<f64>,
    values: Vec<f64>,
    updates: usize,
}

const FENWICK_REBUILD_EVERY: usize = 1 << 16;

impl Fenwick {
    fn new(n: usize) -> Self {
        Self { tree: vec![0.0; n], values: vec![0.0; n], updates: 0 }
    }

    fn rebuild(&mut self) {
        let n = self.values.len();
        self.tree.copy_from_slice(&self.values);
        for i in 0..n {
            let parent = i | (i + 1);
            if parent < n {
                self.tree[parent] += self.tree[i];
            }
        }
        self.updates = 0;
    }

    fn set(&mut self, idx: usize, v: f64) {
        let delta = v - self.values[idx];
        self.values[idx] = v;
        self.updates += 1;
        if self.updates >= FENWICK_REBUILD_EVERY {
            self.rebuild();
            return;
        }
        let mut i = idx;
        while i < self.tree.len() {
            self.tree[i] += delta;
            i |= i + 1;
        }
    }

    fn total(&self) -> f64 {
        let mut s = 0.0;
        let mut i = self.tree.len();
        while i > 0 {
            s += self.tree[i - 1];
            i &= i - 1;
        }
        s
    }

    /// Index `k` with `prefix(k) <= u < prefix(k + 1)` and the remainder
    /// `u - prefix(k)`.
    fn find(&self, u: f64) -> (usize, f64) {
        let n = self.tree.len();
        let mut pos = 0usize;
        let mut rem = u;
        let mut step = n.next_power_of_two();
        while step > 0 {
            let next = pos + step;
            if next <= n && self.tree[next - 1] <= rem {
                pos = next;
                rem -= self.tree[next - 1];
            }
            step >>= 1;
        }
        if pos < n && self.values[pos] > 0.0 {
            return (pos, rem.max(0.0));
        }
        // Rounding pushed the search onto an empty slot; fall back to a scan.
        let total: f64 = self.values.iter().sum();
        let mut acc = 0.0;
        let target = u.min(total);
        let mut last = 0;
        for (k, &v) in self.values.iter().enumerate() {
            if v > 0.0 {
                last = k;
                if target < acc + v {
                    return (k, target - acc);
                }
            }
            acc += v;
        }
        (last, 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum EventKind {
    /// Division in compartment index `k` (type `k + 1`).
    Division(usize),
    /// Differentiation from index `k` to `k + 1`.
    Differentiation(usize),
    Death,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
}

/// Event counters and exact time integrals along one trajectory.
///
/// All vectors have length `N` and are indexed like the counts. Integrals
/// use the per-cell rates without the factor `N` of the fast
/// differentiation channel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventLog {
    pub divisions: Vec<u64>,
    pub differentiations: Vec<u64>,
    pub deaths: u64,
    /// `int r(i/N, z) X_i ds` for types `1..N-1`; last entry is 0.
    pub division_integral: Vec<f64>,
    /// `int m(i/N, z) X_i ds` for types `1..N-1`; last entry is 0.
    pub differentiation_integral: Vec<f64>,
    /// `int X_i ds` for all types, raw counts.
    pub occupancy_integral: Vec<f64>,
}

impl EventLog {
    pub fn n(&self) -> usize {
        self.divisions.len()
    }

    /// Cells created minus cells destroyed.
    pub fn net_cells(&self) -> i64 {
        self.divisions.iter().sum::<u64>() as i64 - self.deaths as i64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompartmentState {
    pub t: f64,
    pub counts: Vec<u64>,
}

impl CompartmentState {
    pub fn n(&self) -> usize {
        self.counts.len()
    }

    pub fn z(&self) -> f64 {
        self.counts[self.n() - 1] as f64 / self.n() as f64
    }
}

/// Total jump rate of `counts` under `model`, evaluated term by term.
pub fn total_rate(counts: &[u64], model: &RateModel) -> f64 {
    let n = counts.len();
    let nf = n as f64;
    let z = counts[n - 1] as f64 / nf;
    let mut total = model.m(1.0 / nf, z) * counts[0] as f64;
    for (k, &c) in counts[..n - 1].iter().enumerate() {
        let x = (k + 1) as f64 / nf;
        total += model.r(x, z) * c as f64;
        if k >= 1 {
            total += nf * model.m(x, z) * c as f64;
        }
    }
    total + model.death * counts[n - 1] as f64
}

/// Seeded generator for replicate `k`: independent streams of one key.
pub fn replicate_rng(seed: u64, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    rng
}

/// Sequential exact simulator with lazily flushed integral accumulators.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    model: &'a RateModel,
    n: usize,
    t: f64,
    counts: Vec<u64>,
    immature_cells: u64,
    r_rate: Vec<f64>,
    m_rate: Vec<f64>,
    fenwick: Fenwick,
    last_flush: Vec<f64>,
    acc_r: Vec<CompensatedSum>,
    acc_m: Vec<CompensatedSum>,
    acc_occ: Vec<CompensatedSum>,
    divisions: Vec<u64>,
    differentiations: Vec<u64>,
    deaths: u64,
    absorbed_at: Option<f64>,
}

impl<'a> Simulator<'a> {
    pub fn new(model: &'a RateModel, initial: &[u64]) -> Self {
        let n = initial.len();
        assert!(n >= 3, "need at least 3 compartments");
        let mut sim = Self {
            model,
            n,
            t: 0.0,
            counts: initial.to_vec(),
            immature_cells: initial[..n - 1].iter().sum(),
            r_rate: vec![0.0; n],
            m_rate: vec![0.0; n],
            fenwick: Fenwick::new(n),
            last_flush: vec![0.0; n],
            acc_r: vec![CompensatedSum::default(); n],
            acc_m: vec![CompensatedSum::default(); n],
            acc_occ: vec![CompensatedSum::default(); n],
            divisions: vec![0; n],
            differentiations: vec![0; n],
            deaths: 0,
            absorbed_at: None,
        };
        sim.refresh_rates();
        sim.check_absorbed();
        sim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn state(&self) -> CompartmentState {
        CompartmentState { t: self.t, counts: self.counts.clone() }
    }

    pub fn absorbed_at(&self) -> Option<f64> {
        self.absorbed_at
    }

    pub fn total_rate(&self) -> f64 {
        if self.is_absorbed() {
            0.0
        } else {
            self.fenwick.total().max(0.0)
        }
    }

    fn is_absorbed(&self) -> bool {
        self.immature_cells == 0 && (self.counts[self.n - 1] == 0 || self.model.death == 0.0)
    }

    fn check_absorbed(&mut self) {
        if self.absorbed_at.is_none() && self.is_absorbed() {
            self.absorbed_at = Some(self.t);
        }
    }

    #[inline]
    fn channel_speed(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.n as f64
        }
    }

    #[inline]
    fn propensity(&self, k: usize) -> f64 {
        let c = self.counts[k] as f64;
        if k == self.n - 1 {
            self.model.death * c
        } else {
            c * (self.r_rate[k] + self.channel_speed(k) * self.m_rate[k])
        }
    }

    fn refresh_rates(&mut self) {
        let nf = self.n as f64;
        let z = self.counts[self.n - 1] as f64 / nf;
        for k in 0..self.n - 1 {
            let x = (k + 1) as f64 / nf;
            self.r_rate[k] = self.model.r(x, z);
            self.m_rate[k] = self.model.m(x, z);
        }
        for k in 0..self.n {
            self.fenwick.values[k] = self.propensity(k);
        }
        self.fenwick.rebuild();
    }

    #[inline]
    fn flush(&mut self, k: usize) {
        let dt = self.t - self.last_flush[k];
        if dt > 0.0 {
            let c = self.counts[k] as f64;
            if c > 0.0 {
                let occ = c * dt;
                self.acc_occ[k].add(occ);
                if k < self.n - 1 {
                    self.acc_r[k].add(self.r_rate[k] * occ);
                    self.acc_m[k].add(self.m_rate[k] * occ);
                }
            }
        }
        self.last_flush[k] = self.t;
    }

    fn flush_all(&mut self) {
        for k in 0..self.n {
            self.flush(k);
        }
    }

    /// Draws the waiting time and the next event without applying it.
    /// Returns `None` when no event is possible.
    pub fn choose_event<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<(f64, EventKind)> {
        if self.is_absorbed() {
            return None;
        }
        let total = self.fenwick.total();
        if !(total > 0.0) {
            return None;
        }
        let e: f64 = Exp1.sample(rng);
        let wait = e / total;
        let u = rng.random::<f64>() * total;
        let (k, rem) = self.fenwick.find(u);
        let kind = if k == self.n - 1 {
            EventKind::Death
        } else if rem < self.counts[k] as f64 * self.r_rate[k] {
            EventKind::Division(k)
        } else {
            EventKind::Differentiation(k)
        };
        Some((wait, kind))
    }

    /// Applies `kind` at the current time.
    pub fn apply(&mut self, kind: EventKind) {
        let last = self.n - 1;
        match kind {
            EventKind::Division(k) => {
                self.flush(k);
                self.counts[k] += 1;
                self.immature_cells += 1;
                self.divisions[k] += 1;
                self.fenwick.set(k, self.propensity(k));
            }
            EventKind::Differentiation(k) => {
                debug_assert!(self.counts[k] > 0);
                self.differentiations[k] += 1;
                if k + 1 == last {
                    self.flush_all();
                    self.counts[k] -= 1;
                    self.counts[last] += 1;
                    self.immature_cells -= 1;
                    self.refresh_rates();
                } else {
                    self.flush(k);
                    self.flush(k + 1);
                    self.counts[k] -= 1;
                    self.counts[k + 1] += 1;
                    self.fenwick.set(k, self.propensity(k));
                    self.fenwick.set(k + 1, self.propensity(k + 1));
                }
            }
            EventKind::Death => {
                debug_assert!(self.counts[last] > 0);
                self.flush_all();
                self.counts[last] -= 1;
                self.deaths += 1;
                self.refresh_rates();
            }
        }
        self.check_absorbed();
    }

    /// Performs one event. Returns `None` on absorption (state unchanged).
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Option<Event> {
        let (wait, kind) = self.choose_event(rng)?;
        self.t += wait;
        self.apply(kind);
        Some(Event { time: self.t, kind })
    }

    /// Runs the chain up to `target`, leaving the state at time `target`.
    ///
    /// The pending event beyond `target` is discarded; by memorylessness
    /// the next call redraws it without changing the law.
    pub fn advance_to<R: Rng + ?Sized>(&mut self, target: f64, rng: &mut R) {
        while self.t < target {
            match self.choose_event(rng) {
                Some((wait, kind)) if self.t + wait <= target => {
                    self.t += wait;
                    self.apply(kind);
                }
                _ => self.t = target,
            }
        }
    }

    /// Approximate leap of length `tau` with frozen propensities.
    ///
    /// Channel counts are Poisson; removals are capped by the available
    /// cells. Integrals use the left-point rule. Not used by any identity
    /// check.
    pub fn tau_leap<R: Rng + ?Sized>(&mut self, tau: f64, rng: &mut R) {
        let n = self.n;
        let last = n - 1;
        let poisson = |rate: f64, rng: &mut R| -> u64 {
            if rate > 0.0 {
                Poisson::new(rate).map(|p| p.sample(rng) as u64).unwrap_or(0)
            } else {
                0
            }
        };
        let start = self.counts.clone();
        let mut delta = vec![0i64; n];
        for k in 0..last {
            let c = start[k] as f64;
            let div = poisson(c * self.r_rate[k] * tau, rng);
            let diff = poisson(c * self.channel_speed(k) * self.m_rate[k] * tau, rng).min(start[k]);
            self.divisions[k] += div;
            self.differentiations[k] += diff;
            delta[k] += div as i64 - diff as i64;
            delta[k + 1] += diff as i64;
        }
        let deaths = poisson(self.model.death * start[last] as f64 * tau, rng).min(start[last]);
        self.deaths += deaths;
        delta[last] -= deaths as i64;
        self.t += tau;
        self.flush_all();
        for k in 0..n {
            self.counts[k] = (start[k] as i64 + delta[k]).max(0) as u64;
        }
        self.immature_cells = self.counts[..last].iter().sum();
        self.refresh_rates();
        self.check_absorbed();
    }

    /// Snapshot of counters and integrals at the current time.
    pub fn log(&mut self) -> EventLog {
        self.flush_all();
        EventLog {
            divisions: self.divisions.clone(),
            differentiations: self.differentiations.clone(),
            deaths: self.deaths,
            division_integral: self.acc_r.iter().map(CompensatedSum::value).collect(),
            differentiation_integral: self.acc_m.iter().map(CompensatedSum::value).collect(),
            occupancy_integral: self.acc_occ.iter().map(CompensatedSum::value).collect(),
        }
    }
}

/// Sampled path of one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// Raw counts at each sample time.
    pub counts: Vec<Vec<u64>>,
    /// Event log at each sample time.
    pub logs: Vec<EventLog>,
    pub absorbed_at: Option<f64>,
}

impl Trajectory {
    pub fn n(&self) -> usize {
        self.counts[0].len()
    }

    pub fn x1_scaled(&self, k: usize) -> f64 {
        self.counts[k][0] as f64 / self.n() as f64
    }

    pub fn xn_scaled(&self, k: usize) -> f64 {
        let n = self.n();
        self.counts[k][n - 1] as f64 / n as f64
    }

    /// `<mu, 1>`: scaled number of cells of types `2..N-1`.
    pub fn immature_mass(&self, k: usize) -> f64 {
        let n = self.n();
        self.counts[k][1..n - 1].iter().sum::<u64>() as f64 / n as f64
    }

    pub fn final_log(&self) -> &EventLog {
        self.logs.last().expect("trajectory has at least one sample")
    }
}

/// Simulates replicate `replicate` of `config` on its output grid.
pub fn simulate_replicate(config: &ModelConfig, replicate: u64) -> Trajectory {
    let mut rng = replicate_rng(config.seed, replicate);
    let mut sim = Simulator::new(&config.model, &config.initial);
    let mut out = Trajectory {
        times: config.output_times.clone(),
        counts: Vec::with_capacity(config.output_times.len()),
        logs: Vec::with_capacity(config.output_times.len()),
        absorbed_at: None,
    };
    for &t in &config.output_times {
        sim.advance_to(t, &mut rng);
        out.counts.push(sim.counts().to_vec());
        out.logs.push(sim.log());
    }
    out.absorbed_at = sim.absorbed_at();
    out
}

/// Replicate 0 of `config`.
pub fn simulate(config: &ModelConfig) -> Trajectory {
    simulate_replicate(config, 0)
}

/// Runs `f` on replicates `0..replicates` in parallel; results are returned
/// in replicate order.
pub fn map_replicates<T, F>(replicates: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    (0..replicates as u64).into_par_iter().map(f).collect()
}

/// Per-time ensemble statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleStats {
    pub times: Vec<f64>,
    pub replicates: usize,
    /// `mean_counts[t][k]`: mean raw count of compartment `k`.
    pub mean_counts: Vec<Vec<f64>>,
    pub var_counts: Vec<Vec<f64>>,
    pub mean_x1: Vec<f64>,
    pub var_x1: Vec<f64>,
    pub mean_xn: Vec<f64>,
    pub var_xn: Vec<f64>,
    pub mean_mass: Vec<f64>,
    pub var_mass: Vec<f64>,
    /// Mean over replicates of `sup_t (X_1 + <mu, 1> + X_N)` scaled.
    pub mean_sup_total: f64,
    pub var_sup_total: f64,
    pub absorbed: usize,
}

impl EnsembleStats {
    pub fn n(&self) -> usize {
        self.mean_counts[0].len()
    }

    /// Ensemble-averaged empirical measure at sample `k`: atoms `(i/N, E X_i / N)`.
    pub fn mean_measure(&self, k: usize) -> crate::empirical::AtomicMeasure {
        let n = self.n();
        let nf = n as f64;
        crate::empirical::AtomicMeasure::from_atoms(
            (1..n - 1).map(|j| ((j + 1) as f64 / nf, self.mean_counts[k][j] / nf)).collect(),
        )
    }
}

/// Welford accumulator fed in replicate order.
#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn variance(&self) -> f64 {
        if self.n > 1.0 {
            self.m2 / (self.n - 1.0)
        } else {
            0.0
        }
    }
}

/// Replicates simulated per parallel batch before the ordered reduction.
const ENSEMBLE_BATCH: usize = 64;

/// Ensemble statistics over `replicates` replicates. Replicates run in
/// parallel; reduction is sequential in replicate order, so results do not
/// depend on the number of worker threads.
pub fn ensemble(config: &ModelConfig, replicates: usize) -> EnsembleStats {
    assert!(replicates >= 1, "need at least one replicate");
    let n = config.n;
    let nt = config.output_times.len();
    let mut counts = vec![vec![Welford::default(); n]; nt];
    let mut x1 = vec![Welford::default(); nt];
    let mut xn = vec![Welford::default(); nt];
    let mut mass = vec![Welford::default(); nt];
    let mut sup_total = Welford::default();
    let mut absorbed = 0;
    let mut start = 0;
    while start < replicates {
        let end = (start + ENSEMBLE_BATCH).min(replicates);
        let batch: Vec<(Vec<Vec<u64>>, bool)> = (start as u64..end as u64)
            .into_par_iter()
            .map(|k| {
                let mut rng = replicate_rng(config.seed, k);
                let mut sim = Simulator::new(&config.model, &config.initial);
                let mut rows = Vec::with_capacity(nt);
                for &t in &config.output_times {
                    sim.advance_to(t, &mut rng);
                    rows.push(sim.counts().to_vec());
                }
                (rows, sim.absorbed_at().is_some())
            })
            .collect();
        for (rows, was_absorbed) in batch {
            absorbed += was_absorbed as usize;
            let mut sup: f64 = 0.0;
            for (ti, row) in rows.iter().enumerate() {
                for (k, &c) in row.iter().enumerate() {
                    counts[ti][k].push(c as f64);
                }
                let nf = n as f64;
                let a = row[0] as f64 / nf;
                let b = row[n - 1] as f64 / nf;
                let m = row[1..n - 1].iter().sum::<u64>() as f64 / nf;
                x1[ti].push(a);
                xn[ti].push(b);
                mass[ti].push(m);
                sup = sup.max(a + b + m);
            }
            sup_total.push(sup);
        }
        start = end;
    }
    let means = |w: &[Welford]| w.iter().map(|w| w.mean).collect::<Vec<_>>();
    let vars = |w: &[Welford]| w.iter().map(Welford::variance).collect::<Vec<_>>();
    EnsembleStats {
        times: config.output_times.clone(),
        replicates,
        mean_counts: counts.iter().map(|row| means(row)).collect(),
        var_counts: counts.iter().map(|row| vars(row)).collect(),
        mean_x1: means(&x1),
        var_x1: vars(&x1),
        mean_xn: means(&xn),
        var_xn: vars(&xn),
        mean_mass: means(&mass),
        var_mass: vars(&mass),
        mean_sup_total: sup_total.mean,
        var_sup_total: sup_total.variance(),
        absorbed,
    }
}
