//! Acceptance checks for the simulator, the limit solvers and the metrics.
//!
//! Prints one PASS/FAIL line per criterion and exits with status 1 if any
//! criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stemflow_core::config::ModelConfig;
use stemflow_core::empirical::{
    compartment_integral_bound, semimartingale_panel, sup_total_bound, telescoping_identity, AtomicMeasure,
    TestFunction,
};
use stemflow_core::flow::{stability_gap, FlowField, ZTrajectory};
use stemflow_core::limit::{
    characteristic_density, solve_mild, solve_upwind, InitialDensity, LimitConfig, MildOptions,
};
use stemflow_core::metrics::{bl_distance, bl_distance_lp, convergence_study, log_log_slope, snap_to_grid};
use stemflow_core::rates::{RateFn, RateModel};
use stemflow_core::ssa::{ensemble, map_replicates, simulate_replicate};

struct Outcome {
    pass: bool,
    detail: String,
}

fn sci(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Division, differentiation and death rates of the reference scenario.
const R: f64 = 0.015;
const M: f64 = 0.02;
const D: f64 = 0.005;

fn reference_model() -> RateModel {
    RateModel::constant(R, M, D).unwrap()
}

/// Smallest maturity below which 90% of the mass lies.
fn mass_front(xs: &[f64], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for (x, w) in xs.iter().zip(weights) {
        acc += w;
        if acc >= 0.9 * total {
            return *x;
        }
    }
    *xs.last().unwrap()
}

/// Front positions at the given sample indices, with the largest backward
/// step and the total advance.
fn front_track(xs: &[f64], profiles: &[Vec<f64>]) -> (Vec<f64>, f64, f64) {
    let fronts: Vec<f64> = profiles.iter().map(|p| mass_front(xs, p)).collect();
    let back = fronts.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max);
    let advance = fronts.last().unwrap() - fronts[0];
    (fronts, back, advance)
}

fn ensemble_front() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for n in [50usize, 200] {
        let start = Instant::now();
        let cfg = ModelConfig::stem_only(n, 1000.0, 50, reference_model(), 5.0, 11).unwrap();
        let stats = ensemble(&cfg, 50);
        let elapsed = start.elapsed().as_secs_f64();
        let xs: Vec<f64> = (2..n).map(|i| i as f64 / n as f64).collect();
        // The front crosses the maturity axis by t = 1 / m = 50.
        let early: Vec<Vec<f64>> =
            (1..=10).map(|k| stats.mean_counts[k][1..n - 1].to_vec()).collect();
        let (_, back, advance) = front_track(&xs, &early);
        let monotone = back <= 1.0 / n as f64 + 1e-12 && advance >= 0.5;
        // Late times: mean counts summed over t in [100, 300], by maturity quartile.
        let mut quartiles = [0.0; 4];
        for k in 20..=60 {
            for (j, c) in stats.mean_counts[k][1..n - 1].iter().enumerate() {
                quartiles[(4 * j / (n - 2)).min(3)] += c;
            }
        }
        let amplified = quartiles.windows(2).all(|w| w[1] > w[0]);
        let fast = n != 200 || elapsed < 120.0;
        pass &= monotone && amplified && fast;
        details.push(format!(
            "N={n}: front advance {advance:.2} (largest step back {back:.3}), quartile masses {:.1?}, {elapsed:.1}s",
            quartiles
        ));
    }
    outcome(pass, details.join("; "))
}

fn limit_front() -> Outcome {
    let start = Instant::now();
    let cfg = LimitConfig::stem_only(reference_model(), 1000.0, 1.0, 200, 5.0).unwrap();
    let grid = solve_upwind(&cfg).unwrap();
    let mild = solve_mild(&cfg).unwrap();
    let early: Vec<Vec<f64>> = (1..=10).map(|k| grid.u[k][1..].to_vec()).collect();
    let (_, back, advance) = front_track(&grid.x[1..], &early);
    let front = back <= grid.dx + 1e-12 && advance >= 0.5;
    let last = grid.times.len() - 1;
    let mature_wins = grid.z[last] > grid.a[last] && mild.z[last] > mild.a[last];
    let exact = |t: f64| (-(M - R) * t).exp();
    let rel = |a: &[f64], times: &[f64]| {
        a.iter().zip(times).map(|(v, &t)| (v - exact(t)).abs() / exact(t)).fold(0.0, f64::max)
    };
    let mild_err = rel(&mild.a, &mild.times);
    let upwind_err = rel(&grid.a, &grid.times);
    let elapsed = start.elapsed().as_secs_f64();
    let pass = front && mature_wins && mild_err <= 1e-6 && elapsed < 30.0;
    outcome(
        pass,
        format!(
            "front advance {advance:.2}; z(T)={:.4} > a(T)={:.4}; stem rel. error mild {mild_err:.2e}, upwind (explicit Euler, dt={}) {upwind_err:.2e}; {elapsed:.1}s",
            grid.z[last], grid.a[last], grid.dt
        ),
    )
}

fn convergence() -> Outcome {
    let start = Instant::now();
    let limit = LimitConfig::stem_only(reference_model(), 100.0, 1.0, 1600, 1.0).unwrap();
    let report = convergence_study(&limit, 2024, &[50, 100, 200, 400], 8000, 512).unwrap();
    let d: Vec<f64> = report.rows.iter().map(|r| r.distance).collect();
    let halved = d[3] <= 0.5 * d[0];
    let elapsed = start.elapsed().as_secs_f64();
    let pass = report.distance_decreasing
        && halved
        && report.stem_gap_decreasing
        && report.mature_gap_decreasing
        && elapsed < 900.0;
    let rows: Vec<String> = report
        .rows
        .iter()
        .map(|r| {
            format!(
                "N={} d={:.5}±{:.5} stem {:.5} mature {:.5}",
                r.n, r.distance, r.distance_se, r.stem_gap_max, r.mature_gap_max
            )
        })
        .collect();
    outcome(
        pass,
        format!(
            "{}; slope {:.2}; d decreasing {}, d(400)/d(50)={:.2}, stem decreasing {}, mature decreasing {}; {elapsed:.0}s",
            rows.join(", "),
            report.distance_slope,
            report.distance_decreasing,
            d[3] / d[0],
            report.stem_gap_decreasing,
            report.mature_gap_decreasing
        ),
    )
}

fn martingale_scaling() -> Outcome {
    let sizes = [25usize, 50, 100, 200];
    let f = TestFunction::identity();
    let mut variances = Vec::new();
    for &n in &sizes {
        let cfg = ModelConfig::stem_only(n, 100.0, n as u64, reference_model(), 100.0, 7).unwrap();
        let values: Vec<f64> = map_replicates(500, |k| {
            let traj = simulate_replicate(&cfg, k);
            let panel = semimartingale_panel(&traj, &f, D).unwrap();
            panel.rows.last().unwrap().residual.immature
        });
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
        variances.push(var);
    }
    let ns: Vec<f64> = sizes.iter().map(|&n| n as f64).collect();
    let slope = log_log_slope(&ns, &variances);
    outcome((slope + 1.0).abs() <= 0.2, format!("variances {}, slope {slope:.3}", sci(&variances)))
}

fn pathwise_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut tested = 0;
    for (n, reps) in [(10usize, 34usize), (50, 33), (200, 33)] {
        let cfg = ModelConfig::stem_only(n, 100.0, n as u64, reference_model(), 10.0, 5).unwrap();
        let errors: Vec<f64> = map_replicates(reps, |k| {
            let traj = simulate_replicate(&cfg, k);
            (0..traj.times.len())
                .map(|i| telescoping_identity(&traj.counts[0], &traj.counts[i], &traj.logs[i], D).relative_error())
                .fold(0.0, f64::max)
        });
        tested += errors.len();
        worst = errors.into_iter().fold(worst, f64::max);
    }
    outcome(worst <= 1e-9, format!("{tested} trajectories, largest relative error {worst:.2e}"))
}

fn moment_bounds() -> Outcome {
    let horizon = 100.0;
    let mut pass = true;
    let mut details = Vec::new();
    for n in [50usize, 200] {
        let model = reference_model();
        let cfg = ModelConfig::stem_only(n, horizon, n as u64, model.clone(), 1.0, 9).unwrap();
        let reps = 200;
        let stats = ensemble(&cfg, reps);
        let se = (stats.var_sup_total / reps as f64).sqrt();
        let y0 = 1.0;
        let bound = sup_total_bound(y0, model.bounds.r_hat, horizon);
        let sup_ok = stats.mean_sup_total <= bound + 3.0 * se;
        let integrals: Vec<Vec<f64>> =
            map_replicates(reps, |k| simulate_replicate(&cfg, k).final_log().occupancy_integral.clone());
        let largest = (1..n - 1)
            .map(|i| integrals.iter().map(|v| v[i]).sum::<f64>() / reps as f64)
            .fold(0.0, f64::max);
        let per_compartment = compartment_integral_bound(y0, 1.0, &model.bounds, horizon);
        let integral_ok = largest <= per_compartment;
        pass &= sup_ok && integral_ok;
        details.push(format!(
            "N={n}: E sup Y {:.3} (se {se:.3}) vs {bound:.3}; max_i int E X_i {largest:.2} (time average {:.3}) vs {per_compartment:.1}",
            stats.mean_sup_total,
            largest / horizon
        ));
    }
    outcome(pass, details.join("; "))
}

fn random_history(rng: &mut ChaCha8Rng, horizon: f64) -> ZTrajectory {
    let knots = rng.random_range(3..12);
    let mut times: Vec<f64> = (0..knots).map(|_| rng.random_range(0.0..horizon)).collect();
    times.push(0.0);
    times.push(horizon);
    times.sort_by(f64::total_cmp);
    times.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
    let values = times.iter().map(|_| rng.random_range(0.0..3.0)).collect();
    ZTrajectory::new(times, values).unwrap()
}

fn flow_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let horizon = 100.0;
    let (mut comp, mut kappa, mut h, mut worst_ratio, mut gronwall_ok) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, true);
    let mut failures = 0;
    for _ in 0..100 {
        let m = RateFn::Saturating {
            base: rng.random_range(0.01..0.1),
            gain: rng.random_range(0.0..2.0),
            floor: 0.005,
        };
        let model = RateModel::with_natural_bounds(RateFn::constant(R), m, D).unwrap();
        let rates = model.extend_clamped();
        let z1 = random_history(&mut rng, horizon);
        let z2 = random_history(&mut rng, horizon);
        let f = FlowField::new(&rates, &z1);
        let g = FlowField::new(&rates, &z2);
        let (t1, t2, t3) = (
            rng.random_range(0.0..horizon),
            rng.random_range(0.0..horizon),
            rng.random_range(0.0..horizon),
        );
        let x = rng.random_range(0.0..1.0);
        comp = comp.max((f.flow(t1, t3, x) - f.flow(t1, t2, f.flow(t2, t3, x))).abs());

        let t = rng.random_range(1.0..horizon);
        let s = rng.random_range(0.0..1.0) * t;
        let y = f.flow(t, s, x);
        kappa = kappa.max((f.inverse_time_kappa(t, y, x).unwrap() - s).abs());

        let y = f.flow(t, 0.0, x);
        h = h.max((f.inverse_space(t, y).unwrap() - x).abs());

        let gap = stability_gap(&f, &g, 0.0, t, x);
        if gap.gap > gap.bound {
            failures += 1;
        }
        gronwall_ok &= gap.gap <= gap.gronwall * (1.0 + 1e-9) + 1e-15;
        if gap.bound > 0.0 {
            worst_ratio = worst_ratio.max(gap.gap / gap.bound);
        }
    }
    let pass = comp <= 1e-8 && kappa <= 1e-8 && h <= 1e-8 && failures == 0 && gronwall_ok;
    outcome(
        pass,
        format!(
            "composition {comp:.1e}, kappa {kappa:.1e}, h {h:.1e}; stability bound violated {failures}/100 (largest gap/bound {worst_ratio:.3}), Gronwall form holds: {gronwall_ok}"
        ),
    )
}

/// Regulated rates with maturity-dependent division used for the solver
/// comparison; the initial density `a0 e^x` meets the boundary value.
fn comparison_model() -> RateModel {
    RateModel::with_natural_bounds(
        RateFn::Affine { c0: 0.015, cx: 0.01, cz: 0.0, z_cap: f64::INFINITY },
        RateFn::Saturating { base: 0.03, gain: 0.5, floor: 0.01 },
        D,
    )
    .unwrap()
}

fn solver_cross_validation() -> Outcome {
    let horizon = 60.0;
    let density = InitialDensity::Exponential { scale: 1.0, rate: 1.0 };
    let u0 = |x: f64| density.eval(x);
    let model = comparison_model();
    let mut reference_cfg = LimitConfig::new(
        model.clone(),
        horizon,
        1.0,
        0.0,
        density.clone(),
        3200,
        None,
        vec![0.0, horizon],
        MildOptions::default(),
    )
    .unwrap();
    reference_cfg.mild.dt = Some(5e-3);
    let reference = solve_mild(&reference_cfg).unwrap();
    let rates = model.extend_clamped();
    let mut gaps = Vec::new();
    for cells in [100usize, 200, 400] {
        let cfg = LimitConfig::new(
            model.clone(),
            horizon,
            1.0,
            0.0,
            density.clone(),
            cells,
            None,
            vec![0.0, horizon],
            MildOptions::default(),
        )
        .unwrap();
        let grid = solve_upwind(&cfg).unwrap();
        let exact = characteristic_density(&reference.history, &rates, &u0, horizon, &grid.x).unwrap();
        let last = grid.u.last().unwrap();
        let err: Vec<f64> = last.iter().zip(&exact).map(|(u, e)| (u - e).abs()).collect();
        // Trapezoid rule over the nodes.
        let l1 = grid.dx * (err.iter().sum::<f64>() - 0.5 * (err[0] + err[cells]));
        gaps.push(l1);
    }
    let ratios: Vec<f64> = gaps.windows(2).map(|w| w[0] / w[1]).collect();
    let order_ok = ratios.iter().all(|r| (1.6..=2.4).contains(r));

    // Translated bump: constant rates move the centroid at speed m.
    let bump = InitialDensity::Bump { center: 0.25, width: 0.05, height: 1.0 };
    let cells = 200;
    let mut cfg = LimitConfig::new(
        RateModel::constant(R, M, D).unwrap(),
        10.0,
        0.0,
        0.0,
        bump,
        cells,
        None,
        vec![0.0, 10.0],
        MildOptions::default(),
    )
    .unwrap();
    cfg.hold_stem = true;
    let grid = solve_upwind(&cfg).unwrap();
    let centroid = grid.pair(1, |x| x) / grid.pair(1, |_| 1.0);
    let mild = solve_mild(&cfg).unwrap();
    let mild_centroid = mild.measure(1).pair(|x| x) / mild.measure(1).mass();
    let target = 0.25 + M * 10.0;
    let bump_ok = (centroid - target).abs() <= grid.dx && (mild_centroid - target).abs() <= grid.dx;
    outcome(
        order_ok && bump_ok,
        format!(
            "L1 gaps {}, halving ratios {ratios:.2?}; bump centroid upwind {centroid:.4}, mild {mild_centroid:.4}, expected {target:.4} (cell {:.4})",
            sci(&gaps),
            grid.dx
        ),
    )
}

fn conservation() -> Outcome {
    let mut worst: f64 = 0.0;
    for (model, cells) in [(reference_model(), 200usize), (comparison_model(), 100)] {
        let cfg = LimitConfig::stem_only(model, 500.0, 1.0, cells, 5.0).unwrap();
        worst = worst.max(solve_upwind(&cfg).unwrap().ledger_max_residual);
    }
    let mut ledger_ok = true;
    let mut events = 0u64;
    for n in [10usize, 50, 200] {
        let cfg = ModelConfig::stem_only(n, 200.0, n as u64, comparison_model(), 10.0, 3).unwrap();
        let results: Vec<(bool, u64)> = map_replicates(20, |k| {
            let traj = simulate_replicate(&cfg, k);
            let start: i64 = traj.counts[0].iter().map(|&c| c as i64).sum();
            let ok = traj.counts.iter().zip(&traj.logs).all(|(c, log)| {
                c.iter().map(|&v| v as i64).sum::<i64>() - start == log.net_cells()
            });
            let log = traj.final_log();
            (ok, log.divisions.iter().sum::<u64>() + log.differentiations.iter().sum::<u64>() + log.deaths)
        });
        for (ok, e) in results {
            ledger_ok &= ok;
            events += e;
        }
    }
    outcome(
        worst <= 1e-12 && ledger_ok,
        format!("upwind ledger residual {worst:.2e} per step; SSA cell ledger exact: {ledger_ok} over {events} events"),
    )
}

fn bl_metric() -> Outcome {
    let delta = |x: f64, w: f64| AtomicMeasure::from_atoms(vec![(x, w)]);
    let nodes = 21;
    let pair = |a: &AtomicMeasure, b: &AtomicMeasure| {
        let (d, _) = bl_distance(a, b, nodes).unwrap();
        let wa = snap_to_grid(a, nodes).unwrap();
        let wb = snap_to_grid(b, nodes).unwrap();
        let w: Vec<f64> = wa.iter().zip(&wb).map(|(x, y)| x - y).collect();
        (d, bl_distance_lp(&w).unwrap())
    };
    let (d1, lp1) = pair(&delta(0.0, 1.0), &delta(0.5, 1.0));
    let (d2, lp2) = pair(&delta(0.3, 2.0), &delta(0.3, 1.0));
    let examples_ok =
        (d1 - 0.4).abs() <= 1e-10 && (d1 - lp1).abs() <= 1e-10 && (d2 - 1.0).abs() <= 1e-10 && (d2 - lp2).abs() <= 1e-10;

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let random_measure = |rng: &mut ChaCha8Rng| {
        let k = rng.random_range(1..6);
        AtomicMeasure::from_atoms((0..k).map(|_| (rng.random_range(0.0..=1.0), rng.random_range(0.0..2.0))).collect())
    };
    let grid = 65;
    let (mut symmetric, mut triangle, mut identity, mut worst_triangle) = (true, true, true, 0.0f64);
    for _ in 0..1000 {
        let a = random_measure(&mut rng);
        let b = random_measure(&mut rng);
        let c = random_measure(&mut rng);
        let d = |p: &AtomicMeasure, q: &AtomicMeasure| bl_distance(p, q, grid).unwrap().0;
        let (ab, ba, bc, ac) = (d(&a, &b), d(&b, &a), d(&b, &c), d(&a, &c));
        symmetric &= ab == ba && ab >= 0.0;
        worst_triangle = worst_triangle.max(ac - ab - bc);
        triangle &= ac <= ab + bc + 1e-12;
        identity &= d(&a, &a) == 0.0;
    }
    outcome(
        examples_ok && symmetric && triangle && identity,
        format!(
            "delta pair {d1:.12} (LP {lp1:.12}), mass gap {d2:.12} (LP {lp2:.12}); 1000 triples: symmetric {symmetric}, triangle {triangle} (worst excess {worst_triangle:.1e}), d(a,a)=0 {identity}"
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("1 ensemble front and amplification", ensemble_front),
        ("2 limit front, mature dominance, stem ODE", limit_front),
        ("3 convergence in N", convergence),
        ("4 martingale variance scaling", martingale_scaling),
        ("5 pathwise identity", pathwise_identity),
        ("6 moment bounds", moment_bounds),
        ("7 flow properties", flow_properties),
        ("8 solver cross-validation", solver_cross_validation),
        ("9 conservation ledgers", conservation),
        ("10 bounded-Lipschitz metric", bl_metric),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        let id = name.split(' ').next().unwrap();
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let start = Instant::now();
        let result = check();
        let status = if result.pass { "PASS" } else { "FAIL" };
        println!("{status} [{name}] {} ({:.1}s)", result.detail, start.elapsed().as_secs_f64());
        failed += (!result.pass) as usize;
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
