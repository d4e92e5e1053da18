//! Subcommand implementations. Each command writes its files into the
//! output directory and the manifest last.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use stemflow_core::config::ConfigFile;
use stemflow_core::empirical::{semimartingale_panel, telescoping_identity, TestFunction};
use stemflow_core::flow::{stability_gap, FlowField, ZTrajectory};
use stemflow_core::limit::{limit_mass_balance, solve_mild, solve_upwind, LimitError};
use stemflow_core::metrics::{convergence_study, MetricsError};
use stemflow_core::ssa::{ensemble, map_replicates, simulate_replicate};

use crate::output::{num, OutputDir};
use crate::{Cli, CliError, Command, Solver};

/// Tolerance of the exact flow identities in `flow-test`.
const FLOW_TOL: f64 = 1e-8;

fn config_error(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn limit_error(e: LimitError) -> CliError {
    match e {
        LimitError::Config(_) => CliError::Config(e.to_string()),
        other => CliError::Numerical(other.to_string()),
    }
}

fn metrics_error(e: MetricsError) -> CliError {
    match e {
        MetricsError::Limit(l) => limit_error(l),
        MetricsError::EmptyStudy | MetricsError::BadStudy(_) => CliError::Config(e.to_string()),
        other => CliError::Numerical(other.to_string()),
    }
}

/// Reads and validates a config file, applying the seed override.
fn load(path: &Path, seed: Option<u64>) -> Result<ConfigFile, CliError> {
    let text = fs::read_to_string(path)?;
    let mut file = ConfigFile::parse(&text).map_err(config_error)?;
    if let Some(seed) = seed {
        file.seed = seed;
    }
    Ok(file)
}

fn open(out: &Path, command: &str, file: &ConfigFile) -> Result<OutputDir, CliError> {
    let config = serde_json::to_value(file).expect("config serializes");
    OutputDir::create(out, command, file.seed, config)
}

/// Runs the selected command; returns the manifest path if one was written.
pub fn run(cli: &Cli) -> Result<Option<PathBuf>, CliError> {
    match &cli.command {
        Command::Simulate { config, replicates, out } => simulate(&load(config, cli.seed)?, *replicates, out),
        Command::Diagnose { config, testfn, replicate, out } => {
            diagnose(&load(config, cli.seed)?, testfn, *replicate, out)
        }
        Command::Limit { config, solver, out } => limit(&load(config, cli.seed)?, *solver, out),
        Command::Compare { config, n_list, replicates, out } => {
            compare(&load(config, cli.seed)?, n_list, *replicates, out)
        }
        Command::FlowTest { config, samples, out } => flow_test(&load(config, cli.seed)?, *samples, out),
        Command::Plot { input, out } => plot(input, out).map(|_| None),
    }
}

fn simulate(file: &ConfigFile, replicates: usize, out: &Path) -> Result<Option<PathBuf>, CliError> {
    if replicates == 0 {
        return Err(CliError::Config("need at least one replicate".into()));
    }
    let cfg = file.model_config().map_err(config_error)?;
    let mut dir = open(out, "simulate", file)?;
    let trajectories = map_replicates(replicates, |k| simulate_replicate(&cfg, k));
    let stats = ensemble(&cfg, replicates);
    dir.mark("simulate");

    let mut rows = Vec::new();
    for (k, traj) in trajectories.iter().enumerate() {
        for (j, &t) in traj.times.iter().enumerate() {
            rows.push(vec![
                k.to_string(),
                num(t),
                num(traj.x1_scaled(j)),
                num(traj.xn_scaled(j)),
                num(traj.immature_mass(j)),
            ]);
        }
    }
    dir.write_csv("trajectories.csv", &["replicate", "t", "x1", "xn", "immature_mass"], rows)?;

    let mut header = vec!["t".to_string()];
    header.extend((1..=cfg.n).map(|i| format!("c{i}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = stats.times.iter().zip(&stats.mean_counts).map(|(&t, means)| {
        std::iter::once(num(t)).chain(means.iter().map(|&v| num(v))).collect::<Vec<_>>()
    });
    dir.write_csv("ensemble_mean.csv", &header, rows)?;

    let absorbed: Vec<Option<f64>> = trajectories.iter().map(|t| t.absorbed_at).collect();
    dir.set_summary(json!({
        "replicates": replicates,
        "absorbed": stats.absorbed,
        "absorption_times": absorbed,
        "mean_sup_total": stats.mean_sup_total,
    }));
    dir.finish().map(Some)
}

fn diagnose(file: &ConfigFile, testfn: &str, replicate: u64, out: &Path) -> Result<Option<PathBuf>, CliError> {
    let f = TestFunction::by_name(testfn).map_err(config_error)?;
    let cfg = file.model_config().map_err(config_error)?;
    let mut dir = open(out, "diagnose", file)?;
    let traj = simulate_replicate(&cfg, replicate);
    let panel = semimartingale_panel(&traj, &f, cfg.model.death).map_err(config_error)?;
    dir.mark("simulate");

    let start = &traj.counts[0];
    let mut worst_identity = 0.0f64;
    let rows: Vec<Vec<String>> = panel
        .rows
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let identity = telescoping_identity(start, &traj.counts[k], &traj.logs[k], cfg.model.death);
            worst_identity = worst_identity.max(identity.relative_error());
            let b = &row.brackets;
            [
                row.t,
                row.drift.stem,
                row.drift.immature,
                row.drift.mature,
                row.residual.stem,
                row.residual.immature,
                row.residual.mature,
                b.stem,
                b.immature,
                b.mature,
                b.stem_immature,
                b.stem_mature,
                b.immature_mature,
                identity.relative_error(),
            ]
            .iter()
            .map(|&v| num(v))
            .collect()
        })
        .collect();
    dir.write_csv(
        "panel.csv",
        &[
            "t",
            "drift_stem",
            "drift_immature",
            "drift_mature",
            "residual_stem",
            "residual_immature",
            "residual_mature",
            "bracket_stem",
            "bracket_immature",
            "bracket_mature",
            "bracket_stem_immature",
            "bracket_stem_mature",
            "bracket_immature_mature",
            "identity_error",
        ],
        rows,
    )?;
    dir.set_summary(json!({
        "test_function": panel.test_function,
        "replicate": replicate,
        "max_identity_error": worst_identity,
        "absorbed_at": traj.absorbed_at,
    }));
    dir.finish().map(Some)
}

fn density_header(nodes: &[f64]) -> Vec<String> {
    std::iter::once("t".to_string()).chain(nodes.iter().map(|&x| num(x))).collect()
}

fn limit(file: &ConfigFile, solver: Solver, out: &Path) -> Result<Option<PathBuf>, CliError> {
    let cfg = file.limit_config().map_err(config_error)?;
    let mut dir = open(out, "limit", file)?;
    let nodes: Vec<f64> = (0..=cfg.cells).map(|j| j as f64 / cfg.cells as f64).collect();
    let (times, a, z, mass, density, history, extra) = match solver {
        Solver::Upwind => {
            let grid = solve_upwind(&cfg).map_err(limit_error)?;
            let mass: Vec<f64> = (0..grid.times.len()).map(|k| grid.pair(k, |_| 1.0)).collect();
            let extra = json!({
                "solver": "upwind",
                "dt": grid.dt,
                "ledger_max_residual": grid.ledger_max_residual,
                "clipped": grid.clipped,
            });
            (grid.times, grid.a, grid.z, mass, grid.u, grid.history, extra)
        }
        Solver::Mild => {
            let traj = solve_mild(&cfg).map_err(limit_error)?;
            let mass = traj.atoms.iter().map(|atoms| atoms.iter().map(|&(_, w)| w).sum()).collect();
            let density = (0..traj.times.len()).map(|k| traj.project(k, cfg.cells)).collect();
            let extra = json!({
                "solver": "mild",
                "dt": traj.dt,
                "max_picard_iterations": traj.max_picard_iterations,
            });
            (traj.times, traj.a, traj.z, mass, density, traj.history, extra)
        }
    };
    dir.mark("solve");

    let rows = (0..times.len()).map(|k| vec![num(times[k]), num(a[k]), num(z[k]), num(mass[k])]);
    dir.write_csv("limit_scalars.csv", &["t", "a", "z", "immature_mass"], rows)?;
    let header = density_header(&nodes);
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = times
        .iter()
        .zip(&density)
        .map(|(&t, u)| std::iter::once(num(t)).chain(u.iter().map(|&v| num(v))).collect::<Vec<_>>());
    dir.write_csv("density.csv", &header, rows)?;
    let balance = limit_mass_balance(&history, &cfg.model);
    let worst = balance.iter().fold(0.0f64, |m, &(_, r)| m.max(r.abs()));
    dir.write_csv("mass_balance.csv", &["t", "residual"], balance.iter().map(|&(t, r)| vec![num(t), num(r)]))?;

    let last = times.len() - 1;
    dir.set_summary(json!({
        "details": extra,
        "final_a": a[last],
        "final_z": z[last],
        "final_immature_mass": mass[last],
        "max_mass_balance_residual": worst,
    }));
    dir.finish().map(Some)
}

fn compare(file: &ConfigFile, sizes: &[usize], replicates: usize, out: &Path) -> Result<Option<PathBuf>, CliError> {
    if sizes.iter().any(|&n| n < 3) {
        return Err(CliError::Config("every N in --n-list must be at least 3".into()));
    }
    let mut cfg = file.limit_config().map_err(config_error)?;
    cfg.cells = file.compare.reference_cells;
    let mut dir = open(out, "compare", file)?;
    let report =
        convergence_study(&cfg, file.seed, sizes, replicates, file.compare.bl_nodes).map_err(metrics_error)?;
    dir.mark("study");

    let rows = report.rows.iter().map(|r| {
        vec![
            r.n.to_string(),
            r.replicates.to_string(),
            num(r.distance),
            num(r.distance_se),
            num(r.stem_gap),
            num(r.stem_gap_max),
            num(r.stem_se),
            num(r.mature_gap),
            num(r.mature_gap_max),
            num(r.mature_se),
            r.absorbed.to_string(),
        ]
    });
    dir.write_csv(
        "convergence.csv",
        &[
            "n",
            "replicates",
            "distance",
            "distance_se",
            "stem_gap",
            "stem_gap_max",
            "stem_se",
            "mature_gap",
            "mature_gap_max",
            "mature_se",
            "absorbed",
        ],
        rows,
    )?;
    let mut rows = Vec::new();
    for r in &report.rows {
        for (&x, &g) in r.witness.nodes.iter().zip(&r.witness.values) {
            rows.push(vec![r.n.to_string(), num(x), num(g)]);
        }
    }
    dir.write_csv("witness.csv", &["n", "x", "g"], rows)?;
    dir.set_summary(json!({
        "distance_slope": report.distance_slope,
        "distance_decreasing": report.distance_decreasing,
        "stem_gap_decreasing": report.stem_gap_decreasing,
        "mature_gap_decreasing": report.mature_gap_decreasing,
    }));
    dir.finish().map(Some)
}

/// `base` with each node scaled by an independent factor in `[0.8, 1.2)`.
fn perturbed_history(base: &ZTrajectory, rng: &mut ChaCha8Rng) -> Result<ZTrajectory, CliError> {
    let values = base.values().iter().map(|&v| v * rng.random_range(0.8..1.2)).collect();
    ZTrajectory::new(base.times().to_vec(), values).map_err(|e| CliError::Numerical(e.to_string()))
}

fn flow_test(file: &ConfigFile, samples: usize, out: &Path) -> Result<Option<PathBuf>, CliError> {
    let cfg = file.limit_config().map_err(config_error)?;
    let mut dir = open(out, "flow-test", file)?;
    let grid = solve_upwind(&cfg).map_err(limit_error)?;
    let z = grid.history.z_trajectory().map_err(|e| CliError::Numerical(e.to_string()))?;
    let rates = cfg.model.extend_clamped();
    let field = FlowField::new(&rates, &z);
    let horizon = cfg.horizon;
    let mut rng = ChaCha8Rng::seed_from_u64(file.seed);
    dir.mark("solve");

    let mut rows = Vec::new();
    let mut failures = 0usize;
    let mut record = |check: &str, t: [f64; 3], x: f64, value: f64, tolerance: f64| {
        let pass = value <= tolerance;
        failures += usize::from(!pass);
        rows.push(vec![
            check.to_string(),
            num(t[0]),
            num(t[1]),
            num(t[2]),
            num(x),
            num(value),
            num(tolerance),
            pass.to_string(),
        ]);
    };
    for _ in 0..samples {
        let ts = [rng.random_range(0.0..horizon), rng.random_range(0.0..horizon), rng.random_range(0.0..horizon)];
        let x = rng.random_range(0.0..1.0);
        let composed = field.flow(ts[0], ts[1], field.flow(ts[1], ts[2], x));
        record("composition", ts, x, (field.flow(ts[0], ts[2], x) - composed).abs(), FLOW_TOL);

        let t = rng.random_range(0.0..horizon);
        let s = rng.random_range(0.0..1.0) * t;
        let y = field.flow(t, s, x);
        let err = match field.inverse_time_kappa(t, y, x) {
            Ok(v) => (v - s).abs(),
            Err(_) => f64::INFINITY,
        };
        record("inverse_time", [s, t, 0.0], x, err, FLOW_TOL);

        let y = field.flow(t, 0.0, x);
        let err = match field.inverse_space(t, y) {
            Ok(v) => (v - x).abs(),
            Err(_) => f64::INFINITY,
        };
        record("inverse_space", [0.0, t, 0.0], x, err, FLOW_TOL);

        let other_z = perturbed_history(&z, &mut rng)?;
        let other = FlowField::new(&rates, &other_z);
        let gap = stability_gap(&field, &other, 0.0, t, x);
        record("stability_gronwall", [0.0, t, 0.0], x, gap.gap, gap.gronwall * (1.0 + 1e-9) + 1e-15);
    }
    dir.write_csv("flow_checks.csv", &["check", "t1", "t2", "t3", "x", "value", "tolerance", "pass"], rows)?;
    dir.set_summary(json!({ "samples": samples, "failures": failures }));
    dir.finish().map(Some)
}

/// Converts a matrix CSV (header `t, x_0, x_1, ...`, one row per time) into
/// gnuplot's text `matrix nonuniform` layout.
fn plot(input: &Path, out: &Path) -> Result<(), CliError> {
    let mut reader = csv::Reader::from_path(input).map_err(|e| CliError::Config(e.to_string()))?;
    let parse = |s: &str| s.trim().parse::<f64>().map_err(|_| CliError::Config(format!("`{s}` is not a number")));
    let header = reader.headers().map_err(|e| CliError::Config(e.to_string()))?.clone();
    let columns: Vec<f64> = header.iter().skip(1).map(parse).collect::<Result<_, _>>()?;
    if columns.is_empty() {
        return Err(CliError::Config("matrix CSV needs at least one value column".into()));
    }
    let mut text = String::new();
    text.push_str(&columns.len().to_string());
    for x in &columns {
        text.push(' ');
        text.push_str(&num(*x));
    }
    text.push('\n');
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Config(e.to_string()))?;
        if record.len() != columns.len() + 1 {
            return Err(CliError::Config(format!("row has {} fields, expected {}", record.len(), columns.len() + 1)));
        }
        let values: Vec<f64> = record.iter().map(parse).collect::<Result<_, _>>()?;
        let line: Vec<String> = values.iter().map(|&v| num(v)).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let tmp = out.with_extension("tmp");
    fs::write(&tmp, text)?;
    fs::rename(&tmp, out)?;
    Ok(())
}
