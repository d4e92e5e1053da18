//! `stemflow`: simulations, diagnostics, limit solutions and convergence
//! studies for the compartment model of blood cell maturation.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stemflow", version, about = "Stochastic compartment model of blood cell maturation and its large-population limit")]
pub struct Cli {
    /// Overrides the seed given in the configuration file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "STEMFLOW_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Solver {
    Upwind,
    Mild,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate replicates of the stochastic system.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        replicates: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Semimartingale panel of one replicate for a test function.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        /// `one`, `x`, `x2`, `hat0:EPS` or `hat1:EPS`.
        #[arg(long, default_value = "x")]
        testfn: String,
        #[arg(long, default_value_t = 0)]
        replicate: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the deterministic limit system.
    Limit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = Solver::Upwind)]
        solver: Solver,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distance between finite-N ensembles and the limit for several N.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [50, 100, 200, 400])]
        n_list: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        replicates: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Property checks of the maturation flow along the limit's z history.
    FlowTest {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a matrix CSV (first column time, header maturities) to a
    /// gnuplot nonuniform matrix.
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match commands::run(&cli) {
        Ok(manifest) => {
            if let Some(path) = manifest {
                println!("{}", path.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("stemflow: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
