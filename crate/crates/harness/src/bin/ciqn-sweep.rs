use std::path::PathBuf;
use std::process::ExitCode;

use ciqn_core::{AcceleratorKind, RelaxOn};
use ciqn_harness::{
    compare_accelerators, render_comparison, render_table, run_sweep, seed_from_env, FileConfig, HarnessError,
    ProblemKind, ProblemSpec, SweepSpec,
};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ciqn-sweep", version, about = "Sensitivity sweeps for the CIQN interface coupler")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a histories x ranking x epsilon grid and print the table.
    Sweep(Options),
    /// Run CIQN (first value of each axis), Aitken and Picard side by side.
    Compare(Options),
}

#[derive(Args)]
struct Options {
    /// TOML file with sweep settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// linear, piston or two-interface.
    #[arg(long)]
    problem: Option<ProblemKind>,
    /// ciqn, aitken or picard.
    #[arg(long)]
    accel: Option<AcceleratorKind>,
    #[arg(long, value_delimiter = ',')]
    histories: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    ranking: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    epsilon: Option<Vec<f64>>,
    /// displacement or force.
    #[arg(long)]
    relax_on: Option<RelaxOn>,
    /// Time steps per cell.
    #[arg(long)]
    steps: Option<usize>,
    /// Simulated ranks.
    #[arg(long)]
    ranks: Option<usize>,
    /// Relative rows per rank, e.g. 1,3,2.
    #[arg(long, value_delimiter = ',')]
    partition: Option<Vec<usize>>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    omega0: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Interface rows of the problem.
    #[arg(long)]
    size: Option<usize>,
    /// Added-mass ratio of the piston problem.
    #[arg(long)]
    mass_ratio: Option<f64>,
    /// Operator norm of random linear problems.
    #[arg(long)]
    contraction: Option<f64>,
    /// Cross-coupling of the two-interface problem.
    #[arg(long)]
    strength: Option<f64>,
    /// CSV output path; the table goes next to it with a .txt extension.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run cells one after another.
    #[arg(long)]
    serial: bool,
}

impl Options {
    fn spec(&self) -> Result<SweepSpec, HarnessError> {
        let mut spec = SweepSpec::default();
        if let Some(seed) = seed_from_env()? {
            spec.problem.seed = seed;
        }
        if let Some(path) = &self.config {
            spec.apply(&FileConfig::load(path)?)?;
        }
        if let Some(kind) = self.problem {
            if kind != spec.problem.kind {
                spec.problem = ProblemSpec {
                    seed: spec.problem.seed,
                    ..ProblemSpec::new(kind)
                };
            }
        }
        macro_rules! set {
            ($($src:ident => $($dst:ident).+),* $(,)?) => {
                $(if let Some(v) = &self.$src { spec.$($dst).+ = v.clone(); })*
            };
        }
        set!(
            accel => accel,
            histories => histories,
            ranking => ranking,
            epsilon => epsilon,
            relax_on => relax_on,
            steps => steps,
            ranks => ranks,
            tol => tol,
            omega0 => omega0,
            max_iters => max_iters,
            size => problem.size,
            mass_ratio => problem.mass_ratio,
            contraction => problem.contraction,
            strength => problem.strength,
        );
        if let Some(weights) = &self.partition {
            spec.partition = Some(weights.clone());
            if self.ranks.is_none() {
                spec.ranks = weights.len();
            }
        }
        if let Some(out) = &self.out {
            spec.out = Some(out.clone());
        }
        spec.parallel = !self.serial;
        spec.validate()?;
        Ok(spec)
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Sweep(opts) => {
            let spec = opts.spec()?;
            let grid = run_sweep(&spec)?;
            print!("{}", render_table(&grid));
            for cell in grid.cells.iter().filter(|c| c.stats.failure.is_some()) {
                eprintln!(
                    "histories={} ranking={} epsilon={}: {}",
                    cell.histories,
                    cell.ranking,
                    cell.epsilon,
                    cell.stats.failure.as_deref().unwrap_or_default()
                );
            }
        }
        Command::Compare(opts) => {
            let spec = opts.spec()?;
            let kinds = [AcceleratorKind::Ciqn, AcceleratorKind::Aitken, AcceleratorKind::Picard];
            print!("{}", render_comparison(&compare_accelerators(&spec, &kinds)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let HarnessError::PartialSweep { grid, .. } = &e {
                eprint!("{}", render_table(grid));
            }
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
