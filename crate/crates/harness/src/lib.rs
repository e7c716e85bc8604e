//! Parameter sweeps over the CIQN coupler.
//!
//! A [`SweepSpec`] names a model problem, an accelerator and the grid axes
//! (histories, ranking, epsilon). [`run_sweep`] runs every cell with a fresh
//! coupler over `steps` time steps and collects per-cell iteration
//! statistics, which [`render_table`] and [`write_csv`] turn into text and
//! CSV output.

pub mod report;
pub mod spec;
pub mod sweep;

use std::path::PathBuf;

pub use report::{format_cell, render_comparison, render_csv, render_table, write_csv};
pub use spec::{seed_from_env, FileConfig, ProblemKind, ProblemSpec, SweepSpec, SEED_VAR};
pub use sweep::{compare_accelerators, mean_sd, run_cell, run_sweep, Cell, CellStats, Comparison, Grid};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] ciqn_core::Error),
    #[error(transparent)]
    Comm(#[from] ciqn_core::runtime::CommError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("sweep stopped after {} cells: {source}", grid.cells.len())]
    PartialSweep {
        grid: Box<Grid>,
        #[source]
        source: Box<HarnessError>,
    },
}

impl HarnessError {
    fn partial(grid: Grid, source: HarnessError) -> Self {
        HarnessError::PartialSweep {
            grid: Box::new(grid),
            source: Box::new(source),
        }
    }
}
