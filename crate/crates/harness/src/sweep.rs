use std::time::{Duration, Instant};

use ciqn_core::coupler::run_time_steps;
use ciqn_core::{AcceleratorKind, IterationRecord, SimulatedWorld};
use rayon::prelude::*;

use crate::report::CsvSink;
use crate::spec::SweepSpec;
use crate::HarnessError;

/// Per-cell iteration statistics over the executed time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct CellStats {
    pub mean: f64,
    /// Population standard deviation.
    pub sd: f64,
    pub diverged: bool,
    pub filtered: usize,
    pub restarts: usize,
    pub steps: usize,
    pub wall_time: Duration,
    /// Why the run stopped early, if it did.
    pub failure: Option<String>,
}

impl CellStats {
    /// Summarises the records of a run that was asked for `requested` steps.
    pub fn from_records(records: &[IterationRecord], requested: usize) -> Self {
        let (mean, sd) = mean_sd(records.iter().map(|r| r.iterations as f64));
        Self {
            mean,
            sd,
            diverged: records.len() < requested || records.iter().any(IterationRecord::diverged),
            filtered: records.iter().map(|r| r.filtered).sum(),
            restarts: records.iter().map(|r| r.restarts).sum(),
            steps: records.len(),
            wall_time: Duration::ZERO,
            failure: None,
        }
    }
}

/// Mean and population standard deviation; `(NaN, NaN)` for no samples.
pub fn mean_sd(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let values: Vec<f64> = values.into_iter().collect();
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub histories: usize,
    pub ranking: usize,
    pub epsilon: f64,
    pub stats: CellStats,
}

/// Sweep results in grid order: histories, then ranking, then epsilon.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Grid {
    pub histories: Vec<usize>,
    pub ranking: Vec<usize>,
    pub epsilon: Vec<f64>,
    pub cells: Vec<Cell>,
}

impl Grid {
    fn empty_for(spec: &SweepSpec) -> Self {
        Self {
            histories: spec.histories.clone(),
            ranking: spec.ranking.clone(),
            epsilon: spec.epsilon.clone(),
            cells: Vec::with_capacity(spec.cell_count()),
        }
    }

    pub fn get(&self, histories: usize, ranking: usize, epsilon: f64) -> Option<&Cell> {
        self.cells
            .iter()
            .find(|c| c.histories == histories && c.ranking == ranking && c.epsilon == epsilon)
    }

    pub fn is_complete(&self) -> bool {
        self.cells.len() == self.histories.len() * self.ranking.len() * self.epsilon.len()
    }
}

fn axes(spec: &SweepSpec) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::with_capacity(spec.cell_count());
    for &h in &spec.histories {
        for &r in &spec.ranking {
            for &e in &spec.epsilon {
                out.push((h, r, e));
            }
        }
    }
    out
}

/// Runs one cell with a fresh accelerator of kind `accel`.
pub fn run_cell(
    spec: &SweepSpec,
    accel: AcceleratorKind,
    histories: usize,
    ranking: usize,
    epsilon: f64,
) -> Result<CellStats, HarnessError> {
    let config = spec.coupler(histories, ranking, epsilon);
    let problem = spec.problem.build(spec.relax_on)?;
    let layout = spec.layout()?;
    let start = Instant::now();
    let per_rank = SimulatedWorld::run(spec.ranks, |comm| {
        let mut accelerator = accel.build(&config);
        run_time_steps(comm, problem.as_ref(), accelerator.as_mut(), &config, &layout, spec.steps)
    })?;
    let wall_time = start.elapsed();
    // every rank holds the same records; rank 0 reports
    let outcome = per_rank.into_iter().next().expect("at least one rank")?;
    let mut stats = CellStats::from_records(&outcome.records, spec.steps);
    stats.wall_time = wall_time;
    if let Some(e) = outcome.failure {
        stats.diverged = true;
        stats.failure = Some(e.to_string());
    }
    Ok(stats)
}

/// Executes every cell of the grid with a fresh coupler per cell.
///
/// Results do not depend on `spec.parallel` or on scheduling. With
/// `spec.out` set, CSV rows are appended and flushed as cells complete and
/// the text table is written at the end; an I/O failure returns
/// [`HarnessError::PartialSweep`] carrying the cells finished so far, which
/// are also the rows already on disk.
pub fn run_sweep(spec: &SweepSpec) -> Result<Grid, HarnessError> {
    spec.validate()?;
    let mut grid = Grid::empty_for(spec);
    let mut sink = match &spec.out {
        Some(path) => Some(CsvSink::create(path)?),
        None => None,
    };
    let cells = axes(spec);
    let chunk = if spec.parallel {
        rayon::current_num_threads().max(1)
    } else {
        1
    };
    for batch in cells.chunks(chunk) {
        let run = |&(h, r, e): &(usize, usize, f64)| {
            run_cell(spec, spec.accel, h, r, e).map(|stats| Cell {
                histories: h,
                ranking: r,
                epsilon: e,
                stats,
            })
        };
        let done: Vec<Cell> = if spec.parallel {
            batch.par_iter().map(run).collect::<Result<_, _>>()?
        } else {
            batch.iter().map(run).collect::<Result<_, _>>()?
        };
        for cell in done {
            if let Some(sink) = sink.as_mut() {
                if let Err(source) = sink.append(&cell) {
                    return Err(HarnessError::partial(grid, source));
                }
            }
            grid.cells.push(cell);
        }
    }
    if let Some(path) = &spec.out {
        let table = crate::report::render_table(&grid);
        let text_path = path.with_extension("txt");
        if let Err(source) = std::fs::write(&text_path, table) {
            let source = HarnessError::Io { path: text_path, source };
            return Err(HarnessError::partial(grid, source));
        }
    }
    Ok(grid)
}

/// One accelerator's statistics in a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonEntry {
    pub accel: AcceleratorKind,
    pub stats: CellStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub histories: usize,
    pub ranking: usize,
    pub epsilon: f64,
    pub entries: Vec<ComparisonEntry>,
}

impl Comparison {
    pub fn entry(&self, accel: AcceleratorKind) -> Option<&ComparisonEntry> {
        self.entries.iter().find(|e| e.accel == accel)
    }

    /// Aitken mean over CIQN mean; above 1 when CIQN needs fewer
    /// iterations. `None` unless both converged everywhere.
    pub fn speed_ratio(&self) -> Option<f64> {
        let ciqn = self.entry(AcceleratorKind::Ciqn)?;
        let aitken = self.entry(AcceleratorKind::Aitken)?;
        if ciqn.stats.diverged || aitken.stats.diverged {
            return None;
        }
        Some(aitken.stats.mean / ciqn.stats.mean)
    }
}

/// Runs each accelerator in `kinds` on the sweep's problem. CIQN uses the
/// first value of each sweep axis.
pub fn compare_accelerators(spec: &SweepSpec, kinds: &[AcceleratorKind]) -> Result<Comparison, HarnessError> {
    spec.validate()?;
    let (h, r, e) = (spec.histories[0], spec.ranking[0], spec.epsilon[0]);
    let entries = kinds
        .iter()
        .map(|&accel| run_cell(spec, accel, h, r, e).map(|stats| ComparisonEntry { accel, stats }))
        .collect::<Result<_, _>>()?;
    Ok(Comparison {
        histories: h,
        ranking: r,
        epsilon: e,
        entries,
    })
}
