//! Time-step and coupling-iteration driver.
//!
//! Each time step evaluates the composite solver `x̃ = H(x)`, forms the
//! residual `r = x̃ - x` and asks an [`Accelerator`] for the next iterate
//! until the residual has dropped by `tol` relative to the first residual of
//! the step, or `max_iters` evaluations have been spent.

mod aitken;
mod ciqn;
mod history;

use std::ops::Range;
use std::str::FromStr;

pub use aitken::{Aitken, Picard, OMEGA_LIMIT};
pub use ciqn::Ciqn;
pub use history::{HistoryBlock, HistoryStore};

use crate::error::{Error, Result};
use crate::field::InterfaceVector;
use crate::problems::CoupledProblem;
use crate::qr::FilterNorm;
use crate::runtime::Communicator;

/// Absolute floor on the reference residual in the convergence test.
pub const RESIDUAL_FLOOR: f64 = 1e-30;

/// Which exchanged field the accelerator relaxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RelaxOn {
    #[default]
    Displacement,
    Force,
}

impl FromStr for RelaxOn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "displacement" => Ok(Self::Displacement),
            "force" => Ok(Self::Force),
            other => Err(Error::Config(format!("unknown relaxed field {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AcceleratorKind {
    #[default]
    Ciqn,
    Aitken,
    Picard,
}

impl FromStr for AcceleratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ciqn" => Ok(Self::Ciqn),
            "aitken" => Ok(Self::Aitken),
            "picard" => Ok(Self::Picard),
            other => Err(Error::Config(format!("unknown accelerator {other:?}"))),
        }
    }
}

impl AcceleratorKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ciqn => "ciqn",
            Self::Aitken => "aitken",
            Self::Picard => "picard",
        }
    }

    pub fn build(self, config: &CouplerConfig) -> Box<dyn Accelerator> {
        match self {
            Self::Ciqn => Box::new(Ciqn::new(config.clone())),
            Self::Aitken => Box::new(Aitken::new(config.omega0)),
            Self::Picard => Box::new(Picard),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplerConfig {
    /// Filter threshold `ε` in `|U_jj| < ε ‖U‖`.
    pub epsilon: f64,
    /// Number of past time steps whose increments are reused.
    pub histories: usize,
    /// Maximum increment columns kept per time step.
    pub ranking: usize,
    /// Fixed relaxation used while no secant information exists.
    pub omega0: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub relax_on: RelaxOn,
    pub filter_norm: FilterNorm,
}

impl Default for CouplerConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-9,
            histories: 0,
            ranking: 5,
            omega0: 0.1,
            tol: 1e-6,
            max_iters: 100,
            relax_on: RelaxOn::Displacement,
            filter_norm: FilterNorm::Frobenius,
        }
    }
}

impl CouplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if !(self.omega0 > 0.0 && self.omega0 <= 1.0) {
            return Err(Error::Config(format!("omega0 must lie in (0, 1], got {}", self.omega0)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.ranking == 0 {
            return Err(Error::Config("ranking must be >= 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be >= 1".into()));
        }
        Ok(())
    }

    /// Upper bound on the number of combined V columns.
    pub fn column_cap(&self) -> usize {
        self.ranking * (self.histories + 1)
    }
}

/// Outcome of one time step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IterationRecord {
    pub time_index: usize,
    /// Composite-solver evaluations, including the startup evaluation.
    pub iterations: usize,
    pub converged: bool,
    /// Columns removed by the QR filter during the step.
    pub filtered: usize,
    /// QR restarts triggered by the filter during the step.
    pub restarts: usize,
}

impl IterationRecord {
    pub fn diverged(&self) -> bool {
        !self.converged
    }
}

/// Per-step counters reported by an accelerator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StepStats {
    pub filtered: usize,
    pub restarts: usize,
}

/// Iterate, value and residual of the current coupling iteration.
#[derive(Debug, Clone)]
pub struct CouplingState {
    time_index: usize,
    iterations: usize,
    x: Option<InterfaceVector>,
    x_tilde: Option<InterfaceVector>,
    residual: Option<InterfaceVector>,
    groups: Vec<Range<usize>>,
    initial_norms: Vec<f64>,
    norms: Vec<f64>,
}

impl CouplingState {
    /// `groups` are natural row ranges that must each meet the tolerance.
    pub fn new(groups: Vec<Range<usize>>) -> Self {
        Self {
            time_index: 0,
            iterations: 0,
            x: None,
            x_tilde: None,
            residual: None,
            groups,
            initial_norms: Vec::new(),
            norms: Vec::new(),
        }
    }

    pub fn begin(&mut self, time_index: usize, x_initial: InterfaceVector) {
        self.time_index = time_index;
        self.iterations = 0;
        self.x = Some(x_initial);
        self.x_tilde = None;
        self.residual = None;
        self.initial_norms.clear();
        self.norms.clear();
    }

    /// Records `x̃ = H(x)` for the current iterate and forms `r = x̃ - x`.
    pub fn record(&mut self, comm: &dyn Communicator, x_tilde: InterfaceVector) -> Result<()> {
        let x = self.x.as_ref().expect("begin() sets the iterate");
        let r = x_tilde.sub(x)?;
        self.iterations += 1;
        let norms = r.group_norms(comm, &self.groups)?;
        if norms.iter().any(|n| !n.is_finite()) {
            return Err(Error::Divergence {
                iteration: self.iterations,
            });
        }
        if self.initial_norms.is_empty() {
            self.initial_norms = norms.clone();
        }
        self.norms = norms;
        self.x_tilde = Some(x_tilde);
        self.residual = Some(r);
        Ok(())
    }

    /// `‖r‖ <= tol · max(‖r⁰‖, floor)` for every row group.
    pub fn check_convergence(&self, tol: f64) -> bool {
        !self.norms.is_empty()
            && self
                .norms
                .iter()
                .zip(&self.initial_norms)
                .all(|(n, n0)| *n <= tol * n0.max(RESIDUAL_FLOOR))
    }

    pub fn set_x(&mut self, x: InterfaceVector) {
        self.x = Some(x);
    }

    pub fn time_index(&self) -> usize {
        self.time_index
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn x(&self) -> &InterfaceVector {
        self.x.as_ref().expect("begin() sets the iterate")
    }

    pub fn x_tilde(&self) -> &InterfaceVector {
        self.x_tilde.as_ref().expect("record() sets the value")
    }

    pub fn residual(&self) -> &InterfaceVector {
        self.residual.as_ref().expect("record() sets the residual")
    }

    /// Residual norm of each row group.
    pub fn residual_norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn residual_norm(&self) -> f64 {
        self.norms.iter().map(|n| n * n).sum::<f64>().sqrt()
    }
}

/// Produces the next coupling iterate from the recorded state.
pub trait Accelerator {
    fn name(&self) -> &'static str;

    fn begin_time_step(&mut self) {}

    /// Next iterate after [`CouplingState::record`].
    fn next_iterate(&mut self, comm: &dyn Communicator, state: &CouplingState) -> Result<InterfaceVector>;

    /// Called once a time step has converged.
    fn end_time_step(&mut self, _comm: &dyn Communicator, _state: &CouplingState) -> Result<()> {
        Ok(())
    }

    fn take_step_stats(&mut self) -> StepStats {
        StepStats::default()
    }

    /// Records `x_tilde` and returns the next iterate.
    fn advance(
        &mut self,
        comm: &dyn Communicator,
        state: &mut CouplingState,
        x_tilde: InterfaceVector,
    ) -> Result<InterfaceVector> {
        state.record(comm, x_tilde)?;
        self.next_iterate(comm, state)
    }
}

/// Result of a multi-step run on one rank.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub records: Vec<IterationRecord>,
    /// Last evaluated value `x̃` of the last executed step.
    pub solution: InterfaceVector,
    pub final_residual: f64,
    /// Error that ended the run early, with the records of the steps
    /// completed before it.
    pub failure: Option<Error>,
}

/// Drives one time step to convergence, `max_iters`, or divergence.
///
/// Returns the record and the last evaluated value. Divergence (non-finite
/// residual or iterate) ends the step with `converged = false`; algebraic
/// failures such as [`Error::SingularU`] are returned as errors.
pub fn run_time_step(
    comm: &dyn Communicator,
    problem: &dyn CoupledProblem,
    accelerator: &mut dyn Accelerator,
    config: &CouplerConfig,
    state: &mut CouplingState,
    time_index: usize,
    x_initial: InterfaceVector,
) -> Result<(IterationRecord, InterfaceVector)> {
    state.begin(time_index, x_initial);
    accelerator.begin_time_step();
    let mut converged = false;
    loop {
        let x_tilde = match problem.evaluate(comm, state.x(), time_index) {
            Ok(v) => v,
            Err(Error::NonFiniteInput) => break,
            Err(e) => return Err(e),
        };
        match state.record(comm, x_tilde) {
            Ok(()) => {}
            Err(Error::Divergence { .. }) => break,
            Err(e) => return Err(e),
        }
        if state.check_convergence(config.tol) {
            converged = true;
            break;
        }
        if state.iterations() >= config.max_iters {
            break;
        }
        let next = accelerator.next_iterate(comm, state)?;
        state.set_x(next);
    }
    if converged {
        accelerator.end_time_step(comm, state)?;
    }
    let stats = accelerator.take_step_stats();
    let record = IterationRecord {
        time_index,
        iterations: state.iterations(),
        converged,
        filtered: stats.filtered,
        restarts: stats.restarts,
    };
    let solution = match &state.x_tilde {
        Some(v) => v.clone(),
        None => state.x().clone(),
    };
    Ok((record, solution))
}

/// Runs `steps` consecutive time steps, each started from the previous
/// step's solution (or from the initial guess for steady problems). Stops
/// after the first diverged step or at the first algebraic failure, which is
/// reported in [`RunOutcome::failure`]. Configuration and layout errors are
/// returned directly.
pub fn run_time_steps(
    comm: &dyn Communicator,
    problem: &dyn CoupledProblem,
    accelerator: &mut dyn Accelerator,
    config: &CouplerConfig,
    layout: &std::sync::Arc<crate::runtime::PartitionLayout>,
    steps: usize,
) -> Result<RunOutcome> {
    config.validate()?;
    let mut state = CouplingState::new(problem.interface_groups());
    let mut x = problem.initial_guess(layout, comm.rank())?;
    let mut records = Vec::with_capacity(steps);
    let mut final_residual = f64::NAN;
    let mut failure = None;
    for t in 0..steps {
        if t > 0 && problem.is_steady() {
            x = problem.initial_guess(layout, comm.rank())?;
        }
        let (record, solution) = match run_time_step(comm, problem, accelerator, config, &mut state, t, x.clone()) {
            Ok(step) => step,
            Err(e @ (Error::LayoutMismatch | Error::Comm(_))) => return Err(e),
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        final_residual = state.residual_norm();
        records.push(record);
        x = solution;
        if record.diverged() {
            break;
        }
    }
    Ok(RunOutcome {
        records,
        solution: x,
        final_residual,
        failure,
    })
}

/// Couples every interface group of `problem` with its own accelerator.
///
/// All interfaces share the composite evaluations, but each one records its
/// own residual and builds its own secant information. An interface is
/// frozen at its converged value once it meets the tolerance; the step ends
/// when every interface has converged or `max_iters` is reached. Returns the
/// records per interface group, per time step.
///
/// Freezing assumes weak cross-coupling; for uncoupled interfaces the
/// per-interface records equal those of standalone runs.
pub fn run_interfaces_separately(
    comm: &dyn Communicator,
    problem: &dyn CoupledProblem,
    kind: AcceleratorKind,
    config: &CouplerConfig,
    layout: &std::sync::Arc<crate::runtime::PartitionLayout>,
    steps: usize,
) -> Result<Vec<Vec<IterationRecord>>> {
    config.validate()?;
    let rank = comm.rank();
    let groups = problem.interface_groups();
    let sub_layouts = groups
        .iter()
        .map(|g| layout.restrict(g.clone()).map(std::sync::Arc::new))
        .collect::<Result<Vec<_>>>()?;
    let mut accelerators: Vec<Box<dyn Accelerator>> = groups.iter().map(|_| kind.build(config)).collect();
    let mut states: Vec<CouplingState> = sub_layouts
        .iter()
        .map(|l| CouplingState::new(vec![0..l.global_size()]))
        .collect();
    let mut records = vec![Vec::with_capacity(steps); groups.len()];

    let mut x = problem.initial_guess(layout, rank)?;
    for t in 0..steps {
        if t > 0 && problem.is_steady() {
            x = problem.initial_guess(layout, rank)?;
        }
        let mut parts = Vec::with_capacity(groups.len());
        for (k, g) in groups.iter().enumerate() {
            let xg = x.restrict(&sub_layouts[k], g.clone())?;
            states[k].begin(t, xg.clone());
            accelerators[k].begin_time_step();
            parts.push(xg);
        }
        let mut done: Vec<Option<bool>> = vec![None; groups.len()];
        let mut evaluations = 0;
        let mut current = x;
        while done.iter().any(Option::is_none) && evaluations < config.max_iters {
            let x_tilde = match problem.evaluate(comm, &current, t) {
                Ok(v) => v,
                Err(Error::NonFiniteInput) => break,
                Err(e) => return Err(e),
            };
            evaluations += 1;
            for (k, g) in groups.iter().enumerate() {
                if done[k].is_some() {
                    continue;
                }
                match states[k].record(comm, x_tilde.restrict(&sub_layouts[k], g.clone())?) {
                    Ok(()) => {}
                    Err(Error::Divergence { .. }) => {
                        done[k] = Some(false);
                        continue;
                    }
                    Err(e) => return Err(e),
                }
                if states[k].check_convergence(config.tol) {
                    done[k] = Some(true);
                    parts[k] = states[k].x_tilde().clone();
                    accelerators[k].end_time_step(comm, &states[k])?;
                } else if evaluations < config.max_iters {
                    parts[k] = accelerators[k].next_iterate(comm, &states[k])?;
                    states[k].set_x(parts[k].clone());
                }
            }
            let refs: Vec<&InterfaceVector> = parts.iter().collect();
            current = InterfaceVector::concat(layout, rank, &refs)?;
        }
        let mut any_failed = false;
        for k in 0..groups.len() {
            let stats = accelerators[k].take_step_stats();
            let converged = done[k] == Some(true);
            any_failed |= !converged;
            records[k].push(IterationRecord {
                time_index: t,
                iterations: states[k].iterations(),
                converged,
                filtered: stats.filtered,
                restarts: stats.restarts,
            });
        }
        x = current;
        if any_failed {
            break;
        }
    }
    Ok(records)
}
