//! Compact interface quasi-Newton accelerator.
//!
//! Increment columns of the current step are differences of earlier
//! residuals and values against the current ones,
//! `Δr^i = r^i - r`, `Δx̃^i = x̃^i - x̃`, newest first and capped at
//! `ranking`. Columns frozen from the last `histories` converged steps are
//! appended after them. The combined V is factorised with
//! [`qr::decompose`], the coefficients solve `min ‖r + V λ‖`, and the next
//! iterate is `x̃ + W λ`. Columns removed by the filter are deleted from
//! both V and W for good.

use std::collections::VecDeque;

use super::{Accelerator, CouplerConfig, CouplingState, HistoryBlock, HistoryStore, StepStats};
use crate::error::{Error, Result};
use crate::field::InterfaceVector;
use crate::qr::{self, IncrementMatrix};
use crate::runtime::Communicator;

#[derive(Debug, Clone, Copy)]
enum Source {
    Current(usize),
    History { block: usize, column: usize },
}

#[derive(Debug, Clone)]
pub struct Ciqn {
    config: CouplerConfig,
    history: HistoryStore,
    /// Earlier `(r, x̃)` pairs of the current step, newest first.
    past: VecDeque<(InterfaceVector, InterfaceVector)>,
    stats: StepStats,
    last_columns: usize,
}

impl Ciqn {
    pub fn new(config: CouplerConfig) -> Self {
        let history = HistoryStore::new(config.histories);
        Self {
            config,
            history,
            past: VecDeque::new(),
            stats: StepStats::default(),
            last_columns: 0,
        }
    }

    pub fn config(&self) -> &CouplerConfig {
        &self.config
    }

    pub fn history(&self) -> &HistoryStore {
        &self.history
    }

    pub fn history_mut(&mut self) -> &mut HistoryStore {
        &mut self.history
    }

    /// Columns in the V used for the most recent update.
    pub fn last_column_count(&self) -> usize {
        self.last_columns
    }

    fn assemble(
        &self,
        r: &InterfaceVector,
        x_tilde: &InterfaceVector,
        cap: usize,
    ) -> Result<(Vec<Source>, IncrementMatrix, Vec<InterfaceVector>)> {
        let mut sources = Vec::new();
        let mut v = IncrementMatrix::default();
        let mut w = Vec::new();
        for (i, (rp, xp)) in self.past.iter().enumerate().take(cap) {
            sources.push(Source::Current(i));
            v.push(rp.sub(r)?);
            w.push(xp.sub(x_tilde)?);
        }
        'blocks: for (b, block) in self.history.blocks().enumerate() {
            for (k, (dv, dw)) in block
                .residual_increments()
                .iter()
                .zip(block.value_increments())
                .enumerate()
            {
                if v.len() >= cap {
                    break 'blocks;
                }
                sources.push(Source::History { block: b, column: k });
                v.push(dv.clone());
                w.push(dw.clone());
            }
        }
        Ok((sources, v, w))
    }

    fn forget(&mut self, dropped: &[Source]) {
        let mut current: Vec<usize> = Vec::new();
        let mut hist: Vec<(usize, usize)> = Vec::new();
        for s in dropped {
            match *s {
                Source::Current(i) => current.push(i),
                Source::History { block, column } => hist.push((block, column)),
            }
        }
        current.sort_unstable_by(|a, b| b.cmp(a));
        for i in current {
            self.past.remove(i);
        }
        hist.sort_unstable_by(|a, b| b.cmp(a));
        for (block, column) in hist {
            self.history.remove_column(block, column);
        }
    }

    fn relaxed(&self, state: &CouplingState) -> Result<InterfaceVector> {
        state.x().axpy(self.config.omega0, state.residual())
    }
}

impl Accelerator for Ciqn {
    fn name(&self) -> &'static str {
        "ciqn"
    }

    fn begin_time_step(&mut self) {
        self.past.clear();
        self.stats = StepStats::default();
    }

    fn next_iterate(&mut self, comm: &dyn Communicator, state: &CouplingState) -> Result<InterfaceVector> {
        let r = state.residual();
        let x_tilde = state.x_tilde();
        let cap = self.config.column_cap().min(r.global_len());
        let (sources, v, w) = self.assemble(r, x_tilde, cap)?;

        let next = if v.is_empty() {
            self.last_columns = 0;
            self.relaxed(state)?
        } else {
            match qr::decompose(comm, &v, self.config.epsilon, self.config.filter_norm) {
                Ok((stack, outcome)) => {
                    self.stats.filtered += outcome.dropped.len();
                    self.stats.restarts += outcome.restarts;
                    let lambda = qr::solve_coefficients(comm, &stack, r)?;
                    let mut next = x_tilde.clone();
                    for (&col, l) in outcome.kept.iter().zip(&lambda) {
                        next.axpy_in_place(*l, &w[col])?;
                    }
                    self.last_columns = outcome.kept.len();
                    let dropped: Vec<Source> = outcome.dropped.iter().map(|&i| sources[i]).collect();
                    self.forget(&dropped);
                    next
                }
                Err(Error::EmptySecantSpace) => {
                    self.last_columns = 0;
                    self.relaxed(state)?
                }
                Err(e) => return Err(e),
            }
        };

        self.past.push_front((r.clone(), x_tilde.clone()));
        self.past.truncate(self.config.ranking);
        Ok(next)
    }

    fn end_time_step(&mut self, _comm: &dyn Communicator, state: &CouplingState) -> Result<()> {
        if self.config.histories > 0 {
            let r = state.residual();
            let x_tilde = state.x_tilde();
            let mut v = Vec::with_capacity(self.past.len());
            let mut w = Vec::with_capacity(self.past.len());
            for (rp, xp) in &self.past {
                v.push(rp.sub(r)?);
                w.push(xp.sub(x_tilde)?);
            }
            self.history.push(HistoryBlock::new(v, w)?);
        }
        self.past.clear();
        Ok(())
    }

    fn take_step_stats(&mut self) -> StepStats {
        std::mem::take(&mut self.stats)
    }
}
