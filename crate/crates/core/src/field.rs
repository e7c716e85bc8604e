//! Row-partitioned interface vectors and distributed BLAS-1.
//!
//! A vector only stores the rows its rank owns. Element-wise operations are
//! purely local; inner products reduce local partial sums with one
//! `allreduce` per call (or per batch, see [`InterfaceVector::dot_many`]).

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::runtime::{Communicator, PartitionLayout, RankId};

#[derive(Debug, Clone, PartialEq)]
pub struct InterfaceVector {
    layout: Arc<PartitionLayout>,
    rank: RankId,
    local: Vec<f64>,
}

impl InterfaceVector {
    pub fn zeros(layout: &Arc<PartitionLayout>, rank: RankId) -> Self {
        Self {
            layout: Arc::clone(layout),
            rank,
            local: vec![0.0; layout.local_len(rank)],
        }
    }

    pub fn from_local(layout: &Arc<PartitionLayout>, rank: RankId, local: Vec<f64>) -> Result<Self> {
        if local.len() != layout.local_len(rank) {
            return Err(Error::LayoutMismatch);
        }
        Ok(Self {
            layout: Arc::clone(layout),
            rank,
            local,
        })
    }

    /// Takes this rank's rows out of a replicated vector in natural order.
    pub fn from_natural(layout: &Arc<PartitionLayout>, rank: RankId, global: &[f64]) -> Result<Self> {
        if global.len() != layout.global_size() {
            return Err(Error::LayoutMismatch);
        }
        Self::from_local(layout, rank, global[layout.natural_range(rank)].to_vec())
    }

    /// Unit vector with a one at renumbered global row `index`.
    pub fn unit_at(layout: &Arc<PartitionLayout>, rank: RankId, index: usize) -> Result<Self> {
        let (owner, row) = layout.owner_of(index)?;
        let mut v = Self::zeros(layout, rank);
        if owner == rank {
            v.local[row] = 1.0;
        }
        Ok(v)
    }

    pub fn layout(&self) -> &Arc<PartitionLayout> {
        &self.layout
    }

    pub fn rank(&self) -> RankId {
        self.rank
    }

    pub fn local(&self) -> &[f64] {
        &self.local
    }

    pub fn local_mut(&mut self) -> &mut [f64] {
        &mut self.local
    }

    pub fn global_len(&self) -> usize {
        self.layout.global_size()
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        self.rank == other.rank
            && (Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout)
    }

    fn check(&self, other: &Self) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::LayoutMismatch)
        }
    }

    pub fn local_dot(&self, other: &Self) -> f64 {
        self.local.iter().zip(&other.local).map(|(a, b)| a * b).sum()
    }

    pub fn dot(&self, comm: &dyn Communicator, other: &Self) -> Result<f64> {
        self.check(other)?;
        Ok(comm.allreduce_sum(self.local_dot(other))?)
    }

    /// `self · others[k]` for every `k` with a single reduction.
    pub fn dot_many(&self, comm: &dyn Communicator, others: &[&Self]) -> Result<Vec<f64>> {
        let mut partial = Vec::with_capacity(others.len());
        for o in others {
            self.check(o)?;
            partial.push(self.local_dot(o));
        }
        Ok(comm.allreduce_sum_slice(&partial)?)
    }

    pub fn norm2(&self, comm: &dyn Communicator) -> Result<f64> {
        Ok(comm.allreduce_sum(self.local_dot(self))?.sqrt())
    }

    /// `self + alpha * x`, local rows only.
    pub fn axpy(&self, alpha: f64, x: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.axpy_in_place(alpha, x)?;
        Ok(out)
    }

    pub fn axpy_in_place(&mut self, alpha: f64, x: &Self) -> Result<()> {
        self.check(x)?;
        for (y, xi) in self.local.iter_mut().zip(&x.local) {
            *y += alpha * xi;
        }
        Ok(())
    }

    /// `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.axpy(-1.0, other)
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.local {
            *v *= alpha;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.local.iter().all(|v| v.is_finite())
    }

    /// Replicates the whole vector, in natural order, on every rank.
    pub fn gather_natural(&self, comm: &dyn Communicator) -> Result<Vec<f64>> {
        let mut padded = vec![0.0; self.global_len()];
        padded[self.layout.natural_range(self.rank)].copy_from_slice(&self.local);
        Ok(comm.allreduce_sum_slice(&padded)?)
    }

    /// Euclidean norms of the natural row groups `groups`, one reduction.
    pub fn group_norms(&self, comm: &dyn Communicator, groups: &[Range<usize>]) -> Result<Vec<f64>> {
        let own = self.layout.natural_range(self.rank);
        let partial: Vec<f64> = groups
            .iter()
            .map(|g| {
                let lo = g.start.max(own.start);
                let hi = g.end.min(own.end);
                (lo..hi.max(lo))
                    .map(|i| self.local[i - own.start].powi(2))
                    .sum()
            })
            .collect();
        Ok(comm
            .allreduce_sum_slice(&partial)?
            .into_iter()
            .map(f64::sqrt)
            .collect())
    }

    /// Sub-vector over natural rows `range`, laid out on `sub_layout`
    /// (obtained from [`PartitionLayout::restrict`]).
    pub fn restrict(&self, sub_layout: &Arc<PartitionLayout>, range: Range<usize>) -> Result<Self> {
        let own = self.layout.natural_range(self.rank);
        let lo = range.start.clamp(own.start, own.end);
        let hi = range.end.clamp(lo, own.end);
        Self::from_local(
            sub_layout,
            self.rank,
            self.local[lo - own.start..hi - own.start].to_vec(),
        )
    }

    /// Stacks sub-vectors covering consecutive natural row ranges.
    pub fn concat(layout: &Arc<PartitionLayout>, rank: RankId, parts: &[&Self]) -> Result<Self> {
        let local = parts.iter().flat_map(|p| p.local.iter().copied()).collect();
        Self::from_local(layout, rank, local)
    }
}
