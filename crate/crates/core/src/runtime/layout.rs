use std::ops::Range;

use super::RankId;
use crate::error::{Error, Result};

/// Picks the rank that owns the most interface rows. Ties go to the lowest
/// rank id.
pub fn select_leader(counts: &[usize]) -> Result<RankId> {
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::EmptyInterface);
    }
    let mut best = 0;
    for (rank, &count) in counts.iter().enumerate() {
        if count > counts[best] {
            best = rank;
        }
    }
    Ok(RankId(best))
}

/// Row distribution of an interface over ranks.
///
/// Two orderings of the global rows exist:
///
/// * the *natural* ordering, in which rank 0 owns the first block of rows,
///   rank 1 the next and so on. Problems evaluate their operators in this
///   ordering.
/// * the *renumbered* ordering used by the QR kernels, in which the leader's
///   rows come first followed by the other ranks in increasing id. Pivot
///   rows `0..q` therefore live on the leader whenever `q` does not exceed
///   its row count.
///
/// Local storage is identical under both orderings; only the global index of
/// a local row differs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionLayout {
    counts: Vec<usize>,
    leader: RankId,
    global_size: usize,
    natural_offsets: Vec<usize>,
    renumbered_offsets: Vec<usize>,
}

impl PartitionLayout {
    pub fn new(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::Config("layout needs at least one rank".into()));
        }
        let leader = select_leader(&counts)?;
        let global_size = counts.iter().sum();

        let mut natural_offsets = Vec::with_capacity(counts.len());
        let mut acc = 0;
        for &c in &counts {
            natural_offsets.push(acc);
            acc += c;
        }

        let mut renumbered_offsets = vec![0; counts.len()];
        let mut acc = counts[leader.0];
        for (rank, &c) in counts.iter().enumerate() {
            if rank != leader.0 {
                renumbered_offsets[rank] = acc;
                acc += c;
            }
        }

        Ok(Self {
            counts,
            leader,
            global_size,
            natural_offsets,
            renumbered_offsets,
        })
    }

    /// Splits `global_size` rows over `ranks` as evenly as possible, with the
    /// remainder going to the lowest ranks.
    pub fn balanced(global_size: usize, ranks: usize) -> Result<Self> {
        if ranks == 0 {
            return Err(Error::Config("layout needs at least one rank".into()));
        }
        let base = global_size / ranks;
        let extra = global_size % ranks;
        Self::new((0..ranks).map(|r| base + usize::from(r < extra)).collect())
    }

    /// Splits rows proportionally to `weights` (largest-remainder rounding,
    /// ties to the lower rank).
    pub fn weighted(global_size: usize, weights: &[usize]) -> Result<Self> {
        let total: usize = weights.iter().sum();
        if total == 0 {
            return Err(Error::Config("weights must not all be zero".into()));
        }
        let mut counts: Vec<usize> = weights.iter().map(|w| global_size * w / total).collect();
        let mut remainders: Vec<(usize, usize)> = weights
            .iter()
            .enumerate()
            .map(|(r, w)| (global_size * w % total, r))
            .collect();
        remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let missing = global_size - counts.iter().sum::<usize>();
        for &(_, r) in remainders.iter().take(missing) {
            counts[r] += 1;
        }
        Self::new(counts)
    }

    pub fn ranks(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn leader(&self) -> RankId {
        self.leader
    }

    pub fn global_size(&self) -> usize {
        self.global_size
    }

    pub fn local_len(&self, rank: RankId) -> usize {
        self.counts[rank.0]
    }

    pub fn leader_rows(&self) -> usize {
        self.counts[self.leader.0]
    }

    /// Natural global rows owned by `rank`.
    pub fn natural_range(&self, rank: RankId) -> Range<usize> {
        let start = self.natural_offsets[rank.0];
        start..start + self.counts[rank.0]
    }

    /// Renumbered global index of `rank`'s first local row.
    pub fn renumbered_offset(&self, rank: RankId) -> usize {
        self.renumbered_offsets[rank.0]
    }

    /// Owner and local row of renumbered global row `index`.
    pub fn owner_of(&self, index: usize) -> Result<(RankId, usize)> {
        if index >= self.global_size {
            return Err(Error::IndexOutOfRange {
                index,
                size: self.global_size,
            });
        }
        for (rank, &count) in self.counts.iter().enumerate() {
            let off = self.renumbered_offsets[rank];
            if index >= off && index < off + count {
                return Ok((RankId(rank), index - off));
            }
        }
        unreachable!("renumbered offsets cover every row")
    }

    /// Layout of the natural rows `range` keeping each rank's share of them.
    pub fn restrict(&self, range: Range<usize>) -> Result<Self> {
        if range.end > self.global_size || range.start > range.end {
            return Err(Error::IndexOutOfRange {
                index: range.end,
                size: self.global_size,
            });
        }
        let counts = (0..self.ranks())
            .map(|r| {
                let own = self.natural_range(RankId(r));
                own.end.min(range.end).saturating_sub(own.start.max(range.start))
            })
            .collect();
        Self::new(counts)
    }
}
