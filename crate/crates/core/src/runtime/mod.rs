//! Simulated message-passing runtime.
//!
//! `P` ranks run as scoped threads inside one process. Each rank gets a
//! [`SimComm`] handle and executes the same program; the collectives on the
//! [`Communicator`] trait are the only rendezvous points between ranks.
//!
//! Reductions are accumulated in rank order `0..P` on whichever thread
//! arrives last, so the result is bit-reproducible for a fixed `P` no matter
//! how the threads interleave. Collective calls carry their kind, so ranks
//! that disagree on the call sequence get [`CommError::CollectiveMismatch`],
//! and a rank that returns while others still wait in a collective turns the
//! pending call into [`CommError::Deadlock`].
//!
//! A real message-passing backend only needs to implement [`Communicator`].

mod layout;

pub use layout::{select_leader, PartitionLayout};

use std::cell::Cell;
use std::fmt;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};

use thiserror::Error;

/// Rank index in `[0, P)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct RankId(pub usize);

impl RankId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for RankId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rank {}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CommError {
    #[error("collective call mismatch: {0}")]
    CollectiveMismatch(String),

    #[error("deadlock: {waiting} rank(s) wait in a collective that {finished} finished rank(s) will never join")]
    Deadlock { waiting: usize, finished: usize },

    #[error("broadcast root {root} out of range for {size} ranks")]
    InvalidRoot { root: usize, size: usize },

    #[error("world size must be at least 1")]
    EmptyWorld,

    #[error("{0} panicked")]
    RankPanicked(RankId),
}

/// Collective operations over a fixed set of ranks.
///
/// Every rank must invoke the same sequence of collectives.
pub trait Communicator {
    fn rank(&self) -> RankId;

    fn size(&self) -> usize;

    /// Element-wise sum over ranks, accumulated in rank order `0..P`.
    fn allreduce_sum_slice(&self, local: &[f64]) -> Result<Vec<f64>, CommError>;

    /// Returns `root`'s `value` on every rank. Non-root ranks may pass any
    /// slice (it is ignored).
    fn broadcast(&self, value: &[f64], root: RankId) -> Result<Vec<f64>, CommError>;

    /// Number of collectives this rank has entered so far.
    fn collective_count(&self) -> usize;

    fn allreduce_sum(&self, local: f64) -> Result<f64, CommError> {
        Ok(self.allreduce_sum_slice(&[local])?[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Collective {
    AllReduce { len: usize },
    Broadcast { root: usize },
}

#[derive(Debug)]
struct Contribution {
    kind: Collective,
    data: Vec<f64>,
}

type Outcome = Arc<Result<Vec<f64>, CommError>>;

struct Rendezvous {
    generation: u64,
    arrived: usize,
    slots: Vec<Option<Contribution>>,
    outcome: Outcome,
    finished: usize,
    failure: Option<CommError>,
}

struct Shared {
    size: usize,
    state: Mutex<Rendezvous>,
    cv: Condvar,
}

impl Shared {
    fn new(size: usize) -> Self {
        Self {
            size,
            state: Mutex::new(Rendezvous {
                generation: 0,
                arrived: 0,
                slots: (0..size).map(|_| None).collect(),
                outcome: Arc::new(Ok(Vec::new())),
                finished: 0,
                failure: None,
            }),
            cv: Condvar::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Rendezvous> {
        // A panicking rank poisons the mutex; the state itself stays consistent.
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn enter(&self, rank: usize, contribution: Contribution) -> Result<Vec<f64>, CommError> {
        let mut st = self.lock();
        if let Some(err) = &st.failure {
            return Err(err.clone());
        }
        st.slots[rank] = Some(contribution);
        st.arrived += 1;
        if st.arrived == self.size {
            let outcome = resolve(&mut st.slots);
            if let Err(err) = &outcome {
                st.failure = Some(err.clone());
            }
            st.outcome = Arc::new(outcome);
            st.arrived = 0;
            st.generation += 1;
            self.cv.notify_all();
            return (*st.outcome).clone();
        }
        let generation = st.generation;
        loop {
            if st.generation != generation {
                return (*st.outcome).clone();
            }
            if let Some(err) = &st.failure {
                return Err(err.clone());
            }
            if st.finished > 0 {
                let err = CommError::Deadlock {
                    waiting: st.arrived,
                    finished: st.finished,
                };
                st.failure = Some(err.clone());
                self.cv.notify_all();
                return Err(err);
            }
            st = self.cv.wait(st).unwrap_or_else(|e| e.into_inner());
        }
    }

    fn leave(&self) {
        let mut st = self.lock();
        st.finished += 1;
        self.cv.notify_all();
    }
}

fn resolve(slots: &mut [Option<Contribution>]) -> Result<Vec<f64>, CommError> {
    let contributions: Vec<Contribution> = slots
        .iter_mut()
        .map(|s| s.take().expect("every rank contributed"))
        .collect();
    let kind = contributions[0].kind;
    if let Some((rank, other)) = contributions
        .iter()
        .enumerate()
        .find(|(_, c)| c.kind != kind)
    {
        return Err(CommError::CollectiveMismatch(format!(
            "rank 0 called {:?} but rank {} called {:?}",
            kind, rank, other.kind
        )));
    }
    match kind {
        Collective::AllReduce { len } => {
            let mut acc = contributions[0].data.clone();
            for c in &contributions[1..] {
                for (a, b) in acc.iter_mut().zip(&c.data) {
                    *a += *b;
                }
            }
            debug_assert_eq!(acc.len(), len);
            Ok(acc)
        }
        Collective::Broadcast { root } => Ok(contributions[root].data.clone()),
    }
}

/// Per-rank handle into a [`SimulatedWorld`].
pub struct SimComm<'a> {
    rank: RankId,
    shared: &'a Shared,
    calls: Cell<usize>,
}

impl Communicator for SimComm<'_> {
    fn rank(&self) -> RankId {
        self.rank
    }

    fn size(&self) -> usize {
        self.shared.size
    }

    fn allreduce_sum_slice(&self, local: &[f64]) -> Result<Vec<f64>, CommError> {
        self.calls.set(self.calls.get() + 1);
        self.shared.enter(
            self.rank.0,
            Contribution {
                kind: Collective::AllReduce { len: local.len() },
                data: local.to_vec(),
            },
        )
    }

    fn broadcast(&self, value: &[f64], root: RankId) -> Result<Vec<f64>, CommError> {
        self.calls.set(self.calls.get() + 1);
        if root.0 >= self.shared.size {
            return Err(CommError::InvalidRoot {
                root: root.0,
                size: self.shared.size,
            });
        }
        let data = if root == self.rank {
            value.to_vec()
        } else {
            Vec::new()
        };
        self.shared.enter(
            self.rank.0,
            Contribution {
                kind: Collective::Broadcast { root: root.0 },
                data,
            },
        )
    }

    fn collective_count(&self) -> usize {
        self.calls.get()
    }
}

struct LeaveGuard<'a>(&'a Shared);

impl Drop for LeaveGuard<'_> {
    fn drop(&mut self) {
        self.0.leave();
    }
}

/// Runs an SPMD program over `size` simulated ranks.
pub struct SimulatedWorld;

impl SimulatedWorld {
    /// Executes `program` once per rank on its own thread and returns the
    /// per-rank results in rank order. A panic on any rank is re-raised on
    /// the calling thread after all ranks have stopped.
    pub fn run<R, F>(size: usize, program: F) -> Result<Vec<R>, CommError>
    where
        R: Send,
        F: Fn(&SimComm<'_>) -> R + Sync,
    {
        if size == 0 {
            return Err(CommError::EmptyWorld);
        }
        let shared = Shared::new(size);
        let outputs = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..size)
                .map(|rank| {
                    let shared = &shared;
                    let program = &program;
                    scope.spawn(move || {
                        let _guard = LeaveGuard(shared);
                        let comm = SimComm {
                            rank: RankId(rank),
                            shared,
                            calls: Cell::new(0),
                        };
                        program(&comm)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join()).collect::<Vec<_>>()
        });
        let mut results = Vec::with_capacity(size);
        for output in outputs {
            match output {
                Ok(r) => results.push(r),
                Err(payload) => std::panic::resume_unwind(payload),
            }
        }
        Ok(results)
    }
}
