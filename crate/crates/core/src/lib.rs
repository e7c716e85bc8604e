//! Compact interface quasi-Newton (CIQN) coupling for partitioned interface
//! problems.
//!
//! * [`runtime`]: simulated ranks and collectives.
//! * [`field`]: row-partitioned interface vectors.
//! * [`qr`]: matrix-free Householder QR with diagonal filtering.
//! * [`coupler`]: the time-step / coupling-iteration state machine with the
//!   CIQN, Aitken and Picard accelerators.
//! * [`problems`]: surrogate coupled problems with reference solutions.

pub mod coupler;
pub mod error;
pub mod field;
pub mod problems;
pub mod qr;
pub mod runtime;

pub use error::{Error, Result};
pub use field::InterfaceVector;
pub use runtime::{Communicator, PartitionLayout, RankId, SimComm, SimulatedWorld};
pub use coupler::{
    run_time_step, run_time_steps, Accelerator, AcceleratorKind, Aitken, Ciqn, CouplerConfig,
    CouplingState, IterationRecord, Picard, RelaxOn,
};
pub use problems::{AddedMassPiston, Coupled, CoupledProblem, LinearFixedPoint, TwoInterfaceBlock};
