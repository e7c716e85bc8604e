use super::{Accelerator, CouplingState};
use crate::error::Result;
use crate::field::InterfaceVector;
use crate::runtime::Communicator;

/// Bound on the Aitken relaxation factor, `|ω| <= OMEGA_LIMIT`.
pub const OMEGA_LIMIT: f64 = 2.0;

/// Aitken dynamic relaxation:
///
/// ```text
/// ω_I = -ω_{I-1} · r_{I-1}·(r_I - r_{I-1}) / ‖r_I - r_{I-1}‖²
/// ```
///
/// starting every time step from `ω₀`. The next iterate is `x + ω r`.
#[derive(Debug, Clone)]
pub struct Aitken {
    omega0: f64,
    omega: f64,
    previous: Option<InterfaceVector>,
}

impl Aitken {
    pub fn new(omega0: f64) -> Self {
        Self {
            omega0,
            omega: omega0,
            previous: None,
        }
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }
}

impl Accelerator for Aitken {
    fn name(&self) -> &'static str {
        "aitken"
    }

    fn begin_time_step(&mut self) {
        self.omega = self.omega0;
        self.previous = None;
    }

    fn next_iterate(&mut self, comm: &dyn Communicator, state: &CouplingState) -> Result<InterfaceVector> {
        let r = state.residual();
        if let Some(prev) = &self.previous {
            let dr = r.sub(prev)?;
            let sums = comm.allreduce_sum_slice(&[prev.local_dot(&dr), dr.local_dot(&dr)])?;
            // a vanishing denominator keeps the previous factor
            if sums[1] > 0.0 {
                self.omega = (-self.omega * sums[0] / sums[1]).clamp(-OMEGA_LIMIT, OMEGA_LIMIT);
            }
        } else {
            self.omega = self.omega0;
        }
        self.previous = Some(r.clone());
        state.x().axpy(self.omega, r)
    }
}

/// Plain fixed-point iteration, `x ← H(x)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Picard;

impl Accelerator for Picard {
    fn name(&self) -> &'static str {
        "picard"
    }

    fn next_iterate(&mut self, _comm: &dyn Communicator, state: &CouplingState) -> Result<InterfaceVector> {
        Ok(state.x_tilde().clone())
    }
}
