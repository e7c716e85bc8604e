use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use ciqn_core::{
    AcceleratorKind, AddedMassPiston, Coupled, CoupledProblem, CouplerConfig, LinearFixedPoint, PartitionLayout,
    RelaxOn, TwoInterfaceBlock,
};
use serde::Deserialize;

use crate::HarnessError;

/// Environment variable holding the seed of random problem instances.
pub const SEED_VAR: &str = "CIQN_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Linear,
    Piston,
    TwoInterface,
}

impl ProblemKind {
    pub fn name(self) -> &'static str {
        match self {
            ProblemKind::Linear => "linear",
            ProblemKind::Piston => "piston",
            ProblemKind::TwoInterface => "two-interface",
        }
    }

    fn default_size(self) -> usize {
        match self {
            ProblemKind::Linear => 8,
            ProblemKind::Piston => 64,
            ProblemKind::TwoInterface => 16,
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProblemKind {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(ProblemKind::Linear),
            "piston" => Ok(ProblemKind::Piston),
            "two-interface" => Ok(ProblemKind::TwoInterface),
            other => Err(HarnessError::Config(format!(
                "unknown problem '{other}', expected linear, piston or two-interface"
            ))),
        }
    }
}

/// Problem family and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    /// Interface rows; for the two-interface block, the total of both.
    pub size: usize,
    /// Norm of the random linear operators.
    pub contraction: f64,
    pub mass_ratio: f64,
    pub row_coupling: f64,
    /// Cross-coupling between the two interfaces.
    pub strength: f64,
    pub seed: u64,
}

impl ProblemSpec {
    pub fn new(kind: ProblemKind) -> Self {
        Self {
            kind,
            size: kind.default_size(),
            contraction: 0.9,
            mass_ratio: 5.0,
            row_coupling: 0.01,
            strength: 0.2,
            seed: 0,
        }
    }

    pub fn build(&self, relax_on: RelaxOn) -> Result<Box<dyn CoupledProblem>, HarnessError> {
        if self.size == 0 {
            return Err(HarnessError::Config("problem size must be >= 1".into()));
        }
        Ok(match self.kind {
            ProblemKind::Linear => Box::new(Coupled::new(
                LinearFixedPoint::random_contraction(self.size, self.contraction, self.seed),
                relax_on,
            )),
            ProblemKind::Piston => Box::new(Coupled::new(
                AddedMassPiston::with_parameters(self.size, self.mass_ratio, 1.0, 0.01, self.row_coupling)?,
                relax_on,
            )),
            ProblemKind::TwoInterface => {
                if self.size < 2 {
                    return Err(HarnessError::Config("two-interface problem needs size >= 2".into()));
                }
                let first = self.size / 2;
                Box::new(Coupled::new(
                    TwoInterfaceBlock::random(first, self.size - first, self.contraction, self.strength, self.seed),
                    relax_on,
                ))
            }
        })
    }
}

/// One sweep: the grid axes plus everything shared by its cells.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub histories: Vec<usize>,
    pub ranking: Vec<usize>,
    pub epsilon: Vec<f64>,
    pub problem: ProblemSpec,
    pub accel: AcceleratorKind,
    pub relax_on: RelaxOn,
    pub steps: usize,
    pub ranks: usize,
    /// Relative row counts per rank; balanced when absent.
    pub partition: Option<Vec<usize>>,
    pub tol: f64,
    pub omega0: f64,
    pub max_iters: usize,
    pub out: Option<PathBuf>,
    /// Run cells on the rayon pool.
    pub parallel: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        let base = CouplerConfig::default();
        Self {
            histories: vec![0, 1, 2, 5, 10],
            ranking: vec![5, 10],
            epsilon: vec![0.0, 1e-9, 1e-7, 1e-5, 1e-3, 0.1],
            problem: ProblemSpec::new(ProblemKind::Piston),
            accel: AcceleratorKind::Ciqn,
            relax_on: RelaxOn::Displacement,
            steps: 50,
            ranks: 1,
            partition: None,
            tol: base.tol,
            omega0: base.omega0,
            max_iters: base.max_iters,
            out: None,
            parallel: true,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.histories.is_empty() || self.ranking.is_empty() || self.epsilon.is_empty() {
            return Err(HarnessError::Config("sweep axes must be non-empty".into()));
        }
        if self.steps == 0 {
            return Err(HarnessError::Config("steps must be >= 1".into()));
        }
        if self.ranks == 0 {
            return Err(HarnessError::Config("ranks must be >= 1".into()));
        }
        if let Some(weights) = &self.partition {
            if weights.len() != self.ranks {
                return Err(HarnessError::Config(format!(
                    "partition has {} weights for {} ranks",
                    weights.len(),
                    self.ranks
                )));
            }
        }
        for &h in &self.histories {
            for &r in &self.ranking {
                for &e in &self.epsilon {
                    self.coupler(h, r, e).validate()?;
                }
            }
        }
        Ok(())
    }

    /// Coupler settings of one grid cell.
    pub fn coupler(&self, histories: usize, ranking: usize, epsilon: f64) -> CouplerConfig {
        CouplerConfig {
            epsilon,
            histories,
            ranking,
            omega0: self.omega0,
            tol: self.tol,
            max_iters: self.max_iters,
            relax_on: self.relax_on,
            ..Default::default()
        }
    }

    pub fn layout(&self) -> Result<Arc<PartitionLayout>, HarnessError> {
        let layout = match &self.partition {
            Some(weights) => PartitionLayout::weighted(self.problem.size, weights)?,
            None => PartitionLayout::balanced(self.problem.size, self.ranks)?,
        };
        Ok(Arc::new(layout))
    }

    pub fn cell_count(&self) -> usize {
        self.histories.len() * self.ranking.len() * self.epsilon.len()
    }

    /// Applies the settings present in `file` on top of `self`.
    pub fn apply(&mut self, file: &FileConfig) -> Result<(), HarnessError> {
        if let Some(v) = &file.problem {
            let kind: ProblemKind = v.parse()?;
            if kind != self.problem.kind {
                self.problem = ProblemSpec {
                    seed: self.problem.seed,
                    ..ProblemSpec::new(kind)
                };
            }
        }
        macro_rules! set {
            ($($src:ident => $($dst:ident).+),* $(,)?) => {
                $(if let Some(v) = &file.$src { self.$($dst).+ = v.clone(); })*
            };
        }
        set!(
            histories => histories,
            ranking => ranking,
            epsilon => epsilon,
            steps => steps,
            ranks => ranks,
            tol => tol,
            omega0 => omega0,
            max_iters => max_iters,
            size => problem.size,
            contraction => problem.contraction,
            mass_ratio => problem.mass_ratio,
            row_coupling => problem.row_coupling,
            strength => problem.strength,
            seed => problem.seed,
        );
        if let Some(v) = &file.partition {
            self.partition = Some(v.clone());
        }
        if let Some(v) = &file.out {
            self.out = Some(v.clone());
        }
        if let Some(v) = &file.accel {
            self.accel = v.parse()?;
        }
        if let Some(v) = &file.relax_on {
            self.relax_on = v.parse()?;
        }
        Ok(())
    }
}

/// Declarative sweep file. Every key is optional and overrides the default.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub problem: Option<String>,
    pub accel: Option<String>,
    pub relax_on: Option<String>,
    pub histories: Option<Vec<usize>>,
    pub ranking: Option<Vec<usize>>,
    pub epsilon: Option<Vec<f64>>,
    pub steps: Option<usize>,
    pub ranks: Option<usize>,
    pub partition: Option<Vec<usize>>,
    pub tol: Option<f64>,
    pub omega0: Option<f64>,
    pub max_iters: Option<usize>,
    pub out: Option<PathBuf>,
    pub size: Option<usize>,
    pub contraction: Option<f64>,
    pub mass_ratio: Option<f64>,
    pub row_coupling: Option<f64>,
    pub strength: Option<f64>,
    pub seed: Option<u64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }
}

/// Reads the seed from [`SEED_VAR`], if set.
pub fn seed_from_env() -> Result<Option<u64>, HarnessError> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| HarnessError::Config(format!("{SEED_VAR} must be an unsigned integer, got '{v}'"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(HarnessError::Config(format!("{SEED_VAR}: {e}"))),
    }
}
