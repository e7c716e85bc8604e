//! Surrogate coupled problems.
//!
//! Every problem is a pair of field operators exchanging interface data: a
//! "fluid" map from displacement to force and a "solid" map from force to
//! displacement. The composite fixed-point map executes them one after the
//! other, relaxing either the displacement (`d ↦ S(F(d))`) or the force
//! (`f ↦ F(S(f))`).
//!
//! Operators are dense and replicated on every rank. Evaluation gathers the
//! iterate, applies the operators in natural row order and keeps the rows
//! the rank owns, so the computed values do not depend on the partitioning.

use std::f64::consts::PI;
use std::ops::Range;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coupler::RelaxOn;
use crate::error::{Error, Result};
use crate::field::InterfaceVector;
use crate::runtime::{Communicator, PartitionLayout, RankId};

/// A fixed-point problem `x̃ = H(x)` on a partitioned interface.
pub trait CoupledProblem: Sync {
    fn name(&self) -> &'static str;

    fn global_size(&self) -> usize;

    /// Collective evaluation of `H` at `x` for time step `time_index`.
    fn evaluate(&self, comm: &dyn Communicator, x: &InterfaceVector, time_index: usize) -> Result<InterfaceVector>;

    fn initial_guess(&self, layout: &Arc<PartitionLayout>, rank: RankId) -> Result<InterfaceVector> {
        Ok(InterfaceVector::zeros(layout, rank))
    }

    /// Fixed point of step `time_index`, when one is available in closed form.
    fn exact_solution(&self, _layout: &Arc<PartitionLayout>, _rank: RankId, _time_index: usize) -> Result<InterfaceVector> {
        Err(Error::NoOracle(self.name()))
    }

    /// Natural row ranges of the coupled interfaces.
    fn interface_groups(&self) -> Vec<Range<usize>> {
        vec![0..self.global_size()]
    }

    /// Whether every time step poses the same fixed-point problem. Steady
    /// problems start each step from the initial guess instead of the
    /// previous solution, which would already be converged.
    fn is_steady(&self) -> bool {
        false
    }
}

/// Affine field operators `F(d) = A_f d + c_f`, `S(f) = A_s f + c_s`.
#[derive(Debug, Clone)]
pub struct AffineFields {
    pub fluid_matrix: DMatrix<f64>,
    pub fluid_offset: DVector<f64>,
    pub solid_matrix: DMatrix<f64>,
    pub solid_offset: DVector<f64>,
}

/// Two field solvers exchanging interface data.
pub trait FieldPair: Sync {
    fn name(&self) -> &'static str;

    fn size(&self) -> usize;

    /// Displacement to force.
    fn fluid(&self, displacement: &[f64], time_index: usize) -> Vec<f64>;

    /// Force to displacement.
    fn solid(&self, force: &[f64], time_index: usize) -> Vec<f64>;

    fn affine(&self, _time_index: usize) -> Option<AffineFields> {
        None
    }

    fn groups(&self) -> Vec<Range<usize>> {
        vec![0..self.size()]
    }

    fn is_steady(&self) -> bool {
        false
    }
}

/// Block Gauss-Seidel composition of a [`FieldPair`].
#[derive(Debug, Clone)]
pub struct Coupled<F> {
    pub fields: F,
    pub relax_on: RelaxOn,
}

impl<F: FieldPair> Coupled<F> {
    pub fn new(fields: F, relax_on: RelaxOn) -> Self {
        Self { fields, relax_on }
    }

    /// Composite map on a replicated vector.
    pub fn apply(&self, x: &[f64], time_index: usize) -> Vec<f64> {
        match self.relax_on {
            RelaxOn::Displacement => {
                let f = self.fields.fluid(x, time_index);
                self.fields.solid(&f, time_index)
            }
            RelaxOn::Force => {
                let d = self.fields.solid(x, time_index);
                self.fields.fluid(&d, time_index)
            }
        }
    }

    /// Solves `(I - A) x = c` for the affine composite map.
    pub fn exact_natural(&self, time_index: usize) -> Result<Vec<f64>> {
        let ops = self.fields.affine(time_index).ok_or(Error::NoOracle(self.fields.name()))?;
        let (a, c) = match self.relax_on {
            RelaxOn::Displacement => (
                &ops.solid_matrix * &ops.fluid_matrix,
                &ops.solid_matrix * &ops.fluid_offset + &ops.solid_offset,
            ),
            RelaxOn::Force => (
                &ops.fluid_matrix * &ops.solid_matrix,
                &ops.fluid_matrix * &ops.solid_offset + &ops.fluid_offset,
            ),
        };
        let n = a.nrows();
        let system = DMatrix::identity(n, n) - a;
        let x = system
            .lu()
            .solve(&c)
            .ok_or(Error::NoOracle("singular fixed-point system"))?;
        Ok(x.iter().copied().collect())
    }
}

impl<F: FieldPair> CoupledProblem for Coupled<F> {
    fn name(&self) -> &'static str {
        self.fields.name()
    }

    fn global_size(&self) -> usize {
        self.fields.size()
    }

    fn evaluate(&self, comm: &dyn Communicator, x: &InterfaceVector, time_index: usize) -> Result<InterfaceVector> {
        if x.global_len() != self.fields.size() {
            return Err(Error::LayoutMismatch);
        }
        let global = x.gather_natural(comm)?;
        if global.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        let out = self.apply(&global, time_index);
        InterfaceVector::from_natural(x.layout(), x.rank(), &out)
    }

    fn exact_solution(&self, layout: &Arc<PartitionLayout>, rank: RankId, time_index: usize) -> Result<InterfaceVector> {
        InterfaceVector::from_natural(layout, rank, &self.exact_natural(time_index)?)
    }

    fn interface_groups(&self) -> Vec<Range<usize>> {
        self.fields.groups()
    }

    fn is_steady(&self) -> bool {
        self.fields.is_steady()
    }
}

/// Row-wise dense product, summed left to right.
fn matvec(a: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
    (0..a.nrows())
        .map(|i| (0..a.ncols()).map(|j| a[(i, j)] * x[j]).sum())
        .collect()
}

fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Random matrix with spectral norm `norm`.
fn random_scaled(rng: &mut ChaCha8Rng, rows: usize, cols: usize, norm: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0));
    let s = m.clone().svd(false, false).singular_values.max();
    if s > 0.0 {
        m * (norm / s)
    } else {
        m
    }
}

/// `H(x) = A x + b`, split as `F(d) = A d`, `S(f) = f + b`.
#[derive(Debug, Clone)]
pub struct LinearFixedPoint {
    a: DMatrix<f64>,
    b: Vec<f64>,
    spectral_radius: f64,
}

impl LinearFixedPoint {
    pub fn new(a: DMatrix<f64>, b: Vec<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() || a.nrows() != b.len() {
            return Err(Error::Config("A must be square and match b".into()));
        }
        let spectral_radius = spectral_radius(&a);
        Ok(Self { a, b, spectral_radius })
    }

    /// Random `A` with `‖A‖₂ = contraction` and random `b`.
    pub fn random_contraction(size: usize, contraction: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_scaled(&mut rng, size, size, contraction);
        let b = (0..size).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Self::new(a, b).expect("dimensions agree")
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn offset(&self) -> &[f64] {
        &self.b
    }

    pub fn spectral_radius(&self) -> f64 {
        self.spectral_radius
    }
}

impl FieldPair for LinearFixedPoint {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn is_steady(&self) -> bool {
        true
    }

    fn size(&self) -> usize {
        self.b.len()
    }

    fn fluid(&self, displacement: &[f64], _time_index: usize) -> Vec<f64> {
        matvec(&self.a, displacement)
    }

    fn solid(&self, force: &[f64], _time_index: usize) -> Vec<f64> {
        force.iter().zip(&self.b).map(|(f, b)| f + b).collect()
    }

    fn affine(&self, _time_index: usize) -> Option<AffineFields> {
        let n = self.size();
        Some(AffineFields {
            fluid_matrix: self.a.clone(),
            fluid_offset: DVector::zeros(n),
            solid_matrix: DMatrix::identity(n, n),
            solid_offset: DVector::from_column_slice(&self.b),
        })
    }
}

/// Added-mass surrogate of a piston in a fluid column.
///
/// ```text
/// F(d) = -μ k M (d - g_t) + p_t      fluid reaction, M = I - c L
/// S(f) = g_t + f / k                 spring with rest position g_t
/// ```
///
/// `L` is the path-graph Laplacian, so the eigenvalues of `M` lie in
/// `(1 - 4c, 1]` with `M 1 = 1`. Both compositions have Jacobian `-μ M`:
/// Picard iteration amplifies the residual by up to `μ` per iteration and
/// diverges for `μ > 1`.
#[derive(Debug, Clone)]
pub struct AddedMassPiston {
    pub mass_ratio: f64,
    pub stiffness: f64,
    pub time_step: f64,
    pub row_coupling: f64,
    pub forcing_period: f64,
    pub load_amplitude: f64,
    size: usize,
    coupling: DMatrix<f64>,
}

impl AddedMassPiston {
    pub fn new(size: usize, mass_ratio: f64) -> Result<Self> {
        Self::with_parameters(size, mass_ratio, 1.0, 0.01, 0.01)
    }

    pub fn with_parameters(size: usize, mass_ratio: f64, stiffness: f64, time_step: f64, row_coupling: f64) -> Result<Self> {
        if size == 0 {
            return Err(Error::Config("piston needs at least one interface row".into()));
        }
        if !(mass_ratio > 0.0) || !(stiffness > 0.0) || !(time_step > 0.0) {
            return Err(Error::Config("mass ratio, stiffness and time step must be positive".into()));
        }
        if !(0.0..0.25).contains(&row_coupling) {
            return Err(Error::Config("row coupling must lie in [0, 0.25)".into()));
        }
        let mut m = DMatrix::identity(size, size);
        for i in 0..size.saturating_sub(1) {
            m[(i, i)] -= row_coupling;
            m[(i + 1, i + 1)] -= row_coupling;
            m[(i, i + 1)] += row_coupling;
            m[(i + 1, i)] += row_coupling;
        }
        Ok(Self {
            mass_ratio,
            stiffness,
            time_step,
            row_coupling,
            forcing_period: 1.0,
            load_amplitude: 0.5,
            size,
            coupling: m,
        })
    }

    /// Row coupling matrix `M`.
    pub fn coupling_matrix(&self) -> &DMatrix<f64> {
        &self.coupling
    }

    fn phase(&self, time_index: usize, row: usize) -> f64 {
        2.0 * PI * (time_index as f64 * self.time_step / self.forcing_period + row as f64 / self.size as f64)
    }

    /// Rest position `g_t`.
    pub fn target(&self, time_index: usize) -> Vec<f64> {
        (0..self.size)
            .map(|i| 1.0 + 0.5 * self.phase(time_index, i).sin())
            .collect()
    }

    /// External fluid load `p_t`.
    pub fn load(&self, time_index: usize) -> Vec<f64> {
        (0..self.size)
            .map(|i| self.load_amplitude * self.phase(time_index, i).cos())
            .collect()
    }
}

impl FieldPair for AddedMassPiston {
    fn name(&self) -> &'static str {
        "piston"
    }

    fn size(&self) -> usize {
        self.size
    }

    fn fluid(&self, displacement: &[f64], time_index: usize) -> Vec<f64> {
        let g = self.target(time_index);
        let dev: Vec<f64> = displacement.iter().zip(&g).map(|(d, g)| d - g).collect();
        let scale = -self.mass_ratio * self.stiffness;
        matvec(&self.coupling, &dev)
            .into_iter()
            .zip(self.load(time_index))
            .map(|(m, p)| scale * m + p)
            .collect()
    }

    fn solid(&self, force: &[f64], time_index: usize) -> Vec<f64> {
        force
            .iter()
            .zip(self.target(time_index))
            .map(|(f, g)| g + f / self.stiffness)
            .collect()
    }

    fn affine(&self, time_index: usize) -> Option<AffineFields> {
        let g = DVector::from_vec(self.target(time_index));
        let p = DVector::from_vec(self.load(time_index));
        let fluid_matrix = &self.coupling * (-self.mass_ratio * self.stiffness);
        let fluid_offset = -(&fluid_matrix * &g) + p;
        Some(AffineFields {
            fluid_matrix,
            fluid_offset,
            solid_matrix: DMatrix::identity(self.size, self.size) / self.stiffness,
            solid_offset: g,
        })
    }
}

/// Two linear interfaces sharing one stacked unknown:
///
/// ```text
/// x̃₁ = A₁ x₁ + b₁ + s C₁₂ x₂
/// x̃₂ = A₂ x₂ + b₂ + s C₂₁ x₁
/// ```
///
/// Rows `0..p₁` belong to the first interface. With `s = 0` the cross terms
/// are not evaluated at all, so each block reproduces a standalone
/// [`LinearFixedPoint`] bit for bit.
#[derive(Debug, Clone)]
pub struct TwoInterfaceBlock {
    first: LinearFixedPoint,
    second: LinearFixedPoint,
    cross_12: DMatrix<f64>,
    cross_21: DMatrix<f64>,
    strength: f64,
}

impl TwoInterfaceBlock {
    pub fn new(
        first: LinearFixedPoint,
        second: LinearFixedPoint,
        cross_12: DMatrix<f64>,
        cross_21: DMatrix<f64>,
        strength: f64,
    ) -> Result<Self> {
        let (p1, p2) = (first.size(), second.size());
        if cross_12.shape() != (p1, p2) || cross_21.shape() != (p2, p1) {
            return Err(Error::Config("cross-coupling blocks do not match the interfaces".into()));
        }
        Ok(Self {
            first,
            second,
            cross_12,
            cross_21,
            strength,
        })
    }

    /// Random sub-maps with `‖A_k‖₂ = contraction` and unit-norm cross blocks.
    pub fn random(p1: usize, p2: usize, contraction: f64, strength: f64, seed: u64) -> Self {
        let first = LinearFixedPoint::random_contraction(p1, contraction, seed);
        let second = LinearFixedPoint::random_contraction(p2, contraction, seed.wrapping_add(1));
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let c12 = random_scaled(&mut rng, p1, p2, 1.0);
        let c21 = random_scaled(&mut rng, p2, p1, 1.0);
        Self::new(first, second, c12, c21, strength).expect("dimensions agree")
    }

    pub fn first(&self) -> &LinearFixedPoint {
        &self.first
    }

    pub fn second(&self) -> &LinearFixedPoint {
        &self.second
    }

    pub fn strength(&self) -> f64 {
        self.strength
    }

    pub fn with_strength(mut self, strength: f64) -> Self {
        self.strength = strength;
        self
    }
}

impl FieldPair for TwoInterfaceBlock {
    fn name(&self) -> &'static str {
        "two-interface"
    }

    fn is_steady(&self) -> bool {
        true
    }

    fn size(&self) -> usize {
        self.first.size() + self.second.size()
    }

    fn fluid(&self, displacement: &[f64], t: usize) -> Vec<f64> {
        let p1 = self.first.size();
        let (d1, d2) = displacement.split_at(p1);
        let mut f1 = self.first.fluid(d1, t);
        let mut f2 = self.second.fluid(d2, t);
        if self.strength != 0.0 {
            for (f, c) in f1.iter_mut().zip(matvec(&self.cross_12, d2)) {
                *f += self.strength * c;
            }
            for (f, c) in f2.iter_mut().zip(matvec(&self.cross_21, d1)) {
                *f += self.strength * c;
            }
        }
        f1.extend(f2);
        f1
    }

    fn solid(&self, force: &[f64], t: usize) -> Vec<f64> {
        let (f1, f2) = force.split_at(self.first.size());
        let mut d = self.first.solid(f1, t);
        d.extend(self.second.solid(f2, t));
        d
    }

    fn affine(&self, t: usize) -> Option<AffineFields> {
        let (p1, p2) = (self.first.size(), self.second.size());
        let n = p1 + p2;
        let a = self.first.affine(t)?;
        let b = self.second.affine(t)?;
        let mut fluid_matrix = DMatrix::zeros(n, n);
        fluid_matrix.view_mut((0, 0), (p1, p1)).copy_from(&a.fluid_matrix);
        fluid_matrix.view_mut((p1, p1), (p2, p2)).copy_from(&b.fluid_matrix);
        fluid_matrix
            .view_mut((0, p1), (p1, p2))
            .copy_from(&(&self.cross_12 * self.strength));
        fluid_matrix
            .view_mut((p1, 0), (p2, p1))
            .copy_from(&(&self.cross_21 * self.strength));
        let mut solid_offset = DVector::zeros(n);
        solid_offset.rows_mut(0, p1).copy_from(&a.solid_offset);
        solid_offset.rows_mut(p1, p2).copy_from(&b.solid_offset);
        Some(AffineFields {
            fluid_matrix,
            fluid_offset: DVector::zeros(n),
            solid_matrix: DMatrix::identity(n, n),
            solid_offset,
        })
    }

    fn groups(&self) -> Vec<Range<usize>> {
        let p1 = self.first.size();
        vec![0..p1, p1..self.size()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::SimulatedWorld;

    fn eval_serial<F: FieldPair>(problem: &Coupled<F>, x: &[f64], t: usize) -> Vec<f64> {
        let layout = Arc::new(PartitionLayout::new(vec![x.len()]).unwrap());
        SimulatedWorld::run(1, |c| {
            let xv = InterfaceVector::from_natural(&layout, c.rank(), x).unwrap();
            problem.evaluate(c, &xv, t).unwrap().local().to_vec()
        })
        .unwrap()
        .remove(0)
    }

    #[test]
    fn zero_matrix_returns_offset() {
        let p = Coupled::new(
            LinearFixedPoint::new(DMatrix::zeros(3, 3), vec![1.0, -2.0, 0.5]).unwrap(),
            RelaxOn::Displacement,
        );
        assert_eq!(eval_serial(&p, &[7.0, 8.0, 9.0], 0), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn diagonal_half_has_fixed_point_two() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]);
        let p = Coupled::new(LinearFixedPoint::new(a, vec![1.0, 1.0]).unwrap(), RelaxOn::Displacement);
        let x = p.exact_natural(0).unwrap();
        assert!((x[0] - 2.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15);
        assert_eq!(eval_serial(&p, &[2.0, 2.0], 0), vec![2.0, 2.0]);
        assert!((p.fields.spectral_radius() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn exact_solution_is_a_fixed_point_for_both_relaxations() {
        let fields = AddedMassPiston::new(6, 5.0).unwrap();
        for relax in [RelaxOn::Displacement, RelaxOn::Force] {
            let p = Coupled::new(fields.clone(), relax);
            for t in [0, 3] {
                let x = p.exact_natural(t).unwrap();
                let hx = p.apply(&x, t);
                for (a, b) in x.iter().zip(&hx) {
                    assert!((a - b).abs() < 1e-12, "{relax:?} t={t}");
                }
            }
        }
    }

    #[test]
    fn piston_picard_ratio_matches_power_iteration() {
        // Picard residuals satisfy r_{k+1} = -μ M r_k. The ratio over the
        // first iterations is compared against ‖μ M r‖ / ‖r‖ computed by
        // repeated multiplication with the coupling matrix alone.
        let fields = AddedMassPiston::new(8, 5.0).unwrap();
        let p = Coupled::new(fields.clone(), RelaxOn::Displacement);
        let mut x = vec![0.0; 8];
        let mut residuals = Vec::new();
        for _ in 0..4 {
            let hx = p.apply(&x, 0);
            let r: Vec<f64> = hx.iter().zip(&x).map(|(a, b)| a - b).collect();
            residuals.push(r.iter().map(|v| v * v).sum::<f64>().sqrt());
            x = hx;
        }
        let m = fields.coupling_matrix();
        let mut v = DVector::from_element(8, 1.0);
        for _ in 0..200 {
            v = m * &v;
            v /= v.norm();
        }
        let dominant = (m * &v).norm();
        assert!((dominant - 1.0).abs() < 1e-12);
        for k in 0..3 {
            let ratio = residuals[k + 1] / residuals[k];
            assert!(ratio <= 5.0 * dominant + 1e-12 && ratio >= 5.0 * (1.0 - 4.0 * 0.01), "ratio {ratio}");
        }
    }

    #[test]
    fn evaluation_is_partition_independent() {
        let p = Coupled::new(AddedMassPiston::new(7, 3.0).unwrap(), RelaxOn::Force);
        let x: Vec<f64> = (0..7).map(|i| 0.1 * i as f64).collect();
        let serial = eval_serial(&p, &x, 2);
        let layout = Arc::new(PartitionLayout::new(vec![2, 4, 1]).unwrap());
        let split = SimulatedWorld::run(3, |c| {
            let xv = InterfaceVector::from_natural(&layout, c.rank(), &x).unwrap();
            p.evaluate(c, &xv, 2).unwrap().gather_natural(c).unwrap()
        })
        .unwrap();
        assert_eq!(split[0], serial);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let p = Coupled::new(LinearFixedPoint::random_contraction(3, 0.5, 1), RelaxOn::Displacement);
        let layout = Arc::new(PartitionLayout::new(vec![3]).unwrap());
        let out = SimulatedWorld::run(1, |c| {
            let xv = InterfaceVector::from_natural(&layout, c.rank(), &[0.0, f64::NAN, 0.0]).unwrap();
            p.evaluate(c, &xv, 0).err()
        })
        .unwrap();
        assert_eq!(out[0], Some(Error::NonFiniteInput));
    }

    #[test]
    fn no_oracle_for_nonlinear_pairs() {
        struct Cubic;
        impl FieldPair for Cubic {
            fn name(&self) -> &'static str {
                "cubic"
            }
            fn size(&self) -> usize {
                1
            }
            fn fluid(&self, d: &[f64], _: usize) -> Vec<f64> {
                vec![d[0].powi(3)]
            }
            fn solid(&self, f: &[f64], _: usize) -> Vec<f64> {
                vec![0.1 * f[0] + 1.0]
            }
        }
        let p = Coupled::new(Cubic, RelaxOn::Displacement);
        assert_eq!(p.exact_natural(0), Err(Error::NoOracle("cubic")));
    }

    #[test]
    fn uncoupled_block_matches_standalone_maps() {
        let block = TwoInterfaceBlock::random(3, 4, 0.6, 0.0, 11);
        let stacked = Coupled::new(block.clone(), RelaxOn::Displacement);
        let one = Coupled::new(block.first().clone(), RelaxOn::Displacement);
        let two = Coupled::new(block.second().clone(), RelaxOn::Displacement);
        let x: Vec<f64> = (0..7).map(|i| (i as f64).sin()).collect();
        let y = stacked.apply(&x, 0);
        assert_eq!(&y[..3], one.apply(&x[..3], 0).as_slice());
        assert_eq!(&y[3..], two.apply(&x[3..], 0).as_slice());
    }
}
