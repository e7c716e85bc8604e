//! Matrix-free economy QR of a row-partitioned increment matrix.
//!
//! The orthogonal factor is never formed. Each Householder reflector
//! `I - 2 u uᵀ` is kept as its vector `u`, and every product with it is
//! evaluated as `t - 2 u (u · t)`: one distributed inner product plus a
//! local update. The triangular factor `U` is `q × q` and replicated on all
//! ranks.
//!
//! Rows are addressed in the layout's renumbered ordering, so the pivot rows
//! `0..q` belong to the leader whenever `q` fits in its share of the
//! interface. Pivots beyond the leader's rows are handled by their owning
//! rank.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::field::InterfaceVector;
use crate::runtime::Communicator;

/// Relative size below which a diagonal entry of `U` counts as zero in
/// [`back_substitute`].
pub const SINGULAR_RTOL: f64 = 1e-13;

/// Ordered increment columns, newest first.
#[derive(Debug, Clone, Default)]
pub struct IncrementMatrix {
    columns: Vec<InterfaceVector>,
}

impl IncrementMatrix {
    pub fn new(columns: Vec<InterfaceVector>) -> Self {
        Self { columns }
    }

    pub fn columns(&self) -> &[InterfaceVector] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn push(&mut self, column: InterfaceVector) {
        self.columns.push(column);
    }
}

impl From<Vec<InterfaceVector>> for IncrementMatrix {
    fn from(columns: Vec<InterfaceVector>) -> Self {
        Self::new(columns)
    }
}

/// How `‖U‖` is measured in the filter test `|U_jj| < ε ‖U‖`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterNorm {
    /// Frobenius norm of the columns of `U` computed so far.
    #[default]
    Frobenius,
    /// Largest diagonal magnitude computed so far.
    MaxDiagonal,
}

/// Stored reflectors and the replicated triangular factor.
#[derive(Debug, Clone)]
pub struct HouseholderStack {
    reflectors: Vec<InterfaceVector>,
    identity: Vec<bool>,
    upper: DMatrix<f64>,
}

impl HouseholderStack {
    pub fn len(&self) -> usize {
        self.reflectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reflectors.is_empty()
    }

    pub fn reflectors(&self) -> &[InterfaceVector] {
        &self.reflectors
    }

    /// Whether reflector `j` was degenerate and stored as zero.
    pub fn is_identity(&self, j: usize) -> bool {
        self.identity[j]
    }

    pub fn upper(&self) -> &DMatrix<f64> {
        &self.upper
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FilterOutcome {
    /// Original column indices that survived, in original order.
    pub kept: Vec<usize>,
    /// Original column indices removed by the filter, in removal order.
    pub dropped: Vec<usize>,
    pub restarts: usize,
}

/// Local partial sums of squares above / below renumbered row `pivot`, and
/// the pivot entry if this rank owns it.
fn pivot_partials(v: &InterfaceVector, pivot: usize) -> [f64; 3] {
    let off = v.layout().renumbered_offset(v.rank());
    let x = v.local();
    let n = x.len();
    let split = pivot.saturating_sub(off).min(n);
    let above: f64 = x[..split].iter().map(|a| a * a).sum();
    let (pivot_value, below_start) = if pivot >= off && pivot < off + n {
        (x[split], split + 1)
    } else {
        (0.0, split)
    };
    let below: f64 = x[below_start..].iter().map(|a| a * a).sum();
    [above, below, pivot_value]
}

/// Builds the reflector for `v` at `pivot` from already-reduced sums.
/// Returns `(u, alpha, identity)`.
fn reflector_from(v: &InterfaceVector, pivot: usize, below: f64, pivot_value: f64) -> (InterfaceVector, f64, bool) {
    let mut u = InterfaceVector::zeros(v.layout(), v.rank());
    if below == 0.0 {
        // rows below the pivot are already zero
        return (u, pivot_value, true);
    }
    let norm = (below + pivot_value * pivot_value).sqrt();
    let alpha = if pivot_value >= 0.0 { -norm } else { norm };
    let head = pivot_value - alpha;
    let n_norm = (below + head * head).sqrt();

    let off = v.layout().renumbered_offset(v.rank());
    let x = v.local();
    let split = pivot.saturating_sub(off).min(x.len());
    let out = u.local_mut();
    for l in split..x.len() {
        out[l] = x[l] / n_norm;
    }
    if pivot >= off && pivot < off + x.len() {
        out[split] = head / n_norm;
    }
    (u, alpha, false)
}

/// Householder vector that maps `v` (restricted to renumbered rows
/// `>= pivot`) onto `alpha · e_pivot`.
///
/// `alpha = -sign(v_pivot) ‖v‖`. When every row below the pivot is already
/// zero the reflector is the identity: `u = 0` and `alpha = v_pivot`.
pub fn householder_vector(
    comm: &dyn Communicator,
    v: &InterfaceVector,
    pivot: usize,
) -> Result<(InterfaceVector, f64)> {
    if pivot >= v.global_len() {
        return Err(Error::IndexOutOfRange {
            index: pivot,
            size: v.global_len(),
        });
    }
    let [_, below, pv] = pivot_partials(v, pivot);
    let red = comm.allreduce_sum_slice(&[below, pv])?;
    let (u, alpha, _) = reflector_from(v, pivot, red[0], red[1]);
    Ok((u, alpha))
}

/// `t - 2 u (u · t)`. One reduction.
pub fn apply_reflector(comm: &dyn Communicator, u: &InterfaceVector, t: &InterfaceVector) -> Result<InterfaceVector> {
    let d = u.dot(comm, t)?;
    t.axpy(-2.0 * d, u)
}

enum Pass {
    Complete(HouseholderStack),
    Drop(usize),
}

fn factor_pass(
    comm: &dyn Communicator,
    columns: &[&InterfaceVector],
    epsilon: f64,
    norm: FilterNorm,
) -> Result<Pass> {
    let q = columns.len();
    let mut work: Vec<InterfaceVector> = columns.iter().map(|c| (*c).clone()).collect();
    let mut reflectors = Vec::with_capacity(q);
    let mut identity = Vec::with_capacity(q);
    let mut diagonal = Vec::with_capacity(q);
    let mut frobenius2 = 0.0;
    let mut max_diagonal: f64 = 0.0;

    for j in 0..q {
        let [above, below, pv] = pivot_partials(&work[j], j);
        let red = comm.allreduce_sum_slice(&[above, below, pv])?;
        let (u, alpha, is_identity) = reflector_from(&work[j], j, red[1], red[2]);

        let scale = match norm {
            FilterNorm::Frobenius => {
                frobenius2 += red[0] + alpha * alpha;
                frobenius2.sqrt()
            }
            FilterNorm::MaxDiagonal => {
                max_diagonal = max_diagonal.max(alpha.abs());
                max_diagonal
            }
        };
        if epsilon > 0.0 && (alpha.abs() < epsilon * scale || alpha == 0.0) {
            return Ok(Pass::Drop(j));
        }

        if !is_identity && j + 1 < q {
            let rest: Vec<&InterfaceVector> = work[j + 1..].iter().collect();
            let dots = u.dot_many(comm, &rest)?;
            for (col, d) in work[j + 1..].iter_mut().zip(dots) {
                col.axpy_in_place(-2.0 * d, &u)?;
            }
        }
        reflectors.push(u);
        identity.push(is_identity);
        diagonal.push(alpha);
    }

    // Strictly upper entries: U[i][k] is row i of the reduced column k.
    let layout = work[0].layout().clone();
    let rank = work[0].rank();
    let off = layout.renumbered_offset(rank);
    let n = layout.local_len(rank);
    let mut flat = vec![0.0; q * q];
    for (k, col) in work.iter().enumerate() {
        for i in off..(off + n).min(k) {
            flat[i * q + k] = col.local()[i - off];
        }
    }
    let flat = comm.allreduce_sum_slice(&flat)?;
    let mut upper = DMatrix::from_row_slice(q, q, &flat);
    for (j, a) in diagonal.into_iter().enumerate() {
        upper[(j, j)] = a;
    }
    Ok(Pass::Complete(HouseholderStack {
        reflectors,
        identity,
        upper,
    }))
}

/// Economy QR of `v` with diagonal filtering.
///
/// Columns are reduced left to right. When a diagonal entry satisfies
/// `|U_jj| < ε ‖U‖` the corresponding column is removed and the
/// factorisation restarts on the remaining columns. With `ε = 0` nothing is
/// filtered.
pub fn decompose(
    comm: &dyn Communicator,
    v: &IncrementMatrix,
    epsilon: f64,
    norm: FilterNorm,
) -> Result<(HouseholderStack, FilterOutcome)> {
    if v.is_empty() {
        return Err(Error::EmptySecantSpace);
    }
    let layout = v.columns[0].layout();
    if v.columns.iter().any(|c| !c.same_layout(&v.columns[0])) {
        return Err(Error::LayoutMismatch);
    }
    if v.len() > layout.global_size() {
        return Err(Error::TooManyColumns {
            columns: v.len(),
            rows: layout.global_size(),
        });
    }
    if !(epsilon >= 0.0) {
        return Err(Error::Config(format!("filter threshold must be >= 0, got {epsilon}")));
    }

    let mut outcome = FilterOutcome {
        kept: (0..v.len()).collect(),
        ..Default::default()
    };
    loop {
        if outcome.kept.is_empty() {
            return Err(Error::EmptySecantSpace);
        }
        let cols: Vec<&InterfaceVector> = outcome.kept.iter().map(|&i| &v.columns[i]).collect();
        match factor_pass(comm, &cols, epsilon, norm)? {
            Pass::Complete(stack) => return Ok((stack, outcome)),
            Pass::Drop(position) => {
                let original = outcome.kept.remove(position);
                outcome.dropped.push(original);
                outcome.restarts += 1;
            }
        }
    }
}

/// First `q` rows of `Qᵀ r`, replicated on every rank. Reflectors are
/// applied in factorisation order, the first one first.
pub fn apply_qt(comm: &dyn Communicator, stack: &HouseholderStack, r: &InterfaceVector) -> Result<Vec<f64>> {
    let mut t = r.clone();
    for (j, u) in stack.reflectors.iter().enumerate() {
        if !stack.identity[j] {
            t = apply_reflector(comm, u, &t)?;
        }
    }
    leading_rows(comm, &t, stack.len())
}

/// `Q t`: reflectors applied in reverse factorisation order.
pub fn apply_q(comm: &dyn Communicator, stack: &HouseholderStack, t: &InterfaceVector) -> Result<InterfaceVector> {
    let mut t = t.clone();
    for (j, u) in stack.reflectors.iter().enumerate().rev() {
        if !stack.identity[j] {
            t = apply_reflector(comm, u, &t)?;
        }
    }
    Ok(t)
}

/// Renumbered rows `0..q` of `t` on every rank. The leader broadcasts when it
/// owns all of them; otherwise the owners contribute to a reduction.
fn leading_rows(comm: &dyn Communicator, t: &InterfaceVector, q: usize) -> Result<Vec<f64>> {
    let layout = t.layout();
    let rank = t.rank();
    if q <= layout.leader_rows() {
        let mine = if rank == layout.leader() {
            t.local()[..q].to_vec()
        } else {
            Vec::new()
        };
        return Ok(comm.broadcast(&mine, layout.leader())?);
    }
    let off = layout.renumbered_offset(rank);
    let n = layout.local_len(rank);
    let mut padded = vec![0.0; q];
    let end = (off + n).min(q);
    if off < end {
        padded[off..end].copy_from_slice(&t.local()[..end - off]);
    }
    Ok(comm.allreduce_sum_slice(&padded)?)
}

/// Columns of `Q [U; 0]`, which reproduce the kept increment columns.
pub fn reconstruct_columns(comm: &dyn Communicator, stack: &HouseholderStack, template: &InterfaceVector) -> Result<Vec<InterfaceVector>> {
    let q = stack.len();
    let layout = template.layout();
    let rank = template.rank();
    let off = layout.renumbered_offset(rank);
    let n = layout.local_len(rank);
    (0..q)
        .map(|k| {
            let mut col = InterfaceVector::zeros(layout, rank);
            for i in off..(off + n).min(k + 1) {
                col.local_mut()[i - off] = stack.upper[(i, k)];
            }
            apply_q(comm, stack, &col)
        })
        .collect()
}

/// Solves `U λ = rhs` for upper-triangular `U`.
///
/// A diagonal entry with `|U_jj| <= SINGULAR_RTOL · ‖U‖_F` is treated as
/// zero and reported as [`Error::SingularU`].
pub fn back_substitute(upper: &DMatrix<f64>, rhs: &[f64]) -> Result<Vec<f64>> {
    let q = upper.nrows();
    if upper.ncols() != q || rhs.len() != q {
        return Err(Error::Config(format!(
            "back substitution needs a square system, got {}x{} with rhs of {}",
            q,
            upper.ncols(),
            rhs.len()
        )));
    }
    check_nonsingular(upper)?;
    let mut lambda = vec![0.0; q];
    for i in (0..q).rev() {
        let mut acc = rhs[i];
        for k in i + 1..q {
            acc -= upper[(i, k)] * lambda[k];
        }
        lambda[i] = acc / upper[(i, i)];
    }
    Ok(lambda)
}

fn check_nonsingular(upper: &DMatrix<f64>) -> Result<()> {
    let threshold = SINGULAR_RTOL * upper.norm();
    for j in 0..upper.nrows() {
        let d = upper[(j, j)].abs();
        if d == 0.0 || d <= threshold {
            return Err(Error::SingularU { column: j });
        }
    }
    Ok(())
}

/// Least-squares coefficients `λ = argmin ‖r + V λ‖` from a factorisation
/// of `V`.
///
/// `-Qᵀ r` is replicated, the leader back-substitutes and broadcasts `λ`.
pub fn solve_coefficients(comm: &dyn Communicator, stack: &HouseholderStack, r: &InterfaceVector) -> Result<Vec<f64>> {
    let rhs: Vec<f64> = apply_qt(comm, stack, r)?.into_iter().map(|v| -v).collect();
    // U is replicated, so every rank reaches the same verdict.
    check_nonsingular(&stack.upper)?;
    let leader = r.layout().leader();
    let lambda = if comm.rank() == leader {
        back_substitute(&stack.upper, &rhs)?
    } else {
        Vec::new()
    };
    Ok(comm.broadcast(&lambda, leader)?)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use approx::assert_relative_eq;

    use super::*;
    use crate::runtime::{PartitionLayout, SimulatedWorld};

    fn layout(counts: &[usize]) -> Arc<PartitionLayout> {
        Arc::new(PartitionLayout::new(counts.to_vec()).unwrap())
    }

    #[test]
    fn triangular_column_gives_identity_reflector() {
        let l = layout(&[3]);
        let out = SimulatedWorld::run(1, |c| {
            let v = InterfaceVector::from_natural(&l, c.rank(), &[2.0, 0.0, 0.0]).unwrap();
            householder_vector(c, &v, 0).unwrap()
        })
        .unwrap();
        let (u, alpha) = &out[0];
        assert_eq!(alpha, &2.0);
        assert!(u.local().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn reflector_sign_rule() {
        let l = layout(&[3]);
        let out = SimulatedWorld::run(1, |c| {
            let v = InterfaceVector::from_natural(&l, c.rank(), &[0.0, 3.0, 4.0]).unwrap();
            let (u, alpha) = householder_vector(c, &v, 0).unwrap();
            let reflected = apply_reflector(c, &u, &v).unwrap();
            (alpha, reflected.local().to_vec(), u.norm2(c).unwrap())
        })
        .unwrap();
        let (alpha, reflected, unorm) = &out[0];
        assert_eq!(*alpha, -5.0);
        assert_relative_eq!(reflected[0], -5.0, epsilon = 1e-14);
        assert!(reflected[1].abs() < 1e-14 && reflected[2].abs() < 1e-14);
        assert_relative_eq!(*unorm, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn reflector_is_rank_invariant() {
        let serial = SimulatedWorld::run(1, |c| {
            let l = layout(&[2]);
            let v = InterfaceVector::from_natural(&l, c.rank(), &[1.0, 1.0]).unwrap();
            let (u, a) = householder_vector(c, &v, 0).unwrap();
            (u.gather_natural(c).unwrap(), a)
        })
        .unwrap();
        let split = SimulatedWorld::run(2, |c| {
            let l = layout(&[1, 1]);
            let v = InterfaceVector::from_natural(&l, c.rank(), &[1.0, 1.0]).unwrap();
            let (u, a) = householder_vector(c, &v, 0).unwrap();
            (u.gather_natural(c).unwrap(), a)
        })
        .unwrap();
        assert!((serial[0].1 - split[0].1).abs() <= 1e-14);
        for (a, b) in serial[0].0.iter().zip(&split[1].0) {
            assert!((a - b).abs() <= 1e-14);
        }
    }

    #[test]
    fn zero_reflector_is_identity() {
        let l = layout(&[3]);
        let out = SimulatedWorld::run(1, |c| {
            let u = InterfaceVector::zeros(&l, c.rank());
            let t = InterfaceVector::from_natural(&l, c.rank(), &[1.0, 2.0, 3.0]).unwrap();
            apply_reflector(c, &u, &t).unwrap().local().to_vec()
        })
        .unwrap();
        assert_eq!(out[0], vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn unit_reflector_flips_first_row() {
        let l = layout(&[3]);
        let out = SimulatedWorld::run(1, |c| {
            let u = InterfaceVector::unit_at(&l, c.rank(), 0).unwrap();
            let t = InterfaceVector::from_natural(&l, c.rank(), &[1.0, 2.0, 3.0]).unwrap();
            let before = c.collective_count();
            let out = apply_reflector(c, &u, &t).unwrap();
            (out.local().to_vec(), c.collective_count() - before)
        })
        .unwrap();
        assert_eq!(out[0], (vec![-1.0, 2.0, 3.0], 1));
    }

    #[test]
    fn single_column_decomposition() {
        let l = layout(&[2]);
        let out = SimulatedWorld::run(1, |c| {
            let v = InterfaceVector::from_natural(&l, c.rank(), &[2.0, 0.0]).unwrap();
            let (stack, outcome) = decompose(c, &IncrementMatrix::new(vec![v]), 0.0, FilterNorm::Frobenius).unwrap();
            let r = InterfaceVector::from_natural(&l, c.rank(), &[4.0, 0.0]).unwrap();
            let qtr = apply_qt(c, &stack, &r).unwrap();
            (stack.upper()[(0, 0)], outcome, qtr)
        })
        .unwrap();
        let (u00, outcome, qtr) = &out[0];
        assert_eq!(*u00, 2.0);
        assert_eq!(outcome.kept, vec![0]);
        assert_eq!(qtr, &vec![4.0]);
    }

    #[test]
    fn apply_qt_truncates_identity_stack() {
        let l = layout(&[2]);
        let out = SimulatedWorld::run(1, |c| {
            let v = InterfaceVector::from_natural(&l, c.rank(), &[5.0, 0.0]).unwrap();
            let (stack, _) = decompose(c, &IncrementMatrix::new(vec![v]), 0.0, FilterNorm::Frobenius).unwrap();
            assert!(stack.is_identity(0));
            let r = InterfaceVector::from_natural(&l, c.rank(), &[3.0, 7.0]).unwrap();
            apply_qt(c, &stack, &r).unwrap()
        })
        .unwrap();
        assert_eq!(out[0], vec![3.0]);
    }

    #[test]
    fn duplicated_column_is_filtered_once() {
        let l = layout(&[4]);
        let out = SimulatedWorld::run(1, |c| {
            let a = InterfaceVector::from_natural(&l, c.rank(), &[1.0, 2.0, -1.0, 0.5]).unwrap();
            let b = InterfaceVector::from_natural(&l, c.rank(), &[0.0, 1.0, 3.0, 1.0]).unwrap();
            let v = IncrementMatrix::new(vec![a.clone(), a, b]);
            decompose(c, &v, 1e-9, FilterNorm::Frobenius).unwrap().1
        })
        .unwrap();
        assert_eq!(out[0].dropped, vec![1]);
        assert_eq!(out[0].kept, vec![0, 2]);
        assert_eq!(out[0].restarts, 1);
    }

    #[test]
    fn duplicated_column_is_singular_without_filter() {
        let l = layout(&[4]);
        let out = SimulatedWorld::run(1, |c| {
            let a = InterfaceVector::from_natural(&l, c.rank(), &[1.0, 2.0, -1.0, 0.5]).unwrap();
            let r = InterfaceVector::from_natural(&l, c.rank(), &[1.0, 0.0, 0.0, 0.0]).unwrap();
            let (stack, _) = decompose(c, &IncrementMatrix::new(vec![a.clone(), a]), 0.0, FilterNorm::Frobenius).unwrap();
            solve_coefficients(c, &stack, &r)
        })
        .unwrap();
        assert_eq!(out[0], Err(Error::SingularU { column: 1 }));
    }

    #[test]
    fn all_columns_filtered() {
        let l = layout(&[3]);
        let out = SimulatedWorld::run(1, |c| {
            let z = InterfaceVector::zeros(&l, c.rank());
            decompose(c, &IncrementMatrix::new(vec![z.clone(), z]), 1e-3, FilterNorm::MaxDiagonal).err()
        })
        .unwrap();
        assert_eq!(out[0], Some(Error::EmptySecantSpace));
    }

    #[test]
    fn too_many_columns() {
        let l = layout(&[2]);
        let out = SimulatedWorld::run(1, |c| {
            let a = InterfaceVector::from_natural(&l, c.rank(), &[1.0, 2.0]).unwrap();
            decompose(c, &IncrementMatrix::new(vec![a.clone(), a.clone(), a]), 0.0, FilterNorm::Frobenius).err()
        })
        .unwrap();
        assert_eq!(out[0], Some(Error::TooManyColumns { columns: 3, rows: 2 }));
    }

    #[test]
    fn back_substitution_small_systems() {
        let u = DMatrix::from_row_slice(1, 1, &[2.0]);
        assert_eq!(back_substitute(&u, &[4.0]).unwrap(), vec![2.0]);
        let u = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        assert_eq!(back_substitute(&u, &[3.0, 1.0]).unwrap(), vec![2.0, 1.0]);
        let u = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(back_substitute(&u, &[3.0, 1.0]), Err(Error::SingularU { column: 1 }));
    }
}
