use std::sync::Arc;

use ciqn_core::qr::{self, FilterNorm, IncrementMatrix};
use ciqn_core::{Communicator, InterfaceVector, PartitionLayout, SimulatedWorld};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn columns(comm: &dyn Communicator, layout: &Arc<PartitionLayout>, v: &DMatrix<f64>) -> IncrementMatrix {
    let cols = (0..v.ncols())
        .map(|j| {
            let col: Vec<f64> = v.column(j).iter().copied().collect();
            InterfaceVector::from_natural(layout, comm.rank(), &col).unwrap()
        })
        .collect::<Vec<_>>();
    IncrementMatrix::new(cols)
}

fn normal_equations(v: &DMatrix<f64>, r: &DVector<f64>) -> DVector<f64> {
    let vtv = v.transpose() * v;
    let rhs = -(v.transpose() * r);
    vtv.cholesky().expect("full column rank").solve(&rhs)
}

fn relative(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    diff / scale
}

#[test]
fn distributed_dot_matches_serial_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a: Vec<f64> = (0..17).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..17).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let serial: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
    let layout = Arc::new(PartitionLayout::new(vec![5, 9, 3]).unwrap());
    let out = SimulatedWorld::run(3, |c| {
        let x = InterfaceVector::from_natural(&layout, c.rank(), &a).unwrap();
        let y = InterfaceVector::from_natural(&layout, c.rank(), &b).unwrap();
        x.dot(c, &y).unwrap()
    })
    .unwrap();
    for d in out {
        assert!((d - serial).abs() <= 1e-14 * serial.abs().max(1.0));
    }
}

#[test]
fn norm_is_stable_across_rank_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a: Vec<f64> = (0..33).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm_with = |ranks: usize| {
        let layout = Arc::new(PartitionLayout::balanced(33, ranks).unwrap());
        SimulatedWorld::run(ranks, |c| {
            InterfaceVector::from_natural(&layout, c.rank(), &a).unwrap().norm2(c).unwrap()
        })
        .unwrap()[0]
    };
    let one = norm_with(1);
    let four = norm_with(4);
    assert!((one - four).abs() <= 1e-13 * one);
}

#[test]
fn coefficients_match_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let v = random_matrix(&mut rng, 20, 5);
    let r = DVector::from_fn(20, |_, _| rng.gen_range(-1.0..1.0));
    let oracle = normal_equations(&v, &r);
    let rv: Vec<f64> = r.iter().copied().collect();
    for ranks in [1, 2, 3] {
        let layout = Arc::new(PartitionLayout::weighted(20, &[1, 3, 2][..ranks]).unwrap());
        let out = SimulatedWorld::run(ranks, |c| {
            let m = columns(c, &layout, &v);
            let (stack, outcome) = qr::decompose(c, &m, 0.0, FilterNorm::Frobenius).unwrap();
            assert!(outcome.dropped.is_empty());
            let r = InterfaceVector::from_natural(&layout, c.rank(), &rv).unwrap();
            qr::solve_coefficients(c, &stack, &r).unwrap()
        })
        .unwrap();
        for lambda in out {
            assert!(relative(&lambda, oracle.as_slice()) <= 1e-8, "P={ranks}");
        }
    }
}

#[test]
fn reflectors_reconstruct_columns_and_are_orthogonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let v = random_matrix(&mut rng, 12, 4);
    let layout = Arc::new(PartitionLayout::new(vec![3, 5, 4]).unwrap());
    SimulatedWorld::run(3, |c| {
        let m = columns(c, &layout, &v);
        let (stack, _) = qr::decompose(c, &m, 0.0, FilterNorm::Frobenius).unwrap();
        let rebuilt = qr::reconstruct_columns(c, &stack, &m.columns()[0]).unwrap();
        for (orig, back) in m.columns().iter().zip(&rebuilt) {
            let scale = orig.norm2(c).unwrap();
            let err = back.sub(orig).unwrap().norm2(c).unwrap();
            assert!(err <= 1e-12 * scale);
        }
        // Q applied to unit vectors gives orthonormal columns
        let q: Vec<InterfaceVector> = (0..12)
            .map(|k| {
                let e = InterfaceVector::unit_at(&layout, c.rank(), k).unwrap();
                qr::apply_q(c, &stack, &e).unwrap()
            })
            .collect();
        for i in 0..12 {
            for j in 0..12 {
                let d = q[i].dot(c, &q[j]).unwrap();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((d - expect).abs() <= 1e-13);
            }
        }
    })
    .unwrap();
}

#[test]
fn back_substitution_residual_is_small() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut u = DMatrix::zeros(6, 6);
    for i in 0..6 {
        u[(i, i)] = rng.gen_range(1.0..2.0);
        for j in i + 1..6 {
            u[(i, j)] = rng.gen_range(-1.0..1.0);
        }
    }
    let rhs: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let lambda = qr::back_substitute(&u, &rhs).unwrap();
    let res = &u * DVector::from_vec(lambda) - DVector::from_vec(rhs);
    assert!(res.norm() <= 1e-12);
}

fn rank_invariant_lambda(v: &DMatrix<f64>, r: &[f64], weights: &[usize]) -> Vec<f64> {
    let layout = Arc::new(PartitionLayout::weighted(v.nrows(), weights).unwrap());
    SimulatedWorld::run(weights.len(), |c| {
        let m = columns(c, &layout, v);
        let (stack, _) = qr::decompose(c, &m, 0.0, FilterNorm::Frobenius).unwrap();
        let r = InterfaceVector::from_natural(&layout, c.rank(), r).unwrap();
        qr::solve_coefficients(c, &stack, &r).unwrap()
    })
    .unwrap()
    .swap_remove(0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reflector_is_an_involution(seed in 0u64..10_000, p in 2usize..24, pivot_frac in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pivot = ((p as f64 - 1.0) * pivot_frac) as usize;
        let layout = Arc::new(PartitionLayout::balanced(p, 2.min(p)).unwrap());
        let ok = SimulatedWorld::run(layout.ranks(), |c| {
            let v = InterfaceVector::from_natural(&layout, c.rank(), &a).unwrap();
            let t = InterfaceVector::from_natural(&layout, c.rank(), &t).unwrap();
            let (u, _) = qr::householder_vector(c, &v, pivot).unwrap();
            let twice = qr::apply_reflector(c, &u, &qr::apply_reflector(c, &u, &t).unwrap()).unwrap();
            twice.sub(&t).unwrap().norm2(c).unwrap() <= 1e-13 * t.norm2(c).unwrap().max(1.0)
        }).unwrap();
        prop_assert!(ok.into_iter().all(|b| b));
    }

    #[test]
    fn larger_threshold_never_keeps_more(seed in 0u64..10_000, q in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = random_matrix(&mut rng, 10, q);
        // a near-dependent column makes the threshold matter
        let near = v.column(0) * 2.0 + v.column(1) * 1e-4;
        v.set_column(q - 1, &near);
        let layout = Arc::new(PartitionLayout::balanced(10, 2).unwrap());
        let kept = |eps: f64| {
            SimulatedWorld::run(2, |c| {
                let m = columns(c, &layout, &v);
                qr::decompose(c, &m, eps, FilterNorm::Frobenius).map(|(s, _)| s.len()).unwrap_or(0)
            }).unwrap()[0]
        };
        let counts: Vec<usize> = [0.0, 1e-9, 1e-5, 1e-3, 1e-1].iter().map(|&e| kept(e)).collect();
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{:?}", counts);
    }

    #[test]
    fn coefficients_do_not_depend_on_partition(seed in 0u64..10_000, q in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_matrix(&mut rng, 9, q);
        let r: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let one = rank_invariant_lambda(&v, &r, &[1]);
        let two = rank_invariant_lambda(&v, &r, &[1, 2]);
        let three = rank_invariant_lambda(&v, &r, &[2, 1, 3]);
        prop_assert!(relative(&two, &one) <= 1e-12);
        prop_assert!(relative(&three, &one) <= 1e-12);
    }
}
