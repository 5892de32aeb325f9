// SPDX-License-Identifier: Apache-2.0

use nalgebra::{DMatrix, DVector};
use priorsense::ensembles::{
    bernoulli_sensing_operator_with, gaussian_matrix_with, make_matrix_sensing_operator,
    operator_norm, sample_bernoulli_matrix, sample_gaussian_matrix, sample_signal, stream_rng,
};
use priorsense::linalg;
use priorsense::{BlockPartition, MeasurementOperator, SignalShape, SignalSpec, Structure};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn sensing_operator_matches_inner_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let mats: Vec<DMatrix<f64>> = (0..7).map(|_| gaussian_matrix_with(&mut rng, 4, 4)).collect();
        let op = make_matrix_sensing_operator(&mats).unwrap();
        let x = gaussian_matrix_with(&mut rng, 4, 4);
        let got = op.forward(&linalg::to_vector(&x));
        for (j, a) in mats.iter().enumerate() {
            // Frobenius inner product, summed entry by entry.
            let mut want = 0.0;
            for r in 0..4 {
                for c in 0..4 {
                    want += a[(r, c)] * x[(r, c)];
                }
            }
            assert!((got[j] - want).abs() < 1e-10);
        }
        // Same as the stacked dense matrix.
        let dense = MeasurementOperator::dense(op.matrix().clone()).unwrap();
        assert!((dense.forward(&linalg::to_vector(&x)) - &got).amax() < 1e-10);
    }
}

#[test]
fn mismatched_sensing_family_is_rejected() {
    let mats = vec![DMatrix::zeros(2, 3), DMatrix::zeros(3, 2)];
    assert!(make_matrix_sensing_operator(&mats).is_err());
    assert!(make_matrix_sensing_operator(&[]).is_err());
}

#[test]
fn low_rank_sampler_has_exact_rank() {
    for seed in 0..10 {
        let spec = SignalSpec {
            structure: Structure::LowRank { r: 3 },
            shape: SignalShape::Matrix { rows: 12, cols: 9 },
            seed,
        };
        let x = linalg::to_matrix(&sample_signal(&spec).unwrap(), 12, 9);
        let sv = x.singular_values();
        let mut sv: Vec<f64> = sv.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        assert!(sv[2] > 1e-3 * sv[0]);
        assert!(sv[3..].iter().all(|s| *s < 1e-8 * sv[0]));
    }
}

#[test]
fn sparse_and_block_samplers_respect_structure() {
    let spec = SignalSpec { structure: Structure::Sparse { s: 4 }, shape: SignalShape::Vector(16), seed: 3 };
    let x = sample_signal(&spec).unwrap();
    assert_eq!(x.iter().filter(|v| **v != 0.0).count(), 4);

    let part = BlockPartition::new(24, 3).unwrap();
    let spec = SignalSpec {
        structure: Structure::BlockSparse { s: 2, partition: part.clone() },
        shape: SignalShape::Vector(24),
        seed: 3,
    };
    let x = sample_signal(&spec).unwrap();
    let active = (0..part.block_count()).filter(|&b| part.block_norm(&x, b) > 0.0).count();
    assert_eq!(active, 2);

    let too_many = SignalSpec { structure: Structure::Sparse { s: 17 }, shape: SignalShape::Vector(16), seed: 0 };
    assert!(sample_signal(&too_many).is_err());
}

#[test]
fn sampling_is_deterministic() {
    assert_eq!(sample_gaussian_matrix(5, 7, 42).unwrap(), sample_gaussian_matrix(5, 7, 42).unwrap());
    assert_ne!(sample_gaussian_matrix(5, 7, 42).unwrap(), sample_gaussian_matrix(5, 7, 43).unwrap());
    let b = sample_bernoulli_matrix(6, 6, 1).unwrap();
    assert!(b.iter().all(|v| *v == 1.0 || *v == -1.0));
    assert!(sample_gaussian_matrix(0, 3, 1).is_err());

    let mut a = stream_rng(9, 1);
    let mut b = stream_rng(9, 1);
    let mut c = stream_rng(9, 2);
    let op_a = bernoulli_sensing_operator_with(&mut a, 5, 3, 3).unwrap();
    let op_b = bernoulli_sensing_operator_with(&mut b, 5, 3, 3).unwrap();
    let op_c = bernoulli_sensing_operator_with(&mut c, 5, 3, 3).unwrap();
    assert_eq!(op_a, op_b);
    assert_ne!(op_a, op_c);
}

#[test]
fn operator_norm_matches_largest_singular_value() {
    let a = sample_gaussian_matrix(20, 30, 5).unwrap();
    let want = a.singular_values().max();
    let est = operator_norm(&MeasurementOperator::dense(a).unwrap(), 2000, 1e-12);
    assert!(est.converged);
    assert!((est.value - want).abs() < 1e-6 * want);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adjoint_identity(seed in any::<u64>(), m in 1usize..8, n in 1usize..8) {
        let a = sample_gaussian_matrix(m, n, seed).unwrap();
        let op = MeasurementOperator::dense(a).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let x = DVector::from_iterator(n, gaussian_matrix_with(&mut rng, n, 1).iter().copied());
        let z = DVector::from_iterator(m, gaussian_matrix_with(&mut rng, m, 1).iter().copied());
        let lhs = op.forward(&x).dot(&z);
        let rhs = x.dot(&op.adjoint(&z));
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }
}
