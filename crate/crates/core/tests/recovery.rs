// SPDX-License-Identifier: Apache-2.0

use nalgebra::{DMatrix, DVector};
use priorsense::ensembles::{gaussian_matrix_with, gaussian_vector_with, make_matrix_sensing_operator};
use priorsense::linalg;
use priorsense::recovery::subgradient_check;
use priorsense::{
    build_problem, solve, BlockPartition, MeasurementOperator, Objective, PriorShift, SignalShape, SolverConfig,
    StructureKind,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn objectives(rng: &mut ChaCha8Rng, n: usize) -> Vec<Objective> {
    let phi = gaussian_vector_with(rng, n);
    vec![
        Objective::BasisPursuit,
        Objective::McSparse { shift: PriorShift::sparse(&phi * 0.2).unwrap() },
        Objective::L1L1 { lambda: 0.8, prior: phi.clone() },
        Objective::L1L2 { lambda: 0.8, prior: phi.clone() },
        Objective::McBlock { shift: PriorShift::block(&phi * 0.2).unwrap(), partition: BlockPartition::new(n, 2).unwrap() },
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn objective_is_finite_at_prox_outputs(seed in any::<u64>(), tau in 0.01f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 8;
        let op = MeasurementOperator::dense(gaussian_matrix_with(&mut rng, 4, n)).unwrap();
        let y = gaussian_vector_with(&mut rng, 4);
        for objective in objectives(&mut rng, n) {
            let p = build_problem(op.clone(), y.clone(), 0.1, objective).unwrap();
            let v = gaussian_vector_with(&mut rng, n) * 10.0;
            let out = p.prox(&v, tau).unwrap();
            prop_assert!(p.objective_value(&out).is_finite());
        }
        let mats: Vec<DMatrix<f64>> = (0..4).map(|_| gaussian_matrix_with(&mut rng, 3, 3)).collect();
        let op = make_matrix_sensing_operator(&mats).unwrap();
        let shift = PriorShift::low_rank(&(gaussian_matrix_with(&mut rng, 3, 3) * 0.1)).unwrap();
        let p = build_problem(op, y.clone(), 0.1, Objective::McLowRank { shift }).unwrap();
        let out = p.prox(&(gaussian_vector_with(&mut rng, 9) * 10.0), tau).unwrap();
        prop_assert!(p.objective_value(&out).is_finite());
    }

    #[test]
    fn only_the_product_of_lambda_and_phi_matters(seed in any::<u64>(), lambda in 0.1f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 12;
        let phi = gaussian_vector_with(&mut rng, n) * 0.2;
        let shape = SignalShape::Vector(n);
        let a = PriorShift::from_factors(1.0, &phi, shape, StructureKind::Sparse).unwrap();
        let b = PriorShift::from_factors(lambda, &(&phi / lambda), shape, StructureKind::Sparse).unwrap();
        prop_assert!((a.payload() - b.payload()).amax() <= 1e-15);

        let op = MeasurementOperator::dense(gaussian_matrix_with(&mut rng, 6, n)).unwrap();
        let y = gaussian_vector_with(&mut rng, 6);
        let config = SolverConfig { max_iters: 3000, ..SolverConfig::default() };
        let ra = solve(&build_problem(op.clone(), y.clone(), 0.0, Objective::McSparse { shift: a }).unwrap(), &config).unwrap();
        let rb = solve(&build_problem(op, y, 0.0, Objective::McSparse { shift: b }).unwrap(), &config).unwrap();
        prop_assert!((&ra.x_hat - &rb.x_hat).amax() < 1e-9);
    }
}

#[test]
fn invalid_programs_are_rejected() {
    let op = MeasurementOperator::dense(DMatrix::identity(3, 4)).unwrap();
    let y = DVector::zeros(3);
    assert!(build_problem(op.clone(), DVector::zeros(2), 0.0, Objective::BasisPursuit).is_err());
    assert!(build_problem(op.clone(), y.clone(), -1.0, Objective::BasisPursuit).is_err());
    assert!(build_problem(op.clone(), y.clone(), f64::NAN, Objective::BasisPursuit).is_err());
    let wrong = PriorShift::sparse(DVector::zeros(5)).unwrap();
    assert!(build_problem(op.clone(), y.clone(), 0.0, Objective::McSparse { shift: wrong }).is_err());
    let lr = PriorShift::low_rank(&DMatrix::zeros(2, 2)).unwrap();
    assert!(build_problem(op, y, 0.0, Objective::McLowRank { shift: lr }).is_err());
}

#[test]
fn subgradient_check_detects_cancellation() {
    let u = DVector::from_vec(vec![1.0, 0.0, 0.0]);
    let v = DVector::from_vec(vec![0.0, 1.0, 0.0]);
    let x = &u * v.transpose() * 2.0;
    let mats: Vec<DMatrix<f64>> = (0..4).map(|k| DMatrix::from_fn(3, 3, |i, j| ((i + 2 * j + k) % 3) as f64 - 1.0)).collect();
    let op = make_matrix_sensing_operator(&mats).unwrap();
    let y = op.forward(&linalg::to_vector(&x));
    let exact = PriorShift::low_rank(&(&u * v.transpose())).unwrap();
    let p = build_problem(op.clone(), y.clone(), 0.0, Objective::McLowRank { shift: exact }).unwrap();
    assert!(!subgradient_check(&p, &linalg::to_vector(&x)).unwrap());
    let half = PriorShift::low_rank(&(&u * v.transpose() * 0.5)).unwrap();
    let p = build_problem(op, y, 0.0, Objective::McLowRank { shift: half }).unwrap();
    assert!(subgradient_check(&p, &linalg::to_vector(&x)).unwrap());
}
