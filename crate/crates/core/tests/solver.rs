// SPDX-License-Identifier: Apache-2.0

mod common;

use nalgebra::DVector;
use priorsense::ensembles::{gaussian_matrix_with, gaussian_vector_with};
use priorsense::recovery::{ProblemDocument, ProblemKind};
use priorsense::solver::check_optimality;
use priorsense::{
    build_problem, solve, BlockPartition, MeasurementOperator, Objective, PriorShift, SolverConfig, SolverStatus,
};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sparse(rng: &mut ChaCha8Rng, n: usize, s: usize) -> DVector<f64> {
    let mut x = DVector::zeros(n);
    for i in index::sample(rng, n, s) {
        x[i] = gaussian_vector_with(rng, 1)[0];
    }
    x
}

fn instance(seed: u64, n: usize, m: usize, s: usize) -> (MeasurementOperator, DVector<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = sparse(&mut rng, n, s);
    let op = MeasurementOperator::dense(gaussian_matrix_with(&mut rng, m, n)).unwrap();
    let y = op.forward(&x);
    (op, x, y)
}

#[test]
fn scaling_the_constraint_leaves_the_solution() {
    for seed in 0..4 {
        let (op, x, y) = instance(seed, 30, 18, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let shift = PriorShift::sparse(DVector::from_fn(30, |i, _| if x[i] != 0.0 { 0.6 * x[i].signum() } else { 0.0 }))
            .unwrap();
        let delta = 0.05;
        let noisy = &y + gaussian_vector_with(&mut rng, 18) * 0.01;
        let problem = build_problem(op, noisy, delta, Objective::McSparse { shift }).unwrap();
        let config = SolverConfig { tol_rel: 1e-10, max_iters: 100_000, ..SolverConfig::default() };
        let base = solve(&problem, &config).unwrap();
        assert_eq!(base.status, SolverStatus::Converged);
        for c in [0.1, 7.5] {
            let scaled = solve(&problem.scaled(c).unwrap(), &config).unwrap();
            assert_eq!(scaled.status, SolverStatus::Converged);
            let diff = (&scaled.x_hat - &base.x_hat).amax();
            assert!(diff < 1e-6, "c = {c}: max difference {diff:e}");
        }
    }
}

#[test]
fn converged_iterates_are_feasible() {
    let config = SolverConfig::default();
    for seed in 0..6 {
        let (op, x, y) = instance(seed, 40, 20, 4);
        let problems = vec![
            build_problem(op.clone(), y.clone(), 0.0, Objective::BasisPursuit).unwrap(),
            build_problem(op.clone(), y.clone(), 0.1, Objective::L1L1 { lambda: 1.0, prior: &x * 0.9 }).unwrap(),
            build_problem(op.clone(), y.clone(), 0.1, Objective::L1L2 { lambda: 0.5, prior: &x * 1.1 }).unwrap(),
            build_problem(
                op.clone(),
                y.clone(),
                0.0,
                Objective::McBlock {
                    shift: PriorShift::block(&x * 0.1).unwrap(),
                    partition: BlockPartition::new(40, 4).unwrap(),
                },
            )
            .unwrap(),
        ];
        for p in &problems {
            let r = solve(p, &config).unwrap();
            if r.status == SolverStatus::Converged {
                assert!(r.feasibility_gap <= config.feas_tol * (1.0 + p.y().norm()));
                assert!((p.feasibility_gap(&r.x_hat) - r.feasibility_gap).abs() < 1e-12);
            }
            // The truth is feasible, so the solution must be at least as good.
            let report = check_optimality(p, &r.x_hat, &x, 1e-4 * (1.0 + p.objective_value(&x).abs()), 1e-6);
            assert!(report.passes(), "{:?}: {report:?}", p.kind());
        }
    }
}

#[test]
fn zero_shift_follows_the_no_prior_path_exactly() {
    let (op, _, y) = instance(3, 30, 15, 3);
    let config = SolverConfig::default();
    let bp = solve(&build_problem(op.clone(), y.clone(), 0.0, Objective::BasisPursuit).unwrap(), &config).unwrap();
    let zero = PriorShift::sparse(DVector::zeros(30)).unwrap();
    let mc = solve(&build_problem(op, y, 0.0, Objective::McSparse { shift: zero }).unwrap(), &config).unwrap();
    assert_eq!(bp.x_hat, mc.x_hat);
    assert_eq!(bp.residual_history, mc.residual_history);
}

#[test]
fn basis_pursuit_matches_linear_program() {
    for seed in 10..16 {
        let (op, _, y) = instance(seed, 24, 12, 3);
        let config = SolverConfig { tol_rel: 1e-9, max_iters: 200_000, ..SolverConfig::default() };
        let r = solve(&build_problem(op.clone(), y.clone(), 0.0, Objective::BasisPursuit).unwrap(), &config).unwrap();
        let lp = common::basis_pursuit_lp(op.matrix(), &y).expect("feasible LP");
        let rel = (r.x_hat.lp_norm(1) - lp.lp_norm(1)).abs() / lp.lp_norm(1);
        assert!(rel < 1e-5, "seed {seed}: relative objective error {rel:e}");
    }
}

#[test]
fn oversized_shift_is_reported_as_divergent() {
    // With a shift far outside the unit ball and a nontrivial null space,
    // the objective decreases without bound along a null direction.
    let (op, _, y) = instance(5, 20, 5, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let shift = PriorShift::sparse(DVector::from_fn(20, |_, _| rng.random_range(-30.0..30.0))).unwrap();
    let problem = build_problem(op, y, 0.0, Objective::McSparse { shift }).unwrap();
    assert!(problem.unbounded_warning());
    let r = solve(&problem, &SolverConfig::default()).unwrap();
    assert_eq!(r.status, SolverStatus::Diverged);
}

#[test]
fn steps_satisfy_the_step_condition() {
    let (op, _, y) = instance(8, 30, 12, 2);
    let r = solve(&build_problem(op, y, 0.0, Objective::BasisPursuit).unwrap(), &SolverConfig::default()).unwrap();
    assert!(r.primal_step * r.dual_step * r.operator_norm.powi(2) <= 1.0);
}

#[test]
fn documents_round_trip() {
    let (op, x, y) = instance(2, 10, 6, 2);
    let problem = build_problem(op, y, 0.2, Objective::L1L2 { lambda: 0.7, prior: x }).unwrap();
    let doc = ProblemDocument::from_problem(&problem);
    assert_eq!(doc.kind, ProblemKind::L1L2);
    let back = ProblemDocument::from_json(&doc.to_json().unwrap()).unwrap().to_problem().unwrap();
    assert_eq!(back, problem);
}
