// SPDX-License-Identifier: Apache-2.0

//! Measurement ensembles, random structured signals and seeded RNG streams.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg;
use crate::proximal::BlockPartition;

/// Shape of the signal space: a vector of length `n` or an `rows x cols`
/// matrix stored column-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalShape {
    Vector(usize),
    Matrix { rows: usize, cols: usize },
}

impl SignalShape {
    pub fn len(&self) -> usize {
        match *self {
            SignalShape::Vector(n) => n,
            SignalShape::Matrix { rows, cols } => rows * cols,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn matrix_dims(&self) -> Option<(usize, usize)> {
        match *self {
            SignalShape::Matrix { rows, cols } => Some((rows, cols)),
            SignalShape::Vector(_) => None,
        }
    }
}

/// RNG for one independent stream of an experiment. Streams with distinct
/// keys never overlap, so trials can run in any order on any thread.
pub fn stream_rng(master_seed: u64, key: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(key);
    rng
}

/// A dense linear map from the signal space to `R^m`.
///
/// Matrix-sensing operators are stored as the stacked `m x (n1*n2)` matrix
/// whose `j`-th row is `vec(A^j)`, so `forward(X)_j = <A^j, X>`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementOperator {
    matrix: DMatrix<f64>,
    shape: SignalShape,
}

impl MeasurementOperator {
    /// Wraps an `m x n` matrix acting on vectors of length `n`.
    pub fn dense(matrix: DMatrix<f64>) -> Result<Self> {
        if matrix.ncols() == 0 {
            return invalid("measurement matrix needs at least one column");
        }
        let shape = SignalShape::Vector(matrix.ncols());
        Ok(Self { matrix, shape })
    }

    /// Wraps a stacked matrix acting on column-major vectorized signals.
    pub fn with_shape(matrix: DMatrix<f64>, shape: SignalShape) -> Result<Self> {
        if matrix.ncols() != shape.len() || shape.is_empty() {
            return invalid(format!(
                "operator has {} columns but the signal space has dimension {}",
                matrix.ncols(),
                shape.len()
            ));
        }
        Ok(Self { matrix, shape })
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn signal_shape(&self) -> SignalShape {
        self.shape
    }

    pub fn signal_len(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x
    }

    pub fn adjoint(&self, z: &DVector<f64>) -> DVector<f64> {
        self.matrix.tr_mul(z)
    }

    /// `out = A x` without allocating.
    pub fn forward_into(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        out.gemv(1.0, &self.matrix, x, 0.0);
    }

    /// `out = A^T z` without allocating.
    pub fn adjoint_into(&self, z: &DVector<f64>, out: &mut DVector<f64>) {
        out.gemv_tr(1.0, &self.matrix, z, 0.0);
    }

    /// Same operator with every entry multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            matrix: &self.matrix * c,
            shape: self.shape,
        }
    }
}

fn check_dims(m: usize, n: usize) -> Result<()> {
    if m == 0 || n == 0 {
        return invalid(format!("matrix dimensions must be positive, got {m}x{n}"));
    }
    Ok(())
}

/// `m x n` matrix with i.i.d. symmetric ±1 entries.
pub fn sample_bernoulli_matrix(m: usize, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    check_dims(m, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(bernoulli_matrix_with(&mut rng, m, n))
}

pub fn bernoulli_matrix_with<R: Rng + ?Sized>(rng: &mut R, m: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, n, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 })
}

/// `m x n` matrix with i.i.d. standard normal entries.
pub fn sample_gaussian_matrix(m: usize, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    check_dims(m, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(gaussian_matrix_with(&mut rng, m, n))
}

pub fn gaussian_matrix_with<R: Rng + ?Sized>(rng: &mut R, m: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, n, |_, _| rng.sample(StandardNormal))
}

pub fn gaussian_vector_with<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Operator `X -> (<A^1, X>, ..., <A^m, X>)` for a family of equally shaped
/// matrices.
pub fn make_matrix_sensing_operator(mats: &[DMatrix<f64>]) -> Result<MeasurementOperator> {
    let first = match mats.first() {
        Some(first) => first,
        None => return invalid("matrix-sensing family is empty"),
    };
    let (rows, cols) = first.shape();
    if let Some(bad) = mats.iter().position(|a| a.shape() != (rows, cols)) {
        return invalid(format!(
            "sensing matrix {bad} has shape {:?}, expected ({rows}, {cols})",
            mats[bad].shape()
        ));
    }
    let n = rows * cols;
    let mut stacked = DMatrix::zeros(mats.len(), n);
    for (j, a) in mats.iter().enumerate() {
        for (k, v) in a.as_slice().iter().enumerate() {
            stacked[(j, k)] = *v;
        }
    }
    MeasurementOperator::with_shape(stacked, SignalShape::Matrix { rows, cols })
}

/// `m` independent `rows x cols` Bernoulli sensing matrices.
pub fn bernoulli_sensing_operator_with<R: Rng + ?Sized>(
    rng: &mut R,
    m: usize,
    rows: usize,
    cols: usize,
) -> Result<MeasurementOperator> {
    let stacked = bernoulli_matrix_with(rng, m, rows * cols);
    MeasurementOperator::with_shape(stacked, SignalShape::Matrix { rows, cols })
}

/// Estimate of the largest singular value of an operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormEstimate {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

pub const DEFAULT_NORM_ITERS: usize = 200;
pub const DEFAULT_NORM_TOL: f64 = 1e-6;
const POWER_ITERATION_SEED: u64 = 0x5eed_0f_a11;

/// Power iteration on `A^T A` from a fixed seeded start vector.
pub fn operator_norm(op: &MeasurementOperator, max_iters: usize, tol: f64) -> NormEstimate {
    let n = op.signal_len();
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_ITERATION_SEED);
    let mut v = gaussian_vector_with(&mut rng, n);
    v /= v.norm();
    let mut av = DVector::zeros(op.rows());
    let mut atav = DVector::zeros(n);
    let mut estimate = 0.0;
    for it in 1..=max_iters.max(1) {
        op.forward_into(&v, &mut av);
        let next = av.norm();
        op.adjoint_into(&av, &mut atav);
        let norm = atav.norm();
        if norm == 0.0 {
            // v landed in the null space; the operator is zero along every
            // direction reachable from here.
            return NormEstimate { value: next, converged: true, iterations: it };
        }
        v.copy_from(&atav);
        v /= norm;
        let change = (next - estimate).abs();
        estimate = next;
        // Rayleigh-quotient changes understate the remaining error when the
        // top two singular values are close.
        if it > 1 && change <= 1e-3 * tol * estimate {
            op.forward_into(&v, &mut av);
            return NormEstimate { value: av.norm(), converged: true, iterations: it };
        }
    }
    op.forward_into(&v, &mut av);
    let value = av.norm();
    log::warn!("operator_norm: power iteration did not converge in {max_iters} iterations");
    NormEstimate { value, converged: false, iterations: max_iters }
}

/// Signal structure together with its level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Structure {
    Sparse { s: usize },
    BlockSparse { s: usize, partition: BlockPartition },
    LowRank { r: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub structure: Structure,
    pub shape: SignalShape,
    pub seed: u64,
}

pub fn sample_signal(spec: &SignalSpec) -> Result<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    sample_signal_with(&mut rng, &spec.structure, spec.shape)
}

/// Draws a random signal of the given structure from `rng`.
///
/// Sparse signals get a uniformly random support with N(0,1) nonzeros;
/// block-sparse ones get uniformly random active blocks filled with N(0,1)
/// entries; low-rank ones are the rank-`r` truncated SVD of a Gaussian matrix.
pub fn sample_signal_with<R: Rng + ?Sized>(
    rng: &mut R,
    structure: &Structure,
    shape: SignalShape,
) -> Result<DVector<f64>> {
    match (structure, shape) {
        (Structure::Sparse { s }, SignalShape::Vector(n)) => {
            if *s > n {
                return invalid(format!("sparsity {s} exceeds dimension {n}"));
            }
            let mut x = DVector::zeros(n);
            for i in index::sample(rng, n, *s) {
                x[i] = rng.sample(StandardNormal);
            }
            Ok(x)
        }
        (Structure::BlockSparse { s, partition }, SignalShape::Vector(n)) => {
            if partition.dim() != n {
                return invalid(format!(
                    "partition covers {} entries, signal has {n}",
                    partition.dim()
                ));
            }
            if *s > partition.block_count() {
                return invalid(format!(
                    "{s} active blocks requested but only {} exist",
                    partition.block_count()
                ));
            }
            let mut x = DVector::zeros(n);
            for b in index::sample(rng, partition.block_count(), *s) {
                for i in partition.block_range(b) {
                    x[i] = rng.sample(StandardNormal);
                }
            }
            Ok(x)
        }
        (Structure::LowRank { r }, SignalShape::Matrix { rows, cols }) => {
            if *r > rows.min(cols) {
                return invalid(format!("rank {r} exceeds min({rows}, {cols})"));
            }
            let g = gaussian_matrix_with(rng, rows, cols);
            if *r == rows.min(cols) {
                return Ok(linalg::to_vector(&g));
            }
            let svd = linalg::sorted_svd(&g)?;
            let mut x = DMatrix::zeros(rows, cols);
            for k in 0..*r {
                x += svd.singular_values[k] * svd.u.column(k) * svd.v.column(k).transpose();
            }
            Ok(linalg::to_vector(&x))
        }
        (structure, shape) => invalid(format!(
            "structure {structure:?} is incompatible with signal shape {shape:?}"
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bernoulli_entries_are_signs() {
        let a = sample_bernoulli_matrix(2, 2, 7).unwrap();
        assert!(a.iter().all(|&v| v == 1.0 || v == -1.0));
        assert_eq!(a, sample_bernoulli_matrix(2, 2, 7).unwrap());
    }

    #[test]
    fn bernoulli_columns_are_centered() {
        let a = sample_bernoulli_matrix(2000, 4, 11).unwrap();
        for j in 0..4 {
            let mean = a.column(j).sum() / 2000.0;
            assert!(mean.abs() < 0.1, "column {j} mean {mean}");
        }
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(sample_bernoulli_matrix(0, 3, 1).is_err());
        assert!(sample_gaussian_matrix(3, 0, 1).is_err());
    }

    #[test]
    fn gaussian_moments_and_determinism() {
        let a = sample_gaussian_matrix(100, 100, 3).unwrap();
        let mean = a.sum() / 1e4;
        let var = a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (1e4 - 1.0);
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
        assert_eq!(a, sample_gaussian_matrix(100, 100, 3).unwrap());
        let one = sample_gaussian_matrix(1, 1, 5).unwrap();
        assert!(one[(0, 0)].is_finite());
    }

    #[test]
    fn sensing_operator_reads_inner_products() {
        let mut e11 = DMatrix::zeros(2, 3);
        e11[(0, 0)] = 1.0;
        let other = DMatrix::from_fn(2, 3, |i, j| (i + 2 * j) as f64);
        let op = make_matrix_sensing_operator(&[e11.clone(), other]).unwrap();
        let x = DMatrix::from_fn(2, 3, |i, j| 1.0 + i as f64 - 0.5 * j as f64);
        let y = op.forward(&linalg::to_vector(&x));
        assert_eq!(y[0], x[(0, 0)]);
        let back = op.adjoint(&DVector::from_vec(vec![1.0, 0.0]));
        assert_eq!(linalg::to_matrix(&back, 2, 3), e11);
    }

    #[test]
    fn sensing_operator_rejects_mixed_shapes() {
        let err = make_matrix_sensing_operator(&[DMatrix::zeros(2, 2), DMatrix::zeros(3, 2)]);
        assert!(err.is_err());
        assert!(make_matrix_sensing_operator(&[]).is_err());
    }

    #[test]
    fn operator_norm_of_diagonal_maps() {
        let op = MeasurementOperator::dense(DMatrix::identity(3, 3) * 2.0).unwrap();
        let est = operator_norm(&op, DEFAULT_NORM_ITERS, DEFAULT_NORM_TOL);
        assert!((est.value - 2.0).abs() < 1e-6);
        let op = MeasurementOperator::dense(DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0])))
            .unwrap();
        let est = operator_norm(&op, DEFAULT_NORM_ITERS, DEFAULT_NORM_TOL);
        assert!((est.value - 3.0).abs() < 3e-6);
        assert!(est.converged);
    }

    #[test]
    fn operator_norm_matches_svd() {
        let a = sample_gaussian_matrix(20, 50, 21).unwrap();
        let exact = linalg::spectral_norm(&a);
        let op = MeasurementOperator::dense(a).unwrap();
        let est = operator_norm(&op, DEFAULT_NORM_ITERS, DEFAULT_NORM_TOL);
        assert!((est.value - exact).abs() <= 1e-6 * exact, "{} vs {exact}", est.value);
    }

    #[test]
    fn sparse_signal_cardinality() {
        let spec = SignalSpec {
            structure: Structure::Sparse { s: 4 },
            shape: SignalShape::Vector(16),
            seed: 9,
        };
        let x = sample_signal(&spec).unwrap();
        assert_eq!(x.iter().filter(|v| **v != 0.0).count(), 4);
        let zero = SignalSpec { structure: Structure::Sparse { s: 0 }, ..spec.clone() };
        assert_eq!(sample_signal(&zero).unwrap(), DVector::zeros(16));
        let bad = SignalSpec { structure: Structure::Sparse { s: 17 }, ..spec };
        assert!(sample_signal(&bad).is_err());
    }

    #[test]
    fn block_signal_has_at_most_s_blocks() {
        let partition = BlockPartition::new(12, 3).unwrap();
        let spec = SignalSpec {
            structure: Structure::BlockSparse { s: 2, partition: partition.clone() },
            shape: SignalShape::Vector(12),
            seed: 4,
        };
        let x = sample_signal(&spec).unwrap();
        let active = (0..partition.block_count())
            .filter(|&b| partition.block_range(b).any(|i| x[i] != 0.0))
            .count();
        assert!(active <= 2 && active > 0);
    }

    #[test]
    fn low_rank_signal_rank_and_full_rank_identity() {
        let shape = SignalShape::Matrix { rows: 6, cols: 5 };
        let spec = SignalSpec { structure: Structure::LowRank { r: 2 }, shape, seed: 8 };
        let x = linalg::to_matrix(&sample_signal(&spec).unwrap(), 6, 5);
        let sv = linalg::singular_values(&x);
        assert!(sv[2] < 1e-8 * sv[0]);
        assert!(sv[1] > 1e-3);

        let full = SignalSpec { structure: Structure::LowRank { r: 5 }, shape, seed: 8 };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = gaussian_matrix_with(&mut rng, 6, 5);
        let x = linalg::to_matrix(&sample_signal(&full).unwrap(), 6, 5);
        assert!((x - g).norm() < 1e-10);
        let too_big = SignalSpec { structure: Structure::LowRank { r: 6 }, shape, seed: 8 };
        assert!(sample_signal(&too_big).is_err());
    }

    #[test]
    fn streams_are_independent_and_reproducible() {
        let a: u64 = stream_rng(1, 5).random();
        let b: u64 = stream_rng(1, 6).random();
        assert_ne!(a, b);
        assert_eq!(a, stream_rng(1, 5).random::<u64>());
    }
}
