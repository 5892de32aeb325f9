// SPDX-License-Identifier: Apache-2.0

//! Closed-form proximal operators for the recovery objectives and the
//! projection onto the measurement-fidelity ball.
//!
//! Every prox here takes the primal step `tau` of the splitting solver and
//! returns `argmin_x tau * f(x) + 0.5 * ||x - v||^2`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ensembles::SignalShape;
use crate::error::{invalid, Result};
use crate::linalg;

/// Partition of `0..n` into `l` contiguous blocks of equal size `k`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    dim: usize,
    block_size: usize,
}

impl BlockPartition {
    pub fn new(dim: usize, block_size: usize) -> Result<Self> {
        if block_size == 0 || dim == 0 || dim % block_size != 0 {
            return invalid(format!(
                "block size {block_size} does not evenly partition dimension {dim}"
            ));
        }
        Ok(Self { dim, block_size })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `k`
    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// `l`
    pub fn block_count(&self) -> usize {
        self.dim / self.block_size
    }

    pub fn block_range(&self, b: usize) -> Range<usize> {
        b * self.block_size..(b + 1) * self.block_size
    }

    pub fn block_norm(&self, x: &DVector<f64>, b: usize) -> f64 {
        x.rows_range(self.block_range(b)).norm()
    }

    /// `||x||_{2,1}`
    pub fn mixed_norm(&self, x: &DVector<f64>) -> f64 {
        (0..self.block_count()).map(|b| self.block_norm(x, b)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureKind {
    Sparse,
    Block,
    LowRank,
}

/// The product `lambda * phi` (or `lambda * Phi`), the only way prior
/// information enters the correlation-maximizing programs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorShift {
    payload: DVector<f64>,
    shape: SignalShape,
    structure: StructureKind,
}

impl PriorShift {
    pub fn new(payload: DVector<f64>, shape: SignalShape, structure: StructureKind) -> Result<Self> {
        if payload.len() != shape.len() {
            return invalid(format!(
                "shift has {} entries but the signal space has dimension {}",
                payload.len(),
                shape.len()
            ));
        }
        if payload.iter().any(|v| !v.is_finite()) {
            return invalid("shift payload must be finite");
        }
        let matrix_shape = matches!(shape, SignalShape::Matrix { .. });
        if matrix_shape != (structure == StructureKind::LowRank) {
            return invalid(format!("structure {structure:?} does not match shape {shape:?}"));
        }
        Ok(Self { payload, shape, structure })
    }

    pub fn sparse(payload: DVector<f64>) -> Result<Self> {
        let n = payload.len();
        Self::new(payload, SignalShape::Vector(n), StructureKind::Sparse)
    }

    pub fn block(payload: DVector<f64>) -> Result<Self> {
        let n = payload.len();
        Self::new(payload, SignalShape::Vector(n), StructureKind::Block)
    }

    pub fn low_rank(payload: &DMatrix<f64>) -> Result<Self> {
        let (rows, cols) = payload.shape();
        Self::new(
            linalg::to_vector(payload),
            SignalShape::Matrix { rows, cols },
            StructureKind::LowRank,
        )
    }

    /// Builds `lambda * phi` from its factors.
    pub fn from_factors(lambda: f64, phi: &DVector<f64>, shape: SignalShape, structure: StructureKind) -> Result<Self> {
        Self::new(phi * lambda, shape, structure)
    }

    pub fn zeros(shape: SignalShape, structure: StructureKind) -> Result<Self> {
        Self::new(DVector::zeros(shape.len()), shape, structure)
    }

    pub fn payload(&self) -> &DVector<f64> {
        &self.payload
    }

    pub fn shape(&self) -> SignalShape {
        self.shape
    }

    pub fn structure(&self) -> StructureKind {
        self.structure
    }

    pub fn as_matrix(&self) -> Option<DMatrix<f64>> {
        self.shape
            .matrix_dims()
            .map(|(rows, cols)| linalg::to_matrix(&self.payload, rows, cols))
    }

    pub fn is_zero(&self) -> bool {
        self.payload.iter().all(|v| *v == 0.0)
    }
}

#[inline]
fn shrink(v: f64, tau: f64) -> f64 {
    if v > tau {
        v - tau
    } else if v < -tau {
        v + tau
    } else {
        0.0
    }
}

/// Componentwise `sign(v_i) * max(|v_i| - tau, 0)`.
pub fn soft_threshold(v: &DVector<f64>, tau: f64) -> DVector<f64> {
    v.map(|vi| shrink(vi, tau))
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return invalid(format!("{what} has length {got}, expected {want}"));
    }
    Ok(())
}

/// Prox of `||x||_1 - <x, shift>`. The linear term only translates the prox
/// argument, so this is a soft threshold of `v + tau * shift`.
pub fn prox_mc_l1(v: &DVector<f64>, tau: f64, shift: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("shift", shift.len(), v.len())?;
    Ok(v.zip_map(shift, |vi, si| shrink(vi + tau * si, tau)))
}

/// Prox of `||x||_{2,1} - <x, shift>`: block soft threshold of `v + tau * shift`.
pub fn prox_mc_block(
    v: &DVector<f64>,
    tau: f64,
    shift: &DVector<f64>,
    part: &BlockPartition,
) -> Result<DVector<f64>> {
    check_len("shift", shift.len(), v.len())?;
    check_len("partition", part.dim(), v.len())?;
    let mut out = v.zip_map(shift, |vi, si| vi + tau * si);
    for b in 0..part.block_count() {
        let range = part.block_range(b);
        let norm = out.rows_range(range.clone()).norm();
        let scale = if norm > tau { 1.0 - tau / norm } else { 0.0 };
        out.rows_range_mut(range).scale_mut(scale);
    }
    Ok(out)
}

/// Prox of `||X||_* - <X, shift>`: singular value thresholding of
/// `V + tau * shift` using a full dense SVD.
pub fn prox_mc_nuclear(v: &DMatrix<f64>, tau: f64, shift: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if v.shape() != shift.shape() {
        return invalid(format!("shift shape {:?} differs from {:?}", shift.shape(), v.shape()));
    }
    let w = v + shift * tau;
    let svd = linalg::sorted_svd(&w)?;
    let mut out = DMatrix::zeros(v.nrows(), v.ncols());
    for (k, &sigma) in svd.singular_values.iter().enumerate() {
        let kept = sigma - tau;
        if kept <= 0.0 {
            break;
        }
        out += kept * svd.u.column(k) * svd.v.column(k).transpose();
    }
    Ok(out)
}

/// Scalar prox of `|x| + lambda * |x - phi|` with step `tau`.
///
/// The objective is piecewise linear with kinks at `a = min(0, phi)` and
/// `b = max(0, phi)`. The minimizer lies in one of five places: left of `a`,
/// at `a`, strictly between, at `b`, or right of `b`.
fn prox_l1l1_scalar(v: f64, tau: f64, lambda: f64, phi: f64) -> f64 {
    let (a, b) = if phi < 0.0 { (phi, 0.0) } else { (0.0, phi) };
    let full = tau * (1.0 + lambda);

    let left = v + full;
    if left < a {
        return left;
    }
    let right = v - full;
    if right > b {
        return right;
    }
    if b > a {
        // Between the kinks the two absolute values have opposite signs.
        let slope = if phi > 0.0 { 1.0 - lambda } else { lambda - 1.0 };
        let mid = v - tau * slope;
        if mid > a && mid < b {
            return mid;
        }
    }
    // Pinned at a kink; the objective is strictly convex so comparing the
    // two candidates picks the one whose subdifferential contains v.
    let cost = |x: f64| tau * (x.abs() + lambda * (x - phi).abs()) + 0.5 * (x - v).powi(2);
    if cost(a) <= cost(b) {
        a
    } else {
        b
    }
}

/// Prox of `||x||_1 + lambda * ||x - phi||_1`.
pub fn prox_l1l1(v: &DVector<f64>, tau: f64, lambda: f64, phi: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("prior", phi.len(), v.len())?;
    Ok(v.zip_map(phi, |vi, pi| prox_l1l1_scalar(vi, tau, lambda, pi)))
}

/// Prox of `||x||_1 + (lambda / 2) * ||x - phi||_2^2`.
pub fn prox_l1l2(v: &DVector<f64>, tau: f64, lambda: f64, phi: &DVector<f64>) -> Result<DVector<f64>> {
    check_len("prior", phi.len(), v.len())?;
    let denom = 1.0 + tau * lambda;
    let thresh = tau / denom;
    Ok(v.zip_map(phi, |vi, pi| shrink((vi + tau * lambda * pi) / denom, thresh)))
}

/// Euclidean projection onto `{z : ||z - center||_2 <= delta}`.
pub fn project_l2_ball(z: &DVector<f64>, center: &DVector<f64>, delta: f64) -> DVector<f64> {
    let diff = z - center;
    let norm = diff.norm();
    if norm <= delta {
        return z.clone();
    }
    if delta <= 0.0 {
        return center.clone();
    }
    center + diff * (delta / norm)
}
