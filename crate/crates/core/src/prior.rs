// SPDX-License-Identifier: Apache-2.0

//! Turning a raw prior signal into a better-behaved shift.
//!
//! A prior `phi` that resembles the signal is most useful through its
//! support (or dominant blocks, or dominant singular subspaces), not its
//! magnitudes. These helpers keep the top part of `phi` and replace it by a
//! unit-direction payload scaled by `kappa < 1`, which always keeps the
//! correlation-maximizing program bounded.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ensembles::SignalShape;
use crate::error::{invalid, Result};
use crate::linalg;
use crate::proximal::{BlockPartition, PriorShift, StructureKind};

/// A shift built from a prior by one of the improvement strategies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImprovedShift {
    pub shift: PriorShift,
    pub kappa: f64,
    /// Sparsity, kept block count, or rank actually applied.
    pub level: usize,
    /// Whether `level` came from the stable-level estimator.
    pub estimated: bool,
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(kappa > 0.0 && kappa < 1.0) {
        return invalid(format!("kappa must lie in (0, 1), got {kappa}"));
    }
    Ok(())
}

fn check_nonzero(phi: &DVector<f64>) -> Result<()> {
    if phi.iter().any(|v| !v.is_finite()) {
        return invalid("prior contains non-finite entries");
    }
    if phi.iter().all(|v| *v == 0.0) {
        return invalid("prior is zero");
    }
    Ok(())
}

fn rounded_clamped(ratio: f64, max: usize) -> usize {
    (ratio.round() as usize).clamp(1, max)
}

/// Indices of the `k` largest scores; ties go to the lower index.
fn top_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// `round(||phi||_1^2 / ||phi||_2^2)`, clamped to `[1, n]`.
pub fn estimate_sparsity(phi: &DVector<f64>) -> Result<usize> {
    check_nonzero(phi)?;
    let l1 = phi.lp_norm(1);
    Ok(rounded_clamped(l1 * l1 / phi.norm_squared(), phi.len()))
}

/// `kappa * sign(phi)` on the `s` largest-magnitude entries.
pub fn improve_sparse(phi: &DVector<f64>, s: Option<usize>, kappa: f64) -> Result<ImprovedShift> {
    check_kappa(kappa)?;
    check_nonzero(phi)?;
    let (s, estimated) = match s {
        Some(s) if s == 0 || s > phi.len() => return invalid(format!("sparsity {s} out of range 1..={}", phi.len())),
        Some(s) => (s, false),
        None => (estimate_sparsity(phi)?, true),
    };
    let mags: Vec<f64> = phi.iter().map(|v| v.abs()).collect();
    let mut payload = DVector::zeros(phi.len());
    for i in top_indices(&mags, s) {
        if phi[i] != 0.0 {
            payload[i] = kappa * phi[i].signum();
        }
    }
    Ok(ImprovedShift { shift: PriorShift::sparse(payload)?, kappa, level: s, estimated })
}

/// `round(||phi||_{2,1}^2 / ||phi||_2^2)`, clamped to `[1, l]`.
pub fn estimate_block_count(phi: &DVector<f64>, part: &BlockPartition) -> Result<usize> {
    if phi.len() != part.dim() {
        return invalid("prior length does not match the partition");
    }
    check_nonzero(phi)?;
    let mixed = part.mixed_norm(phi);
    Ok(rounded_clamped(mixed * mixed / phi.norm_squared(), part.block_count()))
}

/// Keeps the `l_keep` blocks of largest norm as unit directions times `kappa`.
pub fn improve_block(
    phi: &DVector<f64>,
    part: &BlockPartition,
    l_keep: Option<usize>,
    kappa: f64,
) -> Result<ImprovedShift> {
    check_kappa(kappa)?;
    if phi.len() != part.dim() {
        return invalid("prior length does not match the partition");
    }
    check_nonzero(phi)?;
    let (l, estimated) = match l_keep {
        Some(l) if l == 0 || l > part.block_count() => {
            return invalid(format!("block count {l} out of range 1..={}", part.block_count()))
        }
        Some(l) => (l, false),
        None => (estimate_block_count(phi, part)?, true),
    };
    let norms: Vec<f64> = (0..part.block_count()).map(|b| part.block_norm(phi, b)).collect();
    let mut payload = DVector::zeros(phi.len());
    for b in top_indices(&norms, l) {
        if norms[b] > 0.0 {
            let r = part.block_range(b);
            let dir = phi.rows_range(r.clone()) * (kappa / norms[b]);
            payload.rows_range_mut(r).copy_from(&dir);
        }
    }
    Ok(ImprovedShift { shift: PriorShift::block(payload)?, kappa, level: l, estimated })
}

/// `round(||Phi||_F^2 / ||Phi||^2)`, clamped to `[1, min(n1, n2)]`.
pub fn estimate_rank(phi: &DMatrix<f64>) -> Result<usize> {
    let flat = linalg::to_vector(phi);
    check_nonzero(&flat)?;
    let top = linalg::spectral_norm(phi);
    Ok(rounded_clamped(phi.norm_squared() / (top * top), phi.nrows().min(phi.ncols())))
}

/// `kappa * U_r V_r^T` from the leading singular pairs of `Phi`.
pub fn improve_lowrank(phi: &DMatrix<f64>, r: Option<usize>, kappa: f64) -> Result<ImprovedShift> {
    check_kappa(kappa)?;
    check_nonzero(&linalg::to_vector(phi))?;
    let max_rank = phi.nrows().min(phi.ncols());
    let (r, estimated) = match r {
        Some(r) if r == 0 || r > max_rank => return invalid(format!("rank {r} out of range 1..={max_rank}")),
        Some(r) => (r, false),
        None => (estimate_rank(phi)?, true),
    };
    let svd = linalg::sorted_svd(phi)?;
    let payload = svd.u.columns(0, r) * svd.v.columns(0, r).transpose() * kappa;
    Ok(ImprovedShift { shift: PriorShift::low_rank(&payload)?, kappa, level: r, estimated })
}

/// Dispatches on structure; `level` is `s`, `l`, or `r` when known.
pub fn improve(
    phi: &DVector<f64>,
    shape: SignalShape,
    structure: StructureKind,
    partition: Option<&BlockPartition>,
    level: Option<usize>,
    kappa: f64,
) -> Result<ImprovedShift> {
    match structure {
        StructureKind::Sparse => improve_sparse(phi, level, kappa),
        StructureKind::Block => match partition {
            Some(part) => improve_block(phi, part, level, kappa),
            None => invalid("block improvement needs a block size"),
        },
        StructureKind::LowRank => match shape {
            SignalShape::Matrix { rows, cols } if rows * cols == phi.len() => {
                improve_lowrank(&linalg::to_matrix(phi, rows, cols), level, kappa)
            }
            _ => invalid("low-rank improvement needs a matrix prior"),
        },
    }
}
