// SPDX-License-Identifier: Apache-2.0

//! Gaussian-width bounds for the tangent cone of `||x||_sig - <x, shift>` at
//! the true signal.
//!
//! Everything is expressed through the shifted subdifferential
//! `D = subdiff ||x*||_sig - shift`. For each structure this module provides
//! the parameters `v = max_{w in D} ||w||^2` and `u = ||w_0||^2` at the
//! canonical element, the two closed-form bounds on `w^2(T_f ∩ S^{n-1})`,
//! the exact squared distance from a point to `t * D`, and a Monte-Carlo
//! estimate of `min_t E dist^2(g, t * D)`, which upper-bounds the squared
//! width more tightly than either closed form.

use std::f64::consts::{FRAC_2_PI, PI};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::ensembles::{gaussian_vector_with, SignalShape};
use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::proximal::{BlockPartition, PriorShift, StructureKind};

/// Relative singular-value threshold used to detect the rank of `X*`.
pub const RANK_THRESHOLD: f64 = 1e-8;
/// Equality tolerance for the closed-form origin-membership test.
const MEMBERSHIP_TOL: f64 = 1e-12;

/// `(v1, u1)` for an `s`-sparse `x_star` and shift `lambda*phi`.
pub fn sparse_params(x_star: &DVector<f64>, shift: &DVector<f64>) -> Result<(f64, f64)> {
    if x_star.len() != shift.len() {
        return invalid("signal and shift lengths differ");
    }
    if x_star.iter().all(|v| *v == 0.0) {
        return invalid("signal is zero");
    }
    let mut on = 0.0;
    let mut off_v = 0.0;
    let mut off_u = 0.0;
    for (x, s) in x_star.iter().zip(shift.iter()) {
        if *x != 0.0 {
            on += (x.signum() - s).powi(2);
        } else {
            off_v += (1.0 + s.abs()).powi(2);
            off_u += s * s;
        }
    }
    Ok((on + off_v, on + off_u))
}

/// `(bound I, bound II)` for sparse vectors.
pub fn sparse_bounds(n: usize, s: usize, v1: f64, u1: f64) -> (f64, f64) {
    let (n, s) = (n as f64, s as f64);
    let bound_i = n * (1.0 - (n / v1) * FRAC_2_PI * (1.0 - s / n).powi(2));
    let bound_ii = s + (n - s) * u1;
    (bound_i, bound_ii)
}

/// Mean of the chi distribution with `k` degrees of freedom.
pub fn chi_mean(k: usize) -> f64 {
    let k = k as f64;
    2f64.sqrt() * (ln_gamma((k + 1.0) / 2.0) - ln_gamma(k / 2.0)).exp()
}

fn active_blocks(x_star: &DVector<f64>, part: &BlockPartition) -> Vec<bool> {
    (0..part.block_count()).map(|b| part.block_norm(x_star, b) > 0.0).collect()
}

/// `(v2, u2)` for a block-sparse `x_star`.
pub fn block_params(x_star: &DVector<f64>, shift: &DVector<f64>, part: &BlockPartition) -> Result<(f64, f64)> {
    if x_star.len() != part.dim() || shift.len() != part.dim() {
        return invalid("signal, shift and partition dimensions differ");
    }
    let active = active_blocks(x_star, part);
    if !active.iter().any(|a| *a) {
        return invalid("signal is zero");
    }
    let mut on = 0.0;
    let mut off_v = 0.0;
    let mut off_u = 0.0;
    for (b, &is_active) in active.iter().enumerate() {
        let r = part.block_range(b);
        let sb = shift.rows_range(r.clone());
        if is_active {
            let xb = x_star.rows_range(r);
            on += (xb / xb.norm() - sb).norm_squared();
        } else {
            let norm = sb.norm();
            off_v += (1.0 + norm).powi(2);
            off_u += norm * norm;
        }
    }
    Ok((on + off_v, on + off_u))
}

/// `(bound I, bound II)` for block-sparse vectors with `l` blocks of size `k`,
/// `s` of them active.
pub fn block_bounds(n: usize, k: usize, l: usize, s: usize, v2: f64, u2: f64) -> Result<(f64, f64)> {
    if n != k * l || s == 0 || s > l {
        return invalid(format!("inconsistent block sizes n={n}, k={k}, l={l}, s={s}"));
    }
    let mu = chi_mean(k);
    let (nf, kf, lf, sf) = (n as f64, k as f64, l as f64, s as f64);
    let bound_i = nf * (1.0 - (lf / v2) * (mu * mu / kf) * (1.0 - sf / lf).powi(2));
    let bound_ii = kf * (sf + (lf - sf) * u2);
    Ok((bound_i, bound_ii))
}

/// `(bound I, bound II)` for an `n1 x n2` rank-`r` matrix, `n1 >= n2`.
pub fn lowrank_bounds(n1: usize, n2: usize, r: usize, v3: f64, u3: f64) -> Result<(f64, f64)> {
    if !(1 <= r && r <= n2 && n2 <= n1) {
        return invalid(format!("need 1 <= r <= n2 <= n1, got r={r}, n1={n1}, n2={n2}"));
    }
    let (n1, n2, r) = (n1 as f64, n2 as f64, r as f64);
    let c = (4.0f64 / 27.0).powi(2);
    let bound_i = n1 * n2 * (1.0 - (n2 / v3) * c * (1.0 - r / n1) * (1.0 - r / n2).powi(2));
    let spread = ((n1 - r).sqrt() + (n2 - r).sqrt()).powi(2) + 2.0;
    let bound_ii = r * (n1 + n2 - r) + u3 * spread;
    Ok((bound_i, bound_ii))
}

/// Column and row spaces of a rank-`r` matrix with their complements.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspacePair {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub u_perp: DMatrix<f64>,
    pub v_perp: DMatrix<f64>,
}

/// Orthonormal basis of the orthogonal complement of the columns of `q`.
fn complement_basis(q: &DMatrix<f64>) -> DMatrix<f64> {
    let n = q.nrows();
    let k = q.ncols();
    if k == n {
        return DMatrix::zeros(n, 0);
    }
    let proj = DMatrix::identity(n, n) - q * q.transpose();
    let eig = SymmetricEigen::new(proj);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut out = DMatrix::zeros(n, n - k);
    for (dst, &src) in idx.iter().take(n - k).enumerate() {
        out.set_column(dst, &eig.eigenvectors.column(src));
    }
    out
}

/// Detects the rank of `x_star` (or uses `rank`) and builds the projector pair.
///
/// Without an explicit rank, singular values above `RANK_THRESHOLD * sigma_1`
/// count; a kept singular value within a factor 100 of the threshold is
/// reported as ambiguous.
pub fn make_subspace_pair(x_star: &DMatrix<f64>, rank: Option<usize>) -> Result<SubspacePair> {
    let svd = linalg::sorted_svd(x_star)?;
    let sv = &svd.singular_values;
    let top = sv.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return invalid("matrix is zero");
    }
    let r = match rank {
        Some(r) => {
            if r == 0 || r > sv.len() {
                return invalid(format!("rank {r} out of range 1..={}", sv.len()));
            }
            r
        }
        None => {
            let cut = RANK_THRESHOLD * top;
            let r = sv.iter().filter(|s| **s > cut).count();
            if sv[r - 1] < 100.0 * cut {
                let next = if r < sv.len() { sv[r] } else { 0.0 };
                return invalid(format!(
                    "ambiguous rank: sigma_{r} = {:.3e}, sigma_{} = {next:.3e}, sigma_1 = {top:.3e}",
                    sv[r - 1],
                    r + 1
                ));
            }
            r
        }
    };
    let u = svd.u.columns(0, r).into_owned();
    let v = svd.v.columns(0, r).into_owned();
    let u_perp = complement_basis(&u);
    let v_perp = complement_basis(&v);
    Ok(SubspacePair { u, v, u_perp, v_perp })
}

impl SubspacePair {
    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    /// `U U^T M + M V V^T - U U^T M V V^T`
    pub fn project_s(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let uu_m = &self.u * (self.u.transpose() * m);
        let m_vv = (m * &self.v) * self.v.transpose();
        let uu_m_vv = (&uu_m * &self.v) * self.v.transpose();
        uu_m + m_vv - uu_m_vv
    }

    /// `U' U'^T M V' V'^T`
    pub fn project_s_perp(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        &self.u_perp * self.reduce_perp(m) * self.v_perp.transpose()
    }

    /// Coordinates of `P_{S⊥}(M)` in the bases `U'`, `V'`.
    pub fn reduce_perp(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        self.u_perp.transpose() * m * &self.v_perp
    }

    pub fn uv_t(&self) -> DMatrix<f64> {
        &self.u * self.v.transpose()
    }
}

/// `(v3, u3)` for a low-rank `x_star` and shift `lambda*Phi`.
pub fn lowrank_params(x_star: &DMatrix<f64>, shift: &DMatrix<f64>, rank: Option<usize>) -> Result<(f64, f64)> {
    let shift = PriorShift::low_rank(shift)?;
    Ok(ShiftedSubdifferential::low_rank(x_star, &shift, rank)?.params())
}

/// Singular values of a small dense matrix, with closed forms for the
/// shapes the Monte-Carlo loop hits most.
fn small_singular_values(m: &DMatrix<f64>, out: &mut Vec<f64>) {
    out.clear();
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return;
    }
    if r == 1 || c == 1 {
        out.push(m.norm());
        return;
    }
    if r == 2 && c == 2 {
        let (a, b, cc, d) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
        let s1 = a * a + b * b + cc * cc + d * d;
        let det = a * d - b * cc;
        let disc = (s1 * s1 - 4.0 * det * det).max(0.0).sqrt();
        out.push(((s1 + disc) / 2.0).max(0.0).sqrt());
        out.push(((s1 - disc) / 2.0).max(0.0).sqrt());
        return;
    }
    out.extend(linalg::singular_values(m).iter().copied());
}

/// The set `subdiff ||x*||_sig - shift` for one structure, with everything
/// needed to evaluate parameters, bounds and distances.
#[derive(Debug, Clone)]
pub enum ShiftedSubdifferential {
    Sparse {
        /// `sign(x*)` on the support, zero elsewhere.
        sign: DVector<f64>,
        support: Vec<bool>,
        shift: DVector<f64>,
    },
    Block {
        /// Unit block directions of `x*` on active blocks, zero elsewhere.
        directions: DVector<f64>,
        active: Vec<bool>,
        shift: DVector<f64>,
        partition: BlockPartition,
    },
    LowRank {
        pair: SubspacePair,
        rows: usize,
        cols: usize,
        /// `U V^T - P_S(shift)`
        center: DMatrix<f64>,
        /// `P_{S⊥}(shift)` in reduced coordinates.
        perp_shift: DMatrix<f64>,
        shift: DMatrix<f64>,
    },
}

impl ShiftedSubdifferential {
    pub fn sparse(x_star: &DVector<f64>, shift: &PriorShift) -> Result<Self> {
        if x_star.len() != shift.payload().len() {
            return invalid("signal and shift lengths differ");
        }
        if x_star.iter().all(|v| *v == 0.0) {
            return invalid("signal is zero");
        }
        let support: Vec<bool> = x_star.iter().map(|v| *v != 0.0).collect();
        let sign = x_star.map(|v| if v == 0.0 { 0.0 } else { v.signum() });
        Ok(Self::Sparse { sign, support, shift: shift.payload().clone() })
    }

    pub fn block(x_star: &DVector<f64>, shift: &PriorShift, partition: &BlockPartition) -> Result<Self> {
        if x_star.len() != partition.dim() || shift.payload().len() != partition.dim() {
            return invalid("signal, shift and partition dimensions differ");
        }
        let active = active_blocks(x_star, partition);
        if !active.iter().any(|a| *a) {
            return invalid("signal is zero");
        }
        let mut directions = DVector::zeros(x_star.len());
        for (b, &on) in active.iter().enumerate() {
            if on {
                let r = partition.block_range(b);
                let xb = x_star.rows_range(r.clone());
                directions.rows_range_mut(r).copy_from(&(xb / xb.norm()));
            }
        }
        Ok(Self::Block {
            directions,
            active,
            shift: shift.payload().clone(),
            partition: partition.clone(),
        })
    }

    pub fn low_rank(x_star: &DMatrix<f64>, shift: &PriorShift, rank: Option<usize>) -> Result<Self> {
        let shift = shift
            .as_matrix()
            .ok_or_else(|| Error::InvalidArgument("low-rank geometry needs a matrix shift".into()))?;
        if shift.shape() != x_star.shape() {
            return invalid("signal and shift shapes differ");
        }
        let pair = make_subspace_pair(x_star, rank)?;
        let center = pair.uv_t() - pair.project_s(&shift);
        let perp_shift = pair.reduce_perp(&shift);
        Ok(Self::LowRank {
            rows: x_star.nrows(),
            cols: x_star.ncols(),
            pair,
            center,
            perp_shift,
            shift,
        })
    }

    /// Builds the geometry for `x_star` from a shift of any structure.
    pub fn from_signal(
        x_star: &DVector<f64>,
        shift: &PriorShift,
        partition: Option<&BlockPartition>,
        rank: Option<usize>,
    ) -> Result<Self> {
        match (shift.structure(), shift.shape()) {
            (StructureKind::Sparse, _) => Self::sparse(x_star, shift),
            (StructureKind::Block, _) => {
                let part = partition
                    .ok_or_else(|| Error::InvalidArgument("block geometry needs a partition".into()))?;
                Self::block(x_star, shift, part)
            }
            (StructureKind::LowRank, SignalShape::Matrix { rows, cols }) => {
                if x_star.len() != rows * cols {
                    return invalid("signal and shift shapes differ");
                }
                Self::low_rank(&linalg::to_matrix(x_star, rows, cols), shift, rank)
            }
            (StructureKind::LowRank, _) => invalid("low-rank shift needs a matrix shape"),
        }
    }

    pub fn structure(&self) -> StructureKind {
        match self {
            Self::Sparse { .. } => StructureKind::Sparse,
            Self::Block { .. } => StructureKind::Block,
            Self::LowRank { .. } => StructureKind::LowRank,
        }
    }

    /// Ambient dimension `n` (or `n1 * n2`).
    pub fn dim(&self) -> usize {
        match self {
            Self::Sparse { sign, .. } => sign.len(),
            Self::Block { directions, .. } => directions.len(),
            Self::LowRank { rows, cols, .. } => rows * cols,
        }
    }

    /// Sparsity `s`, number of active blocks, or rank `r`.
    pub fn level(&self) -> usize {
        match self {
            Self::Sparse { support, .. } => support.iter().filter(|b| **b).count(),
            Self::Block { active, .. } => active.iter().filter(|b| **b).count(),
            Self::LowRank { pair, .. } => pair.rank(),
        }
    }

    /// `true` when `0` is not in the shifted subdifferential.
    pub fn excludes_origin(&self) -> bool {
        match self {
            Self::Sparse { sign, support, shift } => {
                let contains = support.iter().enumerate().all(|(i, &on)| {
                    if on {
                        (shift[i] - sign[i]).abs() <= MEMBERSHIP_TOL
                    } else {
                        shift[i].abs() <= 1.0 + MEMBERSHIP_TOL
                    }
                });
                !contains
            }
            Self::Block { directions, active, shift, partition } => {
                let contains = active.iter().enumerate().all(|(b, &on)| {
                    let r = partition.block_range(b);
                    if on {
                        (shift.rows_range(r.clone()) - directions.rows_range(r)).amax() <= MEMBERSHIP_TOL
                    } else {
                        shift.rows_range(r).norm() <= 1.0 + MEMBERSHIP_TOL
                    }
                });
                !contains
            }
            Self::LowRank { center, perp_shift, .. } => {
                let contains = center.amax() <= MEMBERSHIP_TOL
                    && linalg::spectral_norm(perp_shift) <= 1.0 + MEMBERSHIP_TOL;
                !contains
            }
        }
    }

    /// `(v, u)`: the largest squared norm over the set, and the squared norm
    /// of the element built from the sign / block directions / `U V^T`.
    pub fn params(&self) -> (f64, f64) {
        match self {
            Self::Sparse { sign, support, shift } => {
                let mut on = 0.0;
                let mut off_v = 0.0;
                let mut off_u = 0.0;
                for i in 0..sign.len() {
                    if support[i] {
                        on += (sign[i] - shift[i]).powi(2);
                    } else {
                        off_v += (1.0 + shift[i].abs()).powi(2);
                        off_u += shift[i] * shift[i];
                    }
                }
                (on + off_v, on + off_u)
            }
            Self::Block { directions, active, shift, partition } => {
                let mut on = 0.0;
                let mut off_v = 0.0;
                let mut off_u = 0.0;
                for (b, &is_active) in active.iter().enumerate() {
                    let r = partition.block_range(b);
                    if is_active {
                        on += (directions.rows_range(r.clone()) - shift.rows_range(r)).norm_squared();
                    } else {
                        let norm = shift.rows_range(r).norm();
                        off_v += (1.0 + norm).powi(2);
                        off_u += norm * norm;
                    }
                }
                (on + off_v, on + off_u)
            }
            Self::LowRank { center, perp_shift, .. } => {
                let on = center.norm_squared();
                let d = perp_shift.nrows().min(perp_shift.ncols());
                let sv = linalg::singular_values(perp_shift);
                let off_v: f64 = (0..d).map(|i| (sv.get(i).copied().unwrap_or(0.0) + 1.0).powi(2)).sum();
                (on + off_v, on + perp_shift.norm_squared())
            }
        }
    }

    /// Closed-form `(bound I, bound II)` on the squared Gaussian width.
    pub fn bounds(&self) -> Result<(f64, f64)> {
        let (v, u) = self.params();
        match self {
            Self::Sparse { .. } => Ok(sparse_bounds(self.dim(), self.level(), v, u)),
            Self::Block { partition, .. } => block_bounds(
                partition.dim(),
                partition.block_size(),
                partition.block_count(),
                self.level(),
                v,
                u,
            ),
            Self::LowRank { rows, cols, .. } => {
                lowrank_bounds(*rows.max(cols), *rows.min(cols), self.level(), v, u)
            }
        }
    }

    /// Exact `dist^2(g, t * D)`; `g` is vectorized column-major for matrices.
    pub fn dist_sq(&self, g: &DVector<f64>, t: f64) -> f64 {
        match self {
            Self::Sparse { sign, support, shift } => {
                let mut total = 0.0;
                for i in 0..g.len() {
                    if support[i] {
                        total += (g[i] - t * (sign[i] - shift[i])).powi(2);
                    } else {
                        let lo = t * (-1.0 - shift[i]);
                        let hi = t * (1.0 - shift[i]);
                        let d = (lo - g[i]).max(g[i] - hi).max(0.0);
                        total += d * d;
                    }
                }
                total
            }
            Self::Block { directions, active, shift, partition } => {
                let mut total = 0.0;
                for (b, &is_active) in active.iter().enumerate() {
                    let r = partition.block_range(b);
                    let gb = g.rows_range(r.clone());
                    let sb = shift.rows_range(r.clone());
                    if is_active {
                        total += (gb - (directions.rows_range(r) - sb) * t).norm_squared();
                    } else {
                        let d = ((gb + sb * t).norm() - t).max(0.0);
                        total += d * d;
                    }
                }
                total
            }
            Self::LowRank { rows, cols, .. } => {
                let gm = linalg::to_matrix(g, *rows, *cols);
                self.prepare_lowrank(&gm).dist_sq(self, t, &mut Vec::new())
            }
        }
    }

    fn prepare_lowrank(&self, g: &DMatrix<f64>) -> LowRankSample {
        match self {
            Self::LowRank { pair, center, .. } => {
                let reduced = pair.reduce_perp(g);
                let on_s = g.norm_squared() - reduced.norm_squared();
                LowRankSample { on_s, cross: g.dot(center), reduced }
            }
            _ => unreachable!("low-rank sample for non-matrix geometry"),
        }
    }

    /// Optimizer of the quadratic upper bound behind bound I; a good bracket
    /// center for `min_t E dist^2`.
    pub fn heuristic_t(&self) -> f64 {
        let (v, _) = self.params();
        let n = self.dim() as f64;
        let s = self.level() as f64;
        match self {
            Self::Sparse { .. } => FRAC_2_PI.sqrt() * (n - s) / v,
            Self::Block { partition, .. } => {
                (partition.block_count() as f64 - s) * chi_mean(partition.block_size()) / v
            }
            Self::LowRank { rows, cols, .. } => {
                let (n1, n2) = (*rows.max(cols) as f64, *rows.min(cols) as f64);
                // E||P_{S⊥}(G)||_* is close to (n2 - r) * sqrt(n1 - r) times
                // the semicircle mean 8/(3 pi); the 4/27 lower bound of the
                // closed form sits far to the left of the optimum.
                8.0 / (3.0 * PI) * (n2 - s) * (n1 - s).sqrt() / v
            }
        }
    }

    /// A uniformly-ish random element of the shifted subdifferential.
    pub fn random_element<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match self {
            Self::Sparse { sign, support, shift } => DVector::from_fn(sign.len(), |i, _| {
                if support[i] {
                    sign[i] - shift[i]
                } else {
                    rng.random_range(-1.0..=1.0) - shift[i]
                }
            }),
            Self::Block { directions, active, shift, partition } => {
                let mut w = directions.clone();
                for (b, &on) in active.iter().enumerate() {
                    if !on {
                        let k = partition.block_size();
                        let dir = gaussian_vector_with(rng, k);
                        let radius = rng.random::<f64>().powf(1.0 / k as f64);
                        let theta = &dir * (radius / dir.norm());
                        w.rows_range_mut(partition.block_range(b)).copy_from(&theta);
                    }
                }
                w - shift
            }
            Self::LowRank { pair, shift, .. } => {
                let (d1, d2) = (pair.u_perp.ncols(), pair.v_perp.ncols());
                let mut z = pair.uv_t() - shift;
                if d1 > 0 && d2 > 0 {
                    let w = DMatrix::from_fn(d1, d2, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let scale = rng.random::<f64>() / linalg::spectral_norm(&w);
                    z += &pair.u_perp * (w * scale) * pair.v_perp.transpose();
                }
                linalg::to_vector(&z)
            }
        }
    }
}

/// Per-sample quantities for the low-rank distance, independent of `t`.
#[derive(Debug, Clone)]
struct LowRankSample {
    /// `||P_S(G)||_F^2`
    on_s: f64,
    /// `<G, U V^T - P_S(shift)>`
    cross: f64,
    /// `U'^T G V'`
    reduced: DMatrix<f64>,
}

impl LowRankSample {
    fn dist_sq(&self, geom: &ShiftedSubdifferential, t: f64, sv: &mut Vec<f64>) -> f64 {
        let ShiftedSubdifferential::LowRank { center, perp_shift, .. } = geom else {
            unreachable!()
        };
        let on = self.on_s - 2.0 * t * self.cross + t * t * center.norm_squared();
        let moved = &self.reduced + perp_shift * t;
        small_singular_values(&moved, sv);
        let off: f64 = sv.iter().map(|s| (s - t).max(0.0).powi(2)).sum();
        on.max(0.0) + off
    }
}

/// Monte-Carlo width estimates from one set of Gaussian samples.
///
/// `value` is `E dist^2(g, cone(D))`: every sample is moved to its own best
/// scale `t`. It never exceeds either closed-form bound (bound II itself
/// picks `t = ||g_{I^c}||` per sample). `common_t_value` is
/// `min_t E dist^2(g, t * D)` with one scale shared by all samples; it is
/// never below `value` and never above bound I, but can exceed bound II.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WidthEstimate {
    pub value: f64,
    pub std_error: f64,
    pub common_t_value: f64,
    pub common_t_std_error: f64,
    /// Minimizer of the shared-scale mean.
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WidthOptions {
    pub grid_points: usize,
    /// The coarse grid spans `[0, grid_span * heuristic_t]`.
    pub grid_span: f64,
    /// Explicit grid of scales; disables all refinement, and per-sample
    /// minimization is restricted to the grid.
    pub t_grid: Option<Vec<f64>>,
    pub golden_iters: usize,
}

impl Default for WidthOptions {
    fn default() -> Self {
        Self { grid_points: 64, grid_span: 4.0, t_grid: None, golden_iters: 60 }
    }
}

enum Samples {
    Vectors(Vec<DVector<f64>>),
    Matrices(Vec<LowRankSample>),
}

/// Evaluates `dist^2` over a fixed sample set.
struct Evaluator<'a> {
    geom: &'a ShiftedSubdifferential,
    samples: Samples,
}

fn mean_and_se(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Golden-section search of a unimodal `f` on `[lo, hi]`; returns the best
/// point seen together with its value.
fn golden_section(f: impl Fn(f64) -> f64, lo: f64, hi: f64, iters: usize) -> (f64, f64) {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..iters {
        if (b - a) <= 1e-10 * (1.0 + b) {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    let mut best = if fc <= fd { (c, fc) } else { (d, fd) };
    for t in [lo, hi] {
        let v = f(t);
        if v < best.1 {
            best = (t, v);
        }
    }
    best
}

/// Minimizes a convex function of `t >= 0` by doubling until it turns up,
/// then golden-section search on the last bracket.
fn minimize_convex_ray(f: impl Fn(f64) -> f64, start: f64, iters: usize) -> f64 {
    let f0 = f(0.0);
    let mut prev = (0.0, f0);
    let mut cur = (start, f(start));
    let mut lo = 0.0;
    let mut steps = 0;
    while cur.1 < prev.1 && steps < 60 {
        lo = prev.0;
        prev = cur;
        let t = cur.0 * 2.0;
        cur = (t, f(t));
        steps += 1;
    }
    golden_section(&f, lo, cur.0, iters).1.min(f0)
}

impl Evaluator<'_> {
    fn sample_count(&self) -> usize {
        match &self.samples {
            Samples::Vectors(v) => v.len(),
            Samples::Matrices(m) => m.len(),
        }
    }

    /// `dist^2(g_i, t_i * D)` with a per-sample function of the sample index.
    fn per_sample<F>(&self, f: F) -> Vec<f64>
    where
        F: Fn(&dyn Fn(f64) -> f64) -> f64 + Sync,
    {
        match &self.samples {
            Samples::Vectors(gs) => gs.par_iter().map(|g| f(&|t| self.geom.dist_sq(g, t))).collect(),
            Samples::Matrices(ss) => ss
                .par_iter()
                .map_init(Vec::new, |sv, s| {
                    let cell = std::cell::RefCell::new(std::mem::take(sv));
                    let out = f(&|t| s.dist_sq(self.geom, t, &mut cell.borrow_mut()));
                    *sv = cell.into_inner();
                    out
                })
                .collect(),
        }
    }

    fn values(&self, t: f64) -> Vec<f64> {
        self.per_sample(|d| d(t))
    }

    fn mean(&self, t: f64) -> f64 {
        let vals = self.values(t);
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Monte-Carlo width bounds from `n_samples` Gaussian draws seeded by `seed`.
///
/// The same samples serve every `t`. The shared-scale optimum is found with
/// a coarse grid over `[0, grid_span * heuristic_t]` (widened while the
/// minimum sits on its right edge) refined by golden-section search; the
/// per-sample optimum uses a doubling bracket and golden-section search.
/// The returned value is deterministic for a given seed, independent of
/// thread count.
pub fn optimal_width_bound(
    geom: &ShiftedSubdifferential,
    n_samples: usize,
    seed: u64,
    options: &WidthOptions,
) -> Result<WidthEstimate> {
    if n_samples < 2 {
        return invalid("need at least two samples");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = geom.dim();
    let samples = match geom {
        ShiftedSubdifferential::LowRank { rows, cols, .. } => Samples::Matrices(
            (0..n_samples)
                .map(|_| {
                    let g = linalg::to_matrix(&gaussian_vector_with(&mut rng, n), *rows, *cols);
                    geom.prepare_lowrank(&g)
                })
                .collect(),
        ),
        _ => Samples::Vectors((0..n_samples).map(|_| gaussian_vector_with(&mut rng, n)).collect()),
    };
    let eval = Evaluator { geom, samples };
    debug_assert_eq!(eval.sample_count(), n_samples);

    if let Some(grid) = &options.t_grid {
        if grid.is_empty() || grid.iter().any(|t| !(*t >= 0.0)) {
            return invalid("t grid must be nonempty and nonnegative");
        }
        let (t, _) = grid
            .iter()
            .map(|&t| (t, eval.mean(t)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("nonempty grid");
        let (common_t_value, common_t_std_error) = mean_and_se(&eval.values(t));
        let per = eval.per_sample(|d| grid.iter().map(|&t| d(t)).fold(f64::INFINITY, f64::min));
        let (value, std_error) = mean_and_se(&per);
        return Ok(WidthEstimate { value, std_error, common_t_value, common_t_std_error, t });
    }

    let heuristic = geom.heuristic_t().max(1e-3);
    let points = options.grid_points.max(3);
    let mut span = options.grid_span * heuristic;
    let (lo, hi) = loop {
        let grid: Vec<f64> = (0..points).map(|i| span * i as f64 / (points - 1) as f64).collect();
        let means: Vec<f64> = grid.iter().map(|&t| eval.mean(t)).collect();
        let best = (0..points)
            .min_by(|&a, &b| means[a].total_cmp(&means[b]))
            .expect("nonempty grid");
        if best + 1 < points || span > 1e6 {
            break (grid[best.saturating_sub(1)], grid[(best + 1).min(points - 1)]);
        }
        // Minimum on the right edge: widen the grid.
        span *= 4.0;
    };
    let (t, _) = golden_section(|t| eval.mean(t), lo, hi, options.golden_iters);
    let (common_t_value, common_t_std_error) = mean_and_se(&eval.values(t));

    let iters = options.golden_iters;
    let per = eval.per_sample(|d| minimize_convex_ray(d, heuristic, iters));
    let (value, std_error) = mean_and_se(&per);
    Ok(WidthEstimate { value, std_error, common_t_value, common_t_std_error, t })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundOptions {
    /// Number of Monte-Carlo samples; `0` skips the estimate.
    pub mc_samples: usize,
    pub seed: u64,
    pub width: WidthOptions,
}

impl Default for BoundOptions {
    fn default() -> Self {
        Self { mc_samples: 0, seed: 0, width: WidthOptions::default() }
    }
}

/// Squared-width bounds for one (signal, shift) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub structure: StructureKind,
    pub v: f64,
    pub u: f64,
    pub bound_i: f64,
    pub bound_ii: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimal_mc: Option<WidthEstimate>,
    /// Smallest of the computed bounds.
    pub width_sq_estimate: f64,
    /// Quantity comparable to a measurement count up to the unknown absolute
    /// constants of the recovery guarantee; equal to `width_sq_estimate`.
    pub measurement_proxy: f64,
}

impl BoundReport {
    pub const CSV_HEADER: &'static str = "shift,v,u,bound_I,bound_II,result";
    pub const CSV_HEADER_MC: &'static str = "shift,v,u,bound_I,bound_II,result,optimal_mc,std_error";

    pub fn csv_row(&self) -> String {
        let mut row = format!(
            "{},{},{},{},{},{}",
            self.label.as_deref().unwrap_or(""),
            self.v,
            self.u,
            self.bound_i,
            self.bound_ii,
            self.width_sq_estimate
        );
        if let Some(mc) = &self.optimal_mc {
            row.push_str(&format!(",{},{}", mc.value, mc.std_error));
        }
        row
    }
}

/// Assembles parameters, both closed-form bounds and (optionally) the
/// Monte-Carlo optimum. Fails when `0` lies in the shifted subdifferential,
/// where none of the bounds apply.
pub fn bound_report(geom: &ShiftedSubdifferential, options: &BoundOptions) -> Result<BoundReport> {
    if !geom.excludes_origin() {
        return Err(Error::PreconditionViolation(
            "0 lies in the shifted subdifferential; the width bounds require 0 ∉ ∂||x*|| - λφ".into(),
        ));
    }
    let (v, u) = geom.params();
    let (bound_i, bound_ii) = geom.bounds()?;
    let optimal_mc = if options.mc_samples > 0 {
        Some(optimal_width_bound(geom, options.mc_samples, options.seed, &options.width)?)
    } else {
        None
    };
    let mut estimate = bound_i.min(bound_ii);
    if let Some(mc) = &optimal_mc {
        estimate = estimate.min(mc.value);
    }
    Ok(BoundReport {
        label: None,
        structure: geom.structure(),
        v,
        u,
        bound_i,
        bound_ii,
        optimal_mc,
        width_sq_estimate: estimate,
        measurement_proxy: estimate,
    })
}
