// SPDX-License-Identifier: Apache-2.0

//! The six convex recovery programs, their validation, and their JSON form.
//!
//! All programs share the constraint `||y - A x||_2 <= delta`; they differ in
//! the objective:
//!
//! | kind         | objective                                   |
//! |--------------|---------------------------------------------|
//! | `BP`         | `||x||_1`                                   |
//! | `MC_SPARSE`  | `||x||_1 - <x, lambda*phi>`                 |
//! | `L1L1`       | `||x||_1 + lambda * ||x - phi||_1`          |
//! | `L1L2`       | `||x||_1 + (lambda/2) * ||x - phi||_2^2`    |
//! | `MC_BLOCK`   | `||x||_{2,1} - <x, lambda*phi>`             |
//! | `MC_LOWRANK` | `||X||_* - <X, lambda*Phi>`                 |

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ensembles::{make_matrix_sensing_operator, MeasurementOperator, SignalShape};
use crate::error::{invalid, Result};
use crate::geometry::ShiftedSubdifferential;
use crate::linalg;
use crate::proximal::{self, BlockPartition, PriorShift, StructureKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProblemKind {
    #[serde(rename = "BP")]
    Bp,
    #[serde(rename = "MC_SPARSE")]
    McSparse,
    #[serde(rename = "L1L1")]
    L1L1,
    #[serde(rename = "L1L2")]
    L1L2,
    #[serde(rename = "MC_BLOCK")]
    McBlock,
    #[serde(rename = "MC_LOWRANK")]
    McLowRank,
}

/// Objective of a recovery program with the data it needs.
#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    BasisPursuit,
    McSparse { shift: PriorShift },
    L1L1 { lambda: f64, prior: DVector<f64> },
    L1L2 { lambda: f64, prior: DVector<f64> },
    McBlock { shift: PriorShift, partition: BlockPartition },
    McLowRank { shift: PriorShift },
}

impl Objective {
    pub fn kind(&self) -> ProblemKind {
        match self {
            Objective::BasisPursuit => ProblemKind::Bp,
            Objective::McSparse { .. } => ProblemKind::McSparse,
            Objective::L1L1 { .. } => ProblemKind::L1L1,
            Objective::L1L2 { .. } => ProblemKind::L1L2,
            Objective::McBlock { .. } => ProblemKind::McBlock,
            Objective::McLowRank { .. } => ProblemKind::McLowRank,
        }
    }

    pub fn shift(&self) -> Option<&PriorShift> {
        match self {
            Objective::McSparse { shift }
            | Objective::McBlock { shift, .. }
            | Objective::McLowRank { shift } => Some(shift),
            _ => None,
        }
    }
}

/// A validated recovery program.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    objective: Objective,
    operator: MeasurementOperator,
    y: DVector<f64>,
    delta: f64,
    unbounded_warning: bool,
}

/// Validates shapes and parameters and flags objectives that may be
/// unbounded below.
///
/// The MC objective `||x||_sig - <x, s>` is bounded below on every ray only
/// when the shift lies in the dual-norm unit ball (`||s||_inf <= 1`, largest
/// block norm `<= 1`, or spectral norm `<= 1`). Outside that ball the program
/// is still accepted, but whether it has a solution depends on the null space
/// of the operator.
pub fn build_problem(
    operator: MeasurementOperator,
    y: DVector<f64>,
    delta: f64,
    objective: Objective,
) -> Result<ProblemSpec> {
    if y.len() != operator.rows() {
        return invalid(format!(
            "measurement vector has length {} but the operator has {} rows",
            y.len(),
            operator.rows()
        ));
    }
    if !(delta >= 0.0) || !delta.is_finite() {
        return invalid(format!("noise bound must be finite and nonnegative, got {delta}"));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return invalid("measurements must be finite");
    }
    let shape = operator.signal_shape();
    let n = operator.signal_len();
    let vector_only = |kind: &str| -> Result<()> {
        if shape.matrix_dims().is_some() {
            return invalid(format!("{kind} needs a vector signal space"));
        }
        Ok(())
    };
    let check_shift = |shift: &PriorShift, want: StructureKind| -> Result<()> {
        if shift.shape() != shape {
            return invalid(format!(
                "shift shape {:?} does not match signal shape {shape:?}",
                shift.shape()
            ));
        }
        if shift.structure() != want {
            return invalid(format!("shift is tagged {:?}, expected {want:?}", shift.structure()));
        }
        Ok(())
    };
    let unbounded_warning = match &objective {
        Objective::BasisPursuit => {
            vector_only("BP")?;
            false
        }
        Objective::McSparse { shift } => {
            vector_only("MC_SPARSE")?;
            check_shift(shift, StructureKind::Sparse)?;
            shift.payload().amax() > 1.0
        }
        Objective::L1L1 { lambda, prior } | Objective::L1L2 { lambda, prior } => {
            vector_only("the l1-l1 / l1-l2 programs")?;
            if !(*lambda >= 0.0) || !lambda.is_finite() {
                return invalid(format!("lambda must be finite and nonnegative, got {lambda}"));
            }
            if prior.len() != n {
                return invalid(format!("prior has length {}, expected {n}", prior.len()));
            }
            false
        }
        Objective::McBlock { shift, partition } => {
            vector_only("MC_BLOCK")?;
            check_shift(shift, StructureKind::Block)?;
            if partition.dim() != n {
                return invalid(format!(
                    "partition covers {} entries, signal has {n}",
                    partition.dim()
                ));
            }
            (0..partition.block_count()).any(|b| partition.block_norm(shift.payload(), b) > 1.0)
        }
        Objective::McLowRank { shift } => {
            if shape.matrix_dims().is_none() {
                return invalid("MC_LOWRANK needs a matrix signal space");
            }
            check_shift(shift, StructureKind::LowRank)?;
            let m = shift.as_matrix().expect("matrix shape checked above");
            linalg::spectral_norm(&m) > 1.0
        }
    };
    if unbounded_warning {
        log::warn!(
            "{:?}: shift lies outside the dual-norm unit ball; the objective may be unbounded below",
            objective.kind()
        );
    }
    Ok(ProblemSpec { objective, operator, y, delta, unbounded_warning })
}

impl ProblemSpec {
    pub fn kind(&self) -> ProblemKind {
        self.objective.kind()
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn operator(&self) -> &MeasurementOperator {
        &self.operator
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn signal_shape(&self) -> SignalShape {
        self.operator.signal_shape()
    }

    /// Set when the MC shift leaves the dual-norm unit ball.
    pub fn unbounded_warning(&self) -> bool {
        self.unbounded_warning
    }

    /// Same program with `(A, y, delta)` scaled by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        build_problem(self.operator.scaled(c), &self.y * c, self.delta * c, self.objective.clone())
    }

    /// `max(0, ||y - A x|| - delta)`
    pub fn feasibility_gap(&self, x: &DVector<f64>) -> f64 {
        ((&self.y - self.operator.forward(x)).norm() - self.delta).max(0.0)
    }

    pub fn objective_value(&self, x: &DVector<f64>) -> f64 {
        match &self.objective {
            Objective::BasisPursuit => x.lp_norm(1),
            Objective::McSparse { shift } => x.lp_norm(1) - x.dot(shift.payload()),
            Objective::L1L1 { lambda, prior } => x.lp_norm(1) + lambda * (x - prior).lp_norm(1),
            Objective::L1L2 { lambda, prior } => {
                x.lp_norm(1) + 0.5 * lambda * (x - prior).norm_squared()
            }
            Objective::McBlock { shift, partition } => {
                partition.mixed_norm(x) - x.dot(shift.payload())
            }
            Objective::McLowRank { shift } => {
                let (rows, cols) = self.signal_shape().matrix_dims().expect("validated");
                linalg::nuclear_norm(&linalg::to_matrix(x, rows, cols)) - x.dot(shift.payload())
            }
        }
    }

    /// Slope of the objective along the ray `t * d` as `t -> infinity`.
    /// A negative value together with `A d = 0` certifies unboundedness.
    pub fn recession_slope(&self, d: &DVector<f64>) -> f64 {
        match &self.objective {
            Objective::BasisPursuit => d.lp_norm(1),
            Objective::L1L1 { lambda, .. } => (1.0 + lambda) * d.lp_norm(1),
            Objective::L1L2 { lambda, .. } => {
                if *lambda > 0.0 && d.iter().any(|v| *v != 0.0) {
                    f64::INFINITY
                } else {
                    d.lp_norm(1)
                }
            }
            Objective::McSparse { .. } | Objective::McBlock { .. } | Objective::McLowRank { .. } => {
                self.objective_value(d)
            }
        }
    }

    /// `prox_{tau f}(v)` for this program's objective.
    pub fn prox(&self, v: &DVector<f64>, tau: f64) -> Result<DVector<f64>> {
        match &self.objective {
            Objective::BasisPursuit => Ok(proximal::soft_threshold(v, tau)),
            Objective::McSparse { shift } => proximal::prox_mc_l1(v, tau, shift.payload()),
            Objective::L1L1 { lambda, prior } => proximal::prox_l1l1(v, tau, *lambda, prior),
            Objective::L1L2 { lambda, prior } => proximal::prox_l1l2(v, tau, *lambda, prior),
            Objective::McBlock { shift, partition } => {
                proximal::prox_mc_block(v, tau, shift.payload(), partition)
            }
            Objective::McLowRank { shift } => {
                let (rows, cols) = self.signal_shape().matrix_dims().expect("validated");
                let out = proximal::prox_mc_nuclear(
                    &linalg::to_matrix(v, rows, cols),
                    tau,
                    &linalg::to_matrix(shift.payload(), rows, cols),
                )?;
                Ok(linalg::to_vector(&out))
            }
        }
    }
}

/// Whether `0` lies outside the shifted subdifferential at `x_star`, the
/// hypothesis under which the width bounds apply.
pub fn subgradient_check(spec: &ProblemSpec, x_star: &DVector<f64>) -> Result<bool> {
    let shape = spec.signal_shape();
    let zero_shift = |structure| PriorShift::zeros(shape, structure);
    let geometry = match spec.objective() {
        Objective::BasisPursuit => {
            ShiftedSubdifferential::sparse(x_star, &zero_shift(StructureKind::Sparse)?)?
        }
        Objective::McSparse { shift } => ShiftedSubdifferential::sparse(x_star, shift)?,
        Objective::McBlock { shift, partition } => {
            ShiftedSubdifferential::block(x_star, shift, partition)?
        }
        Objective::McLowRank { shift } => {
            let (rows, cols) = shape.matrix_dims().expect("validated");
            ShiftedSubdifferential::low_rank(&linalg::to_matrix(x_star, rows, cols), shift, None)?
        }
        Objective::L1L1 { .. } | Objective::L1L2 { .. } => {
            return invalid("the subdifferential check applies to norm-minus-correlation programs")
        }
    };
    Ok(geometry.excludes_origin())
}

/// A vector or a row-major matrix in JSON documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Vector(Vec<f64>),
    Matrix(Vec<Vec<f64>>),
}

impl Payload {
    pub fn from_vector(v: &DVector<f64>) -> Self {
        Payload::Vector(v.iter().copied().collect())
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        Payload::Matrix(linalg::matrix_to_rows(m))
    }

    /// Flattens to the solver's layout (column-major for matrices) and
    /// returns the shape it describes.
    pub fn to_signal(&self) -> Result<(DVector<f64>, SignalShape)> {
        match self {
            Payload::Vector(v) => Ok((DVector::from_vec(v.clone()), SignalShape::Vector(v.len()))),
            Payload::Matrix(rows) => {
                let m = linalg::matrix_from_rows(rows)?;
                let shape = SignalShape::Matrix { rows: m.nrows(), cols: m.ncols() };
                Ok((linalg::to_vector(&m), shape))
            }
        }
    }

    /// Payload laid out for `shape`.
    pub fn for_shape(v: &DVector<f64>, shape: SignalShape) -> Self {
        match shape {
            SignalShape::Vector(_) => Self::from_vector(v),
            SignalShape::Matrix { rows, cols } => Self::from_matrix(&linalg::to_matrix(v, rows, cols)),
        }
    }
}

pub const PROBLEM_SCHEMA_VERSION: u32 = 1;

/// JSON form of a recovery program.
///
/// The operator is given either as `operator` (dense rows acting on the
/// vectorized signal) or as `sensing_matrices` (one matrix per measurement,
/// row-major). Matrix-valued shifts and truths are row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemDocument {
    #[serde(default = "default_version")]
    pub version: u32,
    pub kind: ProblemKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensing_matrices: Option<Vec<Vec<Vec<f64>>>>,
    pub y: Vec<f64>,
    pub delta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<Payload>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_size: Option<usize>,
    /// Ground truth, when known; used only for reporting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_star: Option<Payload>,
    /// Seed the instance was generated from, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_version() -> u32 {
    PROBLEM_SCHEMA_VERSION
}

impl ProblemDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn operator(&self) -> Result<MeasurementOperator> {
        match (&self.operator, &self.sensing_matrices) {
            (Some(rows), None) => MeasurementOperator::dense(linalg::matrix_from_rows(rows)?),
            (None, Some(mats)) => {
                let mats = mats
                    .iter()
                    .map(|m| linalg::matrix_from_rows(m))
                    .collect::<Result<Vec<_>>>()?;
                make_matrix_sensing_operator(&mats)
            }
            _ => invalid("exactly one of `operator` and `sensing_matrices` must be given"),
        }
    }

    pub fn to_problem(&self) -> Result<ProblemSpec> {
        if self.version != PROBLEM_SCHEMA_VERSION {
            return invalid(format!("unsupported problem schema version {}", self.version));
        }
        let operator = self.operator()?;
        let shape = operator.signal_shape();
        let shift = |structure: StructureKind| -> Result<PriorShift> {
            match &self.shift {
                Some(p) => {
                    let (payload, got) = p.to_signal()?;
                    if got != shape {
                        return invalid(format!("shift shape {got:?} does not match {shape:?}"));
                    }
                    PriorShift::new(payload, shape, structure)
                }
                None => PriorShift::zeros(shape, structure),
            }
        };
        let baseline = || -> Result<(f64, DVector<f64>)> {
            let lambda = self.lambda.ok_or_else(|| {
                crate::Error::InvalidArgument("`lambda` is required for L1L1/L1L2".into())
            })?;
            let prior = self.prior.as_ref().ok_or_else(|| {
                crate::Error::InvalidArgument("`prior` is required for L1L1/L1L2".into())
            })?;
            Ok((lambda, DVector::from_vec(prior.clone())))
        };
        let objective = match self.kind {
            ProblemKind::Bp => Objective::BasisPursuit,
            ProblemKind::McSparse => Objective::McSparse { shift: shift(StructureKind::Sparse)? },
            ProblemKind::L1L1 => {
                let (lambda, prior) = baseline()?;
                Objective::L1L1 { lambda, prior }
            }
            ProblemKind::L1L2 => {
                let (lambda, prior) = baseline()?;
                Objective::L1L2 { lambda, prior }
            }
            ProblemKind::McBlock => {
                let k = self.block_size.ok_or_else(|| {
                    crate::Error::InvalidArgument("`block_size` is required for MC_BLOCK".into())
                })?;
                Objective::McBlock {
                    shift: shift(StructureKind::Block)?,
                    partition: BlockPartition::new(operator.signal_len(), k)?,
                }
            }
            ProblemKind::McLowRank => Objective::McLowRank { shift: shift(StructureKind::LowRank)? },
        };
        build_problem(operator, DVector::from_vec(self.y.clone()), self.delta, objective)
    }

    /// Serializes a program (dense operator form).
    pub fn from_problem(spec: &ProblemSpec) -> Self {
        let shape = spec.signal_shape();
        let (shift, lambda, prior, block_size) = match spec.objective() {
            Objective::BasisPursuit => (None, None, None, None),
            Objective::McSparse { shift } | Objective::McLowRank { shift } => {
                (Some(Payload::for_shape(shift.payload(), shape)), None, None, None)
            }
            Objective::L1L1 { lambda, prior } | Objective::L1L2 { lambda, prior } => {
                (None, Some(*lambda), Some(prior.iter().copied().collect()), None)
            }
            Objective::McBlock { shift, partition } => (
                Some(Payload::from_vector(shift.payload())),
                None,
                None,
                Some(partition.block_size()),
            ),
        };
        let (operator, sensing_matrices) = match shape {
            SignalShape::Vector(_) => (Some(linalg::matrix_to_rows(spec.operator().matrix())), None),
            SignalShape::Matrix { rows, cols } => {
                let a = spec.operator().matrix();
                let mats = (0..a.nrows())
                    .map(|j| {
                        let row: DVector<f64> = a.row(j).transpose();
                        linalg::matrix_to_rows(&linalg::to_matrix(&row, rows, cols))
                    })
                    .collect();
                (None, Some(mats))
            }
        };
        ProblemDocument {
            version: PROBLEM_SCHEMA_VERSION,
            kind: spec.kind(),
            operator,
            sensing_matrices,
            y: spec.y().iter().copied().collect(),
            delta: spec.delta(),
            shift,
            lambda,
            prior,
            block_size,
            x_star: None,
            seed: None,
        }
    }
}
