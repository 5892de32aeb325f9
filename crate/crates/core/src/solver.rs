// SPDX-License-Identifier: Apache-2.0

//! Primal-dual splitting for `min f(x) s.t. ||y - A x||_2 <= delta`.
//!
//! Each iteration applies the prox of `f` to a primal gradient step, extrapolates,
//! and updates the dual through the Moreau decomposition of the ball
//! indicator's conjugate:
//!
//! ```text
//! x+   = prox_{tau f}(x - tau A^T u)
//! xbar = 2 x+ - x
//! w    = u + sigma A xbar
//! u+   = w - sigma * P_ball(w / sigma)
//! ```
//!
//! Convergence requires `tau * sigma * L^2 <= 1` with `L = ||A||`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::ensembles::{operator_norm, DEFAULT_NORM_ITERS, DEFAULT_NORM_TOL};
use crate::error::{invalid, Error, Result};
use crate::proximal::project_l2_ball;
use crate::recovery::ProblemSpec;

/// Padding applied to the power-iteration norm estimate.
pub const NORM_SAFETY: f64 = 0.01;
/// Auto steps use `0.99 / L` for both the primal and dual step.
pub const AUTO_STEP_FACTOR: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// `None` selects the automatic step.
    pub primal_step: Option<f64>,
    pub dual_step: Option<f64>,
    /// Relative change of `x` over `window` iterations that counts as converged.
    pub tol_rel: f64,
    /// Allowed constraint slack, relative to `1 + ||y||`.
    pub feas_tol: f64,
    /// Iterate-norm ceiling; `None` means `1e8 * (1 + ||x0||)`.
    pub divergence_guard: Option<f64>,
    pub window: usize,
    pub record_history: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 20_000,
            primal_step: None,
            dual_step: None,
            tol_rel: 1e-7,
            feas_tol: 1e-6,
            divergence_guard: None,
            window: 10,
            record_history: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    Converged,
    MaxIters,
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverResult {
    pub x_hat: DVector<f64>,
    pub iterations: usize,
    pub status: SolverStatus,
    pub objective_value: f64,
    /// `max(0, ||y - A x_hat|| - delta)`
    pub feasibility_gap: f64,
    pub residual_history: Vec<Residuals>,
    pub primal_step: f64,
    pub dual_step: f64,
    pub operator_norm: f64,
}

// Ray certificate thresholds; see `drifts_to_infinity`.
const RAY_MIN_ITERS: usize = 1000;
const RAY_NORM_FACTOR: f64 = 10.0;
const RAY_RESIDUAL: f64 = 1e-3;
const RAY_SLOPE: f64 = 1e-3;
const RAY_ALIGNMENT: f64 = 0.999;

/// Solves `problem` with the primal-dual iteration.
pub fn solve(problem: &ProblemSpec, config: &SolverConfig) -> Result<SolverResult> {
    if config.max_iters == 0 || config.window == 0 {
        return invalid("max_iters and window must be positive");
    }
    if !(config.tol_rel > 0.0) || !(config.feas_tol > 0.0) {
        return invalid("tolerances must be positive");
    }
    let op = problem.operator();
    let y = problem.y();
    let delta = problem.delta();
    let norm = operator_norm(op, DEFAULT_NORM_ITERS, DEFAULT_NORM_TOL);
    let lip = norm.value * (1.0 + NORM_SAFETY);
    if !(lip > 0.0) || !lip.is_finite() {
        return invalid("operator norm is zero or not finite");
    }
    let (tau, sigma) = match (config.primal_step, config.dual_step) {
        (None, None) => (AUTO_STEP_FACTOR / lip, AUTO_STEP_FACTOR / lip),
        (Some(t), Some(s)) => {
            if !(t > 0.0 && s > 0.0) {
                return invalid("steps must be positive");
            }
            if t * s * lip * lip > 1.0 {
                return invalid(format!(
                    "steps violate tau*sigma*L^2 <= 1 (tau={t}, sigma={s}, L={lip})"
                ));
            }
            (t, s)
        }
        _ => return invalid("primal and dual steps must both be given or both be automatic"),
    };

    let n = op.signal_len();
    let m = op.rows();
    let y_norm = y.norm();
    let feas_limit = config.feas_tol * (1.0 + y_norm);

    let mut x = op.adjoint(y) / (lip * lip);
    let x0_norm = x.norm();
    let guard = config.divergence_guard.unwrap_or(1e8 * (1.0 + x0_norm));
    let mut u = DVector::<f64>::zeros(m);
    let mut ax = op.forward(&x);
    let mut atu = DVector::<f64>::zeros(n);
    let mut ax_new = DVector::<f64>::zeros(m);
    let mut a_xbar = DVector::<f64>::zeros(m);
    let mut snapshot = x.clone();
    let mut prev_drift: Option<DVector<f64>> = None;
    let mut history = Vec::new();
    let mut status = SolverStatus::MaxIters;
    let mut iterations = config.max_iters;

    for k in 1..=config.max_iters {
        op.adjoint_into(&u, &mut atu);
        let x_new = problem.prox(&(&x - &atu * tau), tau)?;
        op.forward_into(&x_new, &mut ax_new);
        a_xbar.copy_from(&ax_new);
        a_xbar *= 2.0;
        a_xbar -= &ax;

        let w = &u + &a_xbar * sigma;
        let u_new = &w - project_l2_ball(&(&w / sigma), y, delta) * sigma;

        if config.record_history {
            let dx = &x - &x_new;
            let du = &u - &u_new;
            let primal = (&dx / tau - op.adjoint(&du)).norm();
            let dual = (&du / sigma - op.forward(&dx)).norm();
            history.push(Residuals { primal, dual });
        }

        x = x_new;
        u = u_new;
        std::mem::swap(&mut ax, &mut ax_new);

        let x_norm = x.norm();
        if !x_norm.is_finite() || x_norm > guard {
            status = SolverStatus::Diverged;
            iterations = k;
            break;
        }
        if k % config.window == 0 {
            let drift = &x - &snapshot;
            let change = drift.norm();
            let gap = ((y - &ax).norm() - delta).max(0.0);
            if change <= config.tol_rel * x_norm.max(f64::MIN_POSITIVE) && gap <= feas_limit {
                status = SolverStatus::Converged;
                iterations = k;
                break;
            }
            if k >= RAY_MIN_ITERS && x_norm > RAY_NORM_FACTOR * (1.0 + x0_norm) && change > 0.0 {
                let dir = drift / change;
                if drifts_to_infinity(problem, &dir, prev_drift.as_ref(), lip) {
                    log::debug!("solver: iterates follow a descent ray of the feasible set");
                    status = SolverStatus::Diverged;
                    iterations = k;
                    break;
                }
                prev_drift = Some(dir);
            }
            snapshot.copy_from(&x);
        }
    }

    if status == SolverStatus::MaxIters {
        log::debug!("solver: stopped after {} iterations without converging", config.max_iters);
    }
    let objective_value = problem.objective_value(&x);
    let feasibility_gap = ((y - &ax).norm() - delta).max(0.0);
    if status != SolverStatus::Diverged && !objective_value.is_finite() {
        return Err(Error::Numerical("objective is not finite at the final iterate".into()));
    }
    Ok(SolverResult {
        x_hat: x,
        iterations,
        status,
        objective_value,
        feasibility_gap,
        residual_history: history,
        primal_step: tau,
        dual_step: sigma,
        operator_norm: lip,
    })
}

/// The iterates drift along a fixed unit direction `dir` that the operator
/// (nearly) annihilates and along which the objective decreases without bound.
fn drifts_to_infinity(
    problem: &ProblemSpec,
    dir: &DVector<f64>,
    prev: Option<&DVector<f64>>,
    lip: f64,
) -> bool {
    let aligned = prev.is_some_and(|p| p.dot(dir) >= RAY_ALIGNMENT);
    aligned
        && problem.operator().forward(dir).norm() <= RAY_RESIDUAL * lip
        && problem.recession_slope(dir) <= -RAY_SLOPE
}

/// Outcome of comparing a solver output against a feasible reference point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalityReport {
    pub objective_hat: f64,
    pub objective_ref: f64,
    pub gap_hat: f64,
    pub gap_ref: f64,
    pub feasible: bool,
    pub no_worse: bool,
}

impl OptimalityReport {
    pub fn passes(&self) -> bool {
        self.feasible && self.no_worse
    }
}

/// Checks `f(x_hat) <= f(x_ref) + tol_obj` and feasibility of `x_hat`
/// within `feas_tol * (1 + ||y||)`.
pub fn check_optimality(
    problem: &ProblemSpec,
    x_hat: &DVector<f64>,
    x_ref: &DVector<f64>,
    tol_obj: f64,
    feas_tol: f64,
) -> OptimalityReport {
    let limit = feas_tol * (1.0 + problem.y().norm());
    let objective_hat = problem.objective_value(x_hat);
    let objective_ref = problem.objective_value(x_ref);
    let gap_hat = problem.feasibility_gap(x_hat);
    let gap_ref = problem.feasibility_gap(x_ref);
    if gap_ref > limit {
        log::warn!("check_optimality: reference point violates the constraint by {gap_ref}");
    }
    OptimalityReport {
        objective_hat,
        objective_ref,
        gap_hat,
        gap_ref,
        feasible: gap_hat <= limit,
        no_worse: objective_hat <= objective_ref + tol_obj,
    }
}
