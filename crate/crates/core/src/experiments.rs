// SPDX-License-Identifier: Apache-2.0

//! Phase-transition grids and method comparisons.
//!
//! Every (level, m, trial) triple owns an independent RNG stream derived from
//! the master seed, so results do not depend on how trials are scheduled
//! across threads. Within a trial all methods and shift rules see the same
//! signal, operator, noise, and prior.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::ensembles::{
    bernoulli_matrix_with, bernoulli_sensing_operator_with, gaussian_matrix_with, gaussian_vector_with,
    stream_rng, MeasurementOperator,
};
use crate::error::{invalid, Error, Result};
use crate::linalg::{self, SortedSvd};
use crate::prior;
use crate::proximal::PriorShift;
use crate::recovery::{build_problem, Objective};
use crate::solver::{solve, SolverConfig, SolverStatus};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const CSV_HEADER: &str = "axis1,axis2,successes,trials,probability,method";

/// `||x_hat - x_star|| / ||x_star|| < tol`.
pub fn success(x_hat: &DVector<f64>, x_star: &DVector<f64>, tol: f64) -> Result<bool> {
    if x_hat.len() != x_star.len() {
        return invalid("estimate and truth lengths differ");
    }
    let norm = x_star.norm();
    if norm == 0.0 {
        return invalid("true signal is zero");
    }
    Ok((x_hat - x_star).norm() / norm < tol)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    PhaseSparse,
    PhaseLowrank,
    CompareSparse,
    CompareLowrank,
}

impl StudyKind {
    fn is_lowrank(self) -> bool {
        matches!(self, Self::PhaseLowrank | Self::CompareLowrank)
    }

    fn is_phase(self) -> bool {
        matches!(self, Self::PhaseSparse | Self::PhaseLowrank)
    }
}

/// Built-in shifts for the phase-transition studies.
///
/// Sparse (with support `I`): a) `0`; b) `sign(x*)/2` on `I`;
/// c) `-sign(x*)/2` on `I`; d) `1` on `I^c`; e) `sign(x*)/2` on `I` and `1/4`
/// at one random index of `I^c`; f) `-sign(x*)/2` on `I` and `1` on `I^c`.
///
/// Low-rank (with `X* = U S V^T` and complements `U'`, `V'`): a) `0`;
/// b) `U V^T/2`; c) `-U V^T/2`; d) `U' V'^T/2`;
/// e) `U V^T/2 + U' diag(1/2, 0, ..) V'^T`; f) `-U V^T/2 + U' V'^T/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftRule {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl ShiftRule {
    pub const ALL: [ShiftRule; 6] = [Self::A, Self::B, Self::C, Self::D, Self::E, Self::F];

    pub fn label(self) -> &'static str {
        match self {
            Self::A => "shift_a",
            Self::B => "shift_b",
            Self::C => "shift_c",
            Self::D => "shift_d",
            Self::E => "shift_e",
            Self::F => "shift_f",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bp,
    L1l1,
    L1l2,
    /// Nuclear-norm minimization without prior.
    Nuclear,
    Mc,
    McKnown,
    McEstimated,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Self::Bp => "BP",
            Self::L1l1 => "L1L1",
            Self::L1l2 => "L1L2",
            Self::Nuclear => "NUC",
            Self::Mc => "MC",
            Self::McKnown => "MC_known",
            Self::McEstimated => "MC_est",
        }
    }
}

/// How the prior `phi = x* + z` is perturbed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Perturbation {
    /// `z` has `sparsity` N(0, sigma^2) entries, `overlap` of them on the
    /// support of `x*`. Missing counts scale with the signal sparsity `s` as
    /// `round(0.4 s)` and `round(0.8 * sparsity)`.
    Sparse {
        sigma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sparsity: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        overlap: Option<usize>,
    },
    /// I.i.d. N(0, sigma^2) entries.
    Dense { sigma: f64 },
}

impl Perturbation {
    fn sparse_counts(&self, s: usize) -> Option<(usize, usize)> {
        match self {
            Self::Sparse { sparsity, overlap, .. } => {
                let k = sparsity.unwrap_or((0.4 * s as f64).round() as usize);
                let o = overlap.unwrap_or((0.8 * k as f64).round() as usize);
                Some((k, o))
            }
            Self::Dense { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    pub max_iters: usize,
    pub tol_rel: f64,
    pub feas_tol: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { max_iters: 20_000, tol_rel: 1e-6, feas_tol: 1e-6 }
    }
}

impl SolverSettings {
    fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            max_iters: self.max_iters,
            tol_rel: self.tol_rel,
            feas_tol: self.feas_tol,
            record_history: false,
            ..SolverConfig::default()
        }
    }
}

/// Full description of one study; `n` is the vector length, or the side of
/// the square matrix for low-rank studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub study: StudyKind,
    pub n: usize,
    /// Explicit sparsity / rank values; empty means `level_step..=level_max`.
    #[serde(default)]
    pub levels: Vec<usize>,
    pub level_step: usize,
    pub level_max: usize,
    pub m_step: usize,
    pub m_max: usize,
    pub trials: usize,
    pub tol: f64,
    pub noise_sigma: f64,
    #[serde(default)]
    pub rules: Vec<ShiftRule>,
    #[serde(default)]
    pub methods: Vec<Method>,
    pub perturbation: Perturbation,
    /// Weight of the prior; `None` means `1` for sparse and `1/n` for
    /// low-rank studies.
    #[serde(default)]
    pub lambda: Option<f64>,
    pub kappa: f64,
    pub master_seed: u64,
    #[serde(default)]
    pub solver: SolverSettings,
    /// Worker threads; `None` uses every core. Never serialized, since it
    /// has no effect on results.
    #[serde(default, skip_serializing)]
    pub jobs: Option<usize>,
}

pub const DEFAULT_SEED: u64 = 20_190_101;

impl ExperimentConfig {
    /// Desk-scale defaults; `paper_scale` switches to the original sizes and
    /// 50 trials per cell.
    pub fn preset(study: StudyKind, paper_scale: bool) -> Self {
        let base = Self {
            version: CONFIG_SCHEMA_VERSION,
            study,
            n: 64,
            levels: Vec::new(),
            level_step: 2,
            level_max: 32,
            m_step: 2,
            m_max: 64,
            trials: if paper_scale { 50 } else { 25 },
            tol: 1e-2,
            noise_sigma: 0.0,
            rules: Vec::new(),
            methods: Vec::new(),
            perturbation: Perturbation::Dense { sigma: 0.1 },
            lambda: None,
            kappa: 0.95,
            master_seed: DEFAULT_SEED,
            solver: SolverSettings::default(),
            jobs: None,
        };
        match (study, paper_scale) {
            (StudyKind::PhaseSparse, false) => Self { rules: ShiftRule::ALL.to_vec(), ..base },
            (StudyKind::PhaseSparse, true) => Self {
                n: 128,
                level_max: 128,
                m_max: 128,
                rules: ShiftRule::ALL.to_vec(),
                ..base
            },
            (StudyKind::PhaseLowrank, _) => {
                let n = if paper_scale { 32 } else { 16 };
                Self {
                    n,
                    level_step: 1,
                    level_max: if paper_scale { n } else { n / 2 },
                    m_step: n,
                    m_max: n * n,
                    rules: ShiftRule::ALL.to_vec(),
                    ..base
                }
            }
            (StudyKind::CompareSparse, _) => {
                let (n, s, step) = if paper_scale { (500, 50, 10) } else { (128, 12, 4) };
                Self {
                    n,
                    levels: vec![s],
                    level_max: s,
                    m_step: step,
                    m_max: n,
                    noise_sigma: 0.01,
                    methods: vec![
                        Method::Bp,
                        Method::L1l1,
                        Method::L1l2,
                        Method::Mc,
                        Method::McKnown,
                        Method::McEstimated,
                    ],
                    perturbation: Perturbation::Sparse { sigma: 0.5, sparsity: None, overlap: None },
                    ..base
                }
            }
            (StudyKind::CompareLowrank, _) => {
                let (n, r) = if paper_scale { (32, 5) } else { (16, 3) };
                Self {
                    n,
                    levels: vec![r],
                    level_step: 1,
                    level_max: r,
                    m_step: n / 2,
                    m_max: n * n,
                    noise_sigma: 0.01,
                    methods: vec![Method::Nuclear, Method::Mc, Method::McKnown, Method::McEstimated],
                    ..base
                }
            }
        }
    }

    /// Parses a config document on top of the preset for its `study`; keys
    /// present in the document override the preset.
    pub fn from_json(text: &str, paper_scale: bool) -> Result<Self> {
        let doc: Value = serde_json::from_str(text)?;
        let obj = doc
            .as_object()
            .ok_or_else(|| Error::InvalidArgument("config must be a JSON object".into()))?;
        let study: StudyKind = match obj.get("study") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => return invalid("config needs a \"study\" field"),
        };
        if let Some(v) = obj.get("version") {
            if v.as_u64() != Some(CONFIG_SCHEMA_VERSION as u64) {
                return invalid(format!("unsupported config version {v}, expected {CONFIG_SCHEMA_VERSION}"));
            }
        }
        let mut preset = Self::preset(study, paper_scale);
        // A new size without explicit grid bounds rescales the preset grid.
        if let Some(n) = obj.get("n").and_then(Value::as_u64) {
            let (n, base) = (n as usize, preset.n);
            let scale = |v: usize, power: u32| (v * n.pow(power) / base.pow(power)).max(1);
            let power = if study.is_lowrank() { 2 } else { 1 };
            if !obj.contains_key("level_max") {
                preset.level_max = scale(preset.level_max, 1);
            }
            if !obj.contains_key("m_max") {
                preset.m_max = scale(preset.m_max, power);
            }
            if !obj.contains_key("m_step") && study.is_lowrank() {
                preset.m_step = scale(preset.m_step, 1);
            }
            preset.n = n;
        }
        let mut merged = serde_json::to_value(preset)?;
        let target = merged.as_object_mut().expect("config serializes to an object");
        for (k, v) in obj {
            target.insert(k.clone(), v.clone());
        }
        let config: Self = serde_json::from_value(merged)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn level_values(&self) -> Vec<usize> {
        if self.levels.is_empty() {
            (1..=self.level_max / self.level_step.max(1)).map(|i| i * self.level_step).collect()
        } else {
            self.levels.clone()
        }
    }

    /// Measurement counts `m_step, 2 m_step, ..` up to `m_max`; zero is
    /// skipped since it is a degenerate column.
    pub fn m_values(&self) -> Vec<usize> {
        (1..=self.m_max / self.m_step.max(1)).map(|i| i * self.m_step).collect()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(if self.study.is_lowrank() { 1.0 / self.n as f64 } else { 1.0 })
    }

    pub fn labels(&self) -> Vec<&'static str> {
        if self.study.is_phase() {
            self.rules.iter().map(|r| r.label()).collect()
        } else {
            self.methods.iter().map(|m| m.label()).collect()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_SCHEMA_VERSION {
            return invalid(format!("unsupported config version {}", self.version));
        }
        if self.n == 0 || self.trials == 0 || self.level_step == 0 || self.m_step == 0 {
            return invalid("n, trials, level_step and m_step must be at least 1");
        }
        if !(self.tol > 0.0) {
            return invalid("tol must be positive");
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return invalid("noise_sigma must be finite and nonnegative");
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return invalid(format!("kappa must lie in (0, 1), got {}", self.kappa));
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0) || !l.is_finite() {
                return invalid("lambda must be positive");
            }
        }
        if self.solver.max_iters == 0 || !(self.solver.tol_rel > 0.0) || !(self.solver.feas_tol > 0.0) {
            return invalid("solver settings must be positive");
        }
        if self.jobs == Some(0) {
            return invalid("jobs must be at least 1");
        }
        let max_level = self.n;
        let max_m = if self.study.is_lowrank() { self.n * self.n } else { self.n } * 4;
        if self.level_values().iter().any(|&l| l == 0 || l > max_level) {
            return invalid(format!("levels must lie in 1..={max_level}"));
        }
        if self.m_max > max_m {
            return invalid(format!("m_max {} is larger than {max_m}", self.m_max));
        }
        if self.study.is_phase() {
            if self.rules.is_empty() {
                return invalid("phase-transition study needs at least one shift rule");
            }
        } else {
            if self.methods.is_empty() {
                return invalid("comparison study needs at least one method");
            }
            let lowrank = self.study.is_lowrank();
            for m in &self.methods {
                let ok = match m {
                    Method::Bp | Method::L1l1 | Method::L1l2 => !lowrank,
                    Method::Nuclear => lowrank,
                    _ => true,
                };
                if !ok {
                    return invalid(format!("method {} does not apply to {:?}", m.label(), self.study));
                }
            }
            match &self.perturbation {
                Perturbation::Dense { sigma } | Perturbation::Sparse { sigma, .. } if !(*sigma >= 0.0) => {
                    return invalid("perturbation sigma must be nonnegative");
                }
                _ => {}
            }
            if lowrank && !matches!(self.perturbation, Perturbation::Dense { .. }) {
                return invalid("low-rank comparison supports only dense perturbations");
            }
            for s in self.level_values() {
                if let Some((k, o)) = self.perturbation.sparse_counts(s) {
                    if o > s || o > k || k - o > self.n - s {
                        return invalid(format!(
                            "sparse perturbation with {k} entries, {o} on the support, does not fit s={s}, n={}",
                            self.n
                        ));
                    }
                }
            }
        }
        if self.level_values().is_empty() || self.m_values().is_empty() {
            log::warn!("experiment grid is empty");
        }
        Ok(())
    }
}

/// Success counts for one method or shift rule over the (level, m) grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMap {
    pub method: String,
    pub levels: Vec<usize>,
    pub measurements: Vec<usize>,
    /// `successes[i][j]` for `levels[i]`, `measurements[j]`.
    pub successes: Vec<Vec<usize>>,
    pub trials: usize,
}

impl PhaseMap {
    pub fn probability(&self, i: usize, j: usize) -> f64 {
        self.successes[i][j] as f64 / self.trials as f64
    }

    /// Smallest measurement count with success probability at least 1/2
    /// for `level`.
    pub fn m_star(&self, level: usize) -> Option<usize> {
        let i = self.levels.iter().position(|&l| l == level)?;
        fifty_percent_point(&self.measurements, &self.successes[i], self.trials)
    }
}

/// First `m` whose success rate reaches one half.
pub fn fifty_percent_point(ms: &[usize], successes: &[usize], trials: usize) -> Option<usize> {
    ms.iter().zip(successes).find(|(_, &k)| 2 * k >= trials).map(|(m, _)| *m)
}

/// Seeds used for one grid cell: the per-trial stream ids under the master
/// seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSeeds {
    pub axes: [usize; 2],
    pub seeds: Vec<u64>,
}

/// Outcome of a study: one map per method or rule, in config order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub config: ExperimentConfig,
    pub maps: Vec<PhaseMap>,
    pub cells: Vec<CellSeeds>,
}

/// Curves of a comparison study, one per method, at a single level.
#[derive(Debug, Clone, PartialEq)]
pub struct SuccessCurve {
    pub level: usize,
    pub measurements: Vec<usize>,
    pub methods: Vec<String>,
    pub probabilities: Vec<Vec<f64>>,
}

impl StudyResult {
    pub fn map(&self, label: &str) -> Option<&PhaseMap> {
        self.maps.iter().find(|m| m.method == label)
    }

    pub fn m_star(&self, label: &str, level: usize) -> Option<usize> {
        self.map(label)?.m_star(level)
    }

    pub fn curve(&self, level: usize) -> Option<SuccessCurve> {
        let first = self.maps.first()?;
        let i = first.levels.iter().position(|&l| l == level)?;
        Some(SuccessCurve {
            level,
            measurements: first.measurements.clone(),
            methods: self.maps.iter().map(|m| m.method.clone()).collect(),
            probabilities: self
                .maps
                .iter()
                .map(|m| (0..m.measurements.len()).map(|j| m.probability(i, j)).collect())
                .collect(),
        })
    }

    /// One CSV row per (method, level, m), methods in config order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for map in &self.maps {
            for (i, level) in map.levels.iter().enumerate() {
                for (j, m) in map.measurements.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "{level},{m},{},{},{},{}",
                        map.successes[i][j],
                        map.trials,
                        map.probability(i, j),
                        map.method
                    );
                }
            }
        }
        out
    }

    pub fn sidecar_json(&self) -> Result<String> {
        let doc = serde_json::json!({
            "config": self.config,
            "master_seed": self.config.master_seed,
            "cells": self.cells,
            "version": crate::VERSION,
        });
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}

/// Writes `<stem>.csv` and `<stem>.json` into `dir`; returns both paths.
pub fn write_outputs(result: &StudyResult, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let csv = dir.join(format!("{stem}.csv"));
    let json = dir.join(format!("{stem}.json"));
    fs::write(&csv, result.to_csv())?;
    fs::write(&json, result.sidecar_json()? + "\n")?;
    Ok((csv, json))
}

fn stream_id(level: usize, m: usize, trial: usize) -> u64 {
    ((level as u64) << 42) | ((m as u64) << 21) | trial as u64
}

/// Everything random about one trial.
struct Trial {
    x_star: DVector<f64>,
    operator: MeasurementOperator,
    y: DVector<f64>,
    delta: f64,
    /// Prior for comparison studies.
    phi: DVector<f64>,
    /// Random off-support index for sparse rule (e).
    extra_index: Option<usize>,
    /// Full SVD of the Gaussian matrix behind a low-rank signal.
    svd: Option<SortedSvd>,
}

fn sample_trial(config: &ExperimentConfig, level: usize, m: usize, trial: usize) -> Result<Trial> {
    let mut rng = stream_rng(config.master_seed, stream_id(level, m, trial));
    let n = config.n;
    let (x_star, svd, operator) = if config.study.is_lowrank() {
        let g = gaussian_matrix_with(&mut rng, n, n);
        let svd = linalg::sorted_svd(&g)?;
        let mut x = DMatrix::zeros(n, n);
        for k in 0..level {
            x += svd.singular_values[k] * svd.u.column(k) * svd.v.column(k).transpose();
        }
        let op = bernoulli_sensing_operator_with(&mut rng, m, n, n)?;
        (linalg::to_vector(&x), Some(svd), op)
    } else {
        let mut x = DVector::zeros(n);
        for i in index::sample(&mut rng, n, level) {
            x[i] = rng.sample(rand_distr::StandardNormal);
        }
        let op = MeasurementOperator::dense(bernoulli_matrix_with(&mut rng, m, n))?;
        (x, None, op)
    };

    let clean = operator.forward(&x_star);
    let (y, delta) = if config.noise_sigma > 0.0 {
        let noise = gaussian_vector_with(&mut rng, m) * config.noise_sigma;
        let delta = noise.norm();
        (clean + noise, delta)
    } else {
        (clean, 0.0)
    };

    let phi = if config.study.is_phase() {
        DVector::zeros(0)
    } else {
        match &config.perturbation {
            Perturbation::Dense { sigma } => &x_star + gaussian_vector_with(&mut rng, x_star.len()) * *sigma,
            p @ Perturbation::Sparse { sigma, .. } => {
                let (k, overlap) = p.sparse_counts(level).expect("sparse perturbation");
                let normal = Normal::new(0.0, *sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                let support: Vec<usize> = (0..n).filter(|&i| x_star[i] != 0.0).collect();
                let off: Vec<usize> = (0..n).filter(|&i| x_star[i] == 0.0).collect();
                let mut z = DVector::zeros(n);
                for j in index::sample(&mut rng, support.len(), overlap) {
                    z[support[j]] = normal.sample(&mut rng);
                }
                for j in index::sample(&mut rng, off.len(), k - overlap) {
                    z[off[j]] = normal.sample(&mut rng);
                }
                &x_star + z
            }
        }
    };

    let extra_index = if config.study == StudyKind::PhaseSparse {
        let off: Vec<usize> = (0..n).filter(|&i| x_star[i] == 0.0).collect();
        if off.is_empty() {
            None
        } else {
            Some(off[rng.random_range(0..off.len())])
        }
    } else {
        None
    };

    Ok(Trial { x_star, operator, y, delta, phi, extra_index, svd })
}

fn sparse_rule_shift(rule: ShiftRule, trial: &Trial) -> Result<PriorShift> {
    let x = &trial.x_star;
    let sign = |i: usize| if x[i] > 0.0 { 1.0 } else { -1.0 };
    let payload = DVector::from_fn(x.len(), |i, _| {
        let on = x[i] != 0.0;
        match (rule, on) {
            (ShiftRule::A, _) => 0.0,
            (ShiftRule::B | ShiftRule::E, true) => sign(i) / 2.0,
            (ShiftRule::C | ShiftRule::F, true) => -sign(i) / 2.0,
            (ShiftRule::D, true) => 0.0,
            (ShiftRule::D | ShiftRule::F, false) => 1.0,
            (ShiftRule::E, false) if Some(i) == trial.extra_index => 0.25,
            (_, false) => 0.0,
        }
    });
    PriorShift::sparse(payload)
}

fn lowrank_rule_shift(rule: ShiftRule, trial: &Trial, r: usize) -> Result<PriorShift> {
    let svd = trial.svd.as_ref().expect("low-rank trial keeps its SVD");
    let n = svd.u.nrows();
    let k = svd.singular_values.len();
    let head = svd.u.columns(0, r) * svd.v.columns(0, r).transpose();
    let tail = if r < k {
        svd.u.columns(r, k - r) * svd.v.columns(r, k - r).transpose()
    } else {
        DMatrix::zeros(n, n)
    };
    let first_tail = if r < k {
        svd.u.column(r) * svd.v.column(r).transpose()
    } else {
        DMatrix::zeros(n, n)
    };
    let payload = match rule {
        ShiftRule::A => DMatrix::zeros(n, n),
        ShiftRule::B => head * 0.5,
        ShiftRule::C => head * -0.5,
        ShiftRule::D => tail * 0.5,
        ShiftRule::E => head * 0.5 + first_tail * 0.5,
        ShiftRule::F => head * -0.5 + tail * 0.5,
    };
    PriorShift::low_rank(&payload)
}

fn method_objective(config: &ExperimentConfig, method: Method, trial: &Trial, level: usize) -> Result<Objective> {
    let lambda = config.lambda();
    let n = config.n;
    let phi = &trial.phi;
    if config.study.is_lowrank() {
        let phi_m = linalg::to_matrix(phi, n, n);
        let shift = match method {
            Method::Nuclear => PriorShift::low_rank(&DMatrix::zeros(n, n))?,
            Method::Mc => PriorShift::low_rank(&(&phi_m * lambda))?,
            Method::McKnown => prior::improve_lowrank(&phi_m, Some(level), config.kappa)?.shift,
            Method::McEstimated => prior::improve_lowrank(&phi_m, None, config.kappa)?.shift,
            other => return invalid(format!("method {} does not apply to matrices", other.label())),
        };
        return Ok(Objective::McLowRank { shift });
    }
    Ok(match method {
        Method::Bp => Objective::BasisPursuit,
        Method::L1l1 => Objective::L1L1 { lambda, prior: phi.clone() },
        Method::L1l2 => Objective::L1L2 { lambda, prior: phi.clone() },
        Method::Mc => Objective::McSparse { shift: PriorShift::sparse(phi * lambda)? },
        Method::McKnown => Objective::McSparse { shift: prior::improve_sparse(phi, Some(level), config.kappa)?.shift },
        Method::McEstimated => Objective::McSparse { shift: prior::improve_sparse(phi, None, config.kappa)?.shift },
        Method::Nuclear => return invalid("nuclear-norm method needs a matrix study"),
    })
}

fn run_trial(config: &ExperimentConfig, level: usize, m: usize, t: usize) -> Result<Vec<bool>> {
    let trial = sample_trial(config, level, m, t)?;
    let solver = config.solver.solver_config();
    let objectives: Vec<Objective> = if config.study.is_phase() {
        config
            .rules
            .iter()
            .map(|&rule| {
                let shift = if config.study.is_lowrank() {
                    lowrank_rule_shift(rule, &trial, level)?
                } else {
                    sparse_rule_shift(rule, &trial)?
                };
                Ok(if config.study.is_lowrank() {
                    Objective::McLowRank { shift }
                } else {
                    Objective::McSparse { shift }
                })
            })
            .collect::<Result<_>>()?
    } else {
        config
            .methods
            .iter()
            .map(|&method| method_objective(config, method, &trial, level))
            .collect::<Result<_>>()?
    };
    let mut out = Vec::with_capacity(objectives.len());
    for objective in objectives {
        let problem = build_problem(trial.operator.clone(), trial.y.clone(), trial.delta, objective)?;
        let result = solve(&problem, &solver)?;
        let ok = match result.status {
            SolverStatus::Diverged => {
                log::debug!("trial (level={level}, m={m}, t={t}) diverged; counted as failure");
                false
            }
            _ => success(&result.x_hat, &trial.x_star, config.tol)?,
        };
        out.push(ok);
    }
    Ok(out)
}

/// Runs every (level, m, trial) task of `config` and tallies successes.
pub fn run_study(config: &ExperimentConfig) -> Result<StudyResult> {
    config.validate()?;
    let levels = config.level_values();
    let ms = config.m_values();
    let tasks: Vec<(usize, usize, usize)> = levels
        .iter()
        .flat_map(|&l| ms.iter().flat_map(move |&m| (0..config.trials).map(move |t| (l, m, t))))
        .collect();

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = config.jobs {
        builder = builder.num_threads(jobs);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<Vec<bool>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(l, m, t)| run_trial(config, l, m, t))
            .collect::<Result<Vec<_>>>()
    })?;

    let labels = config.labels();
    let mut maps: Vec<PhaseMap> = labels
        .iter()
        .map(|label| PhaseMap {
            method: label.to_string(),
            levels: levels.clone(),
            measurements: ms.clone(),
            successes: vec![vec![0; ms.len()]; levels.len()],
            trials: config.trials,
        })
        .collect();
    for (&(l, m, _), outcome) in tasks.iter().zip(&outcomes) {
        let i = levels.iter().position(|&x| x == l).expect("level on grid");
        let j = ms.iter().position(|&x| x == m).expect("m on grid");
        for (map, &ok) in maps.iter_mut().zip(outcome) {
            map.successes[i][j] += ok as usize;
        }
    }
    let cells = levels
        .iter()
        .flat_map(|&l| {
            ms.iter().map(move |&m| CellSeeds {
                axes: [l, m],
                seeds: (0..config.trials).map(|t| stream_id(l, m, t)).collect(),
            })
        })
        .collect();
    Ok(StudyResult { config: config.clone(), maps, cells })
}

/// Phase-transition study: one map per shift rule.
pub fn run_phase_transition(config: &ExperimentConfig) -> Result<StudyResult> {
    if !config.study.is_phase() {
        return invalid("not a phase-transition config");
    }
    run_study(config)
}

/// Comparison study: one success curve per method.
pub fn run_comparison(config: &ExperimentConfig) -> Result<StudyResult> {
    if config.study.is_phase() {
        return invalid("not a comparison config");
    }
    run_study(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn success_rule() {
        let x = DVector::from_vec(vec![1.0, 0.0]);
        assert!(success(&x, &x, 1e-2).unwrap());
        assert!(!success(&DVector::zeros(2), &x, 1e-2).unwrap());
        let at_tol = DVector::from_vec(vec![1.5, 0.0]);
        assert!(!success(&at_tol, &x, 0.5).unwrap());
        assert!(success(&DVector::zeros(2), &DVector::zeros(2), 1e-2).is_err());
    }

    #[test]
    fn grids_skip_zero() {
        let c = ExperimentConfig::preset(StudyKind::PhaseSparse, false);
        assert_eq!(c.m_values().first(), Some(&2));
        assert_eq!(c.level_values().first(), Some(&2));
        assert_eq!(c.m_values().len(), 32);
    }

    #[test]
    fn config_overrides_and_validation() {
        let c = ExperimentConfig::from_json(r#"{"study": "phase_sparse", "n": 16, "trials": 3}"#, false).unwrap();
        assert_eq!((c.n, c.trials, c.m_step), (16, 3, 2));
        assert!(ExperimentConfig::from_json(r#"{"study": "phase_sparse", "trials": 0}"#, false).is_err());
        assert!(ExperimentConfig::from_json(r#"{"study": "phase_sparse", "bogus": 1}"#, false).is_err());
        assert!(ExperimentConfig::from_json(r#"{"n": 4}"#, false).is_err());
        assert!(ExperimentConfig::from_json(r#"{"study": "compare_sparse", "methods": ["nuclear"]}"#, false).is_err());
        let p = ExperimentConfig::from_json(r#"{"study": "phase_sparse"}"#, true).unwrap();
        assert_eq!((p.n, p.trials), (128, 50));
    }

    #[test]
    fn sparse_perturbation_counts_scale() {
        let p = Perturbation::Sparse { sigma: 0.5, sparsity: None, overlap: None };
        assert_eq!(p.sparse_counts(50), Some((20, 16)));
        assert_eq!(p.sparse_counts(12), Some((5, 4)));
    }

    #[test]
    fn fifty_percent() {
        assert_eq!(fifty_percent_point(&[2, 4, 6], &[0, 5, 10], 10), Some(4));
        assert_eq!(fifty_percent_point(&[2, 4], &[0, 4], 10), None);
    }

    #[test]
    fn sparse_rules_follow_definitions() {
        let config = ExperimentConfig { n: 8, ..ExperimentConfig::preset(StudyKind::PhaseSparse, false) };
        let trial = sample_trial(&config, 3, 4, 0).unwrap();
        let x = &trial.x_star;
        let e = sparse_rule_shift(ShiftRule::E, &trial).unwrap();
        let extra = trial.extra_index.unwrap();
        assert_eq!(x[extra], 0.0);
        for i in 0..8 {
            let expect = if x[i] != 0.0 { x[i].signum() / 2.0 } else if i == extra { 0.25 } else { 0.0 };
            assert_eq!(e.payload()[i], expect);
        }
        let f = sparse_rule_shift(ShiftRule::F, &trial).unwrap();
        for i in 0..8 {
            let expect = if x[i] != 0.0 { -x[i].signum() / 2.0 } else { 1.0 };
            assert_eq!(f.payload()[i], expect);
        }
    }

    #[test]
    fn lowrank_rules_follow_definitions() {
        let config = ExperimentConfig { n: 5, ..ExperimentConfig::preset(StudyKind::PhaseLowrank, false) };
        let trial = sample_trial(&config, 2, 10, 1).unwrap();
        let x = linalg::to_matrix(&trial.x_star, 5, 5);
        let pair = crate::geometry::make_subspace_pair(&x, Some(2)).unwrap();
        let b = lowrank_rule_shift(ShiftRule::B, &trial, 2).unwrap().as_matrix().unwrap();
        assert!((b - pair.uv_t() * 0.5).norm() < 1e-10);
        let d = lowrank_rule_shift(ShiftRule::D, &trial, 2).unwrap().as_matrix().unwrap();
        assert!(pair.project_s(&d).norm() < 1e-10);
        let sv = linalg::singular_values(&d);
        assert!((sv[0] - 0.5).abs() < 1e-10 && (sv[2] - 0.5).abs() < 1e-10 && sv[3] < 1e-10);
    }

    #[test]
    fn small_study_is_deterministic_across_jobs() {
        let mut config = ExperimentConfig::from_json(
            r#"{"study": "phase_sparse", "n": 12, "levels": [2], "m_step": 4, "m_max": 12, "trials": 3, "rules": ["a", "b"]}"#,
            false,
        )
        .unwrap();
        config.jobs = Some(1);
        let one = run_study(&config).unwrap();
        config.jobs = Some(3);
        let three = run_study(&config).unwrap();
        assert_eq!(one.to_csv(), three.to_csv());
        assert_eq!(one.to_csv().lines().count(), 1 + 2 * 3);
    }
}
