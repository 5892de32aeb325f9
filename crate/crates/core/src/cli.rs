// SPDX-License-Identifier: Apache-2.0

//! Command-line front end.
//!
//! Exit codes: `0` success, `1` bad input or configuration, `2` solver hit
//! its iteration cap, `3` solver diverged, `4` a width bound was requested
//! for a shift whose subdifferential contains the origin.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::experiments::{self, ExperimentConfig, StudyKind, DEFAULT_SEED};
use crate::geometry::{bound_report, BoundOptions, BoundReport, ShiftedSubdifferential};
use crate::linalg;
use crate::prior;
use crate::proximal::{BlockPartition, PriorShift, StructureKind};
use crate::recovery::{Payload, ProblemDocument};
use crate::solver::{solve, SolverConfig, SolverStatus};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INVALID: u8 = 1;
pub const EXIT_MAX_ITERS: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_HYPOTHESIS: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "priorsense", version, about = "Structured signal recovery with prior information")]
pub struct Cli {
    /// More log output on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one recovery program given as JSON.
    Solve(CommonArgs),
    /// Width parameters and bounds for a signal and a list of shifts.
    Bounds(CommonArgs),
    /// Phase-transition grid over sparsity/rank and measurement count.
    PhaseTransition(StudyArgs),
    /// Success-rate curves of several methods.
    Compare(StudyArgs),
    /// Improve a raw prior into a bounded shift.
    ImprovePrior(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Input file (same as --config).
    #[arg(value_name = "FILE")]
    pub input: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output file; stdout when absent.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Monte-Carlo samples for the optimal width bound; 0 disables it.
    #[arg(long, default_value_t = 0)]
    pub mc_samples: usize,
    /// Solver relative stopping tolerance.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Output format for `bounds`.
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    /// Study config (JSON); the study preset is used when absent.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Preset to run without a config file.
    #[arg(long, value_enum)]
    pub study: Option<StudyArg>,
    /// Output directory for `<study>.csv` and `<study>.json`.
    #[arg(long, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,
    /// Master seed; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Success threshold on the relative error; overrides the config.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Use the original problem sizes and 50 trials per cell.
    #[arg(long)]
    pub paper_scale: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StudyArg {
    Sparse,
    Lowrank,
}

/// Signal plus shifts for the `bounds` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsDocument {
    #[serde(default = "one")]
    pub version: u32,
    pub structure: StructureKind,
    pub x_star: Payload,
    #[serde(default)]
    pub block_size: Option<usize>,
    /// Rank override for low-rank signals.
    #[serde(default)]
    pub rank: Option<usize>,
    pub shifts: Vec<LabeledShift>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledShift {
    pub label: String,
    pub shift: Payload,
}

/// Raw prior for the `improve-prior` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImproveDocument {
    #[serde(default = "one")]
    pub version: u32,
    pub structure: StructureKind,
    pub prior: Payload,
    pub kappa: f64,
    /// Sparsity, block count, or rank; estimated when absent.
    #[serde(default)]
    pub level: Option<usize>,
    #[serde(default)]
    pub block_size: Option<usize>,
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub kind: crate::recovery::ProblemKind,
    pub status: SolverStatus,
    pub iterations: usize,
    pub objective_value: f64,
    pub feasibility_gap: f64,
    pub x_hat: Payload,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relative_error: Option<f64>,
    pub unbounded_warning: bool,
    pub primal_step: f64,
    pub dual_step: f64,
    pub operator_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImproveReport {
    pub structure: StructureKind,
    pub shift: Payload,
    pub kappa: f64,
    pub level: usize,
    pub estimated: bool,
}

/// Failure that maps to a specific exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: Error,
}

impl From<Error> for CliError {
    fn from(error: Error) -> Self {
        let code = match error {
            Error::PreconditionViolation(_) => EXIT_HYPOTHESIS,
            _ => EXIT_INVALID,
        };
        Self { code, error }
    }
}

fn read_input(args: &CommonArgs) -> Result<String> {
    let path = match (&args.input, &args.config) {
        (Some(p), None) | (None, Some(p)) => p,
        (Some(_), Some(_)) => return invalid("give the input either positionally or with --config, not both"),
        (None, None) => return invalid("an input file is required"),
    };
    Ok(fs::read_to_string(path)?)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(path, text)?;
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

pub fn cmd_solve(args: &CommonArgs) -> std::result::Result<u8, CliError> {
    let doc = ProblemDocument::from_json(&read_input(args)?)?;
    let problem = doc.to_problem()?;
    if problem.unbounded_warning() {
        log::warn!("the shift exceeds the dual-norm unit ball; the program may be unbounded");
    }
    let mut config = SolverConfig { record_history: false, ..SolverConfig::default() };
    if let Some(t) = args.tol {
        config.tol_rel = t;
    }
    if let Some(k) = args.max_iters {
        config.max_iters = k;
    }
    let result = solve(&problem, &config)?;
    let shape = problem.signal_shape();
    let relative_error = match &doc.x_star {
        Some(p) => {
            let (x, _) = p.to_signal()?;
            let norm = x.norm();
            (norm > 0.0 && x.len() == result.x_hat.len()).then(|| (&result.x_hat - &x).norm() / norm)
        }
        None => None,
    };
    let report = SolveReport {
        kind: problem.kind(),
        status: result.status,
        iterations: result.iterations,
        objective_value: result.objective_value,
        feasibility_gap: result.feasibility_gap,
        x_hat: Payload::for_shape(&result.x_hat, shape),
        relative_error,
        unbounded_warning: problem.unbounded_warning(),
        primal_step: result.primal_step,
        dual_step: result.dual_step,
        operator_norm: result.operator_norm,
    };
    emit(args.out.as_deref(), &(serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n"))?;
    log::info!("solve: {:?} after {} iterations", result.status, result.iterations);
    Ok(match result.status {
        SolverStatus::Converged => EXIT_OK,
        SolverStatus::MaxIters => EXIT_MAX_ITERS,
        SolverStatus::Diverged => EXIT_DIVERGED,
    })
}

/// Bound reports for every shift in `doc`, in order.
pub fn compute_bounds(doc: &BoundsDocument, options: &BoundOptions) -> Result<Vec<BoundReport>> {
    if doc.version != 1 {
        return invalid(format!("unsupported bounds schema version {}", doc.version));
    }
    let (x, shape) = doc.x_star.to_signal()?;
    let partition = match (doc.structure, doc.block_size) {
        (StructureKind::Block, Some(k)) => Some(BlockPartition::new(x.len(), k)?),
        (StructureKind::Block, None) => return invalid("`block_size` is required for block signals"),
        _ => None,
    };
    doc.shifts
        .iter()
        .map(|entry| {
            let (payload, got) = entry.shift.to_signal()?;
            if got != shape {
                return invalid(format!("shift `{}` has shape {got:?}, expected {shape:?}", entry.label));
            }
            let shift = PriorShift::new(payload, shape, doc.structure)?;
            let geom = ShiftedSubdifferential::from_signal(&x, &shift, partition.as_ref(), doc.rank)?;
            let mut report = bound_report(&geom, options).map_err(|e| match e {
                Error::PreconditionViolation(msg) => {
                    Error::PreconditionViolation(format!("shift `{}`: {msg}", entry.label))
                }
                other => other,
            })?;
            report.label = Some(entry.label.clone());
            Ok(report)
        })
        .collect()
}

pub fn cmd_bounds(args: &CommonArgs) -> std::result::Result<u8, CliError> {
    let doc: BoundsDocument = serde_json::from_str(&read_input(args)?).map_err(Error::from)?;
    let options = BoundOptions { mc_samples: args.mc_samples, seed: args.seed, ..BoundOptions::default() };
    let run = || -> Result<Vec<BoundReport>> {
        match args.jobs {
            Some(j) => rayon::ThreadPoolBuilder::new()
                .num_threads(j)
                .build()
                .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))?
                .install(|| compute_bounds(&doc, &options)),
            None => compute_bounds(&doc, &options),
        }
    };
    let reports = run()?;
    let text = match args.format {
        Format::Json => serde_json::to_string_pretty(&reports).map_err(Error::from)? + "\n",
        Format::Csv => {
            let header = if args.mc_samples > 0 { BoundReport::CSV_HEADER_MC } else { BoundReport::CSV_HEADER };
            let mut text = format!("{header}\n");
            for r in &reports {
                text.push_str(&r.csv_row());
                text.push('\n');
            }
            text
        }
    };
    emit(args.out.as_deref(), &text)?;
    Ok(EXIT_OK)
}

/// Resolves a study config from file, preset, and flag overrides.
pub fn resolve_study(args: &StudyArgs, compare: bool) -> Result<ExperimentConfig> {
    let mut config = match (&args.config, args.study) {
        (Some(path), _) => ExperimentConfig::from_json(&fs::read_to_string(path)?, args.paper_scale)?,
        (None, study) => {
            let lowrank = study == Some(StudyArg::Lowrank);
            let kind = match (compare, lowrank) {
                (false, false) => StudyKind::PhaseSparse,
                (false, true) => StudyKind::PhaseLowrank,
                (true, false) => StudyKind::CompareSparse,
                (true, true) => StudyKind::CompareLowrank,
            };
            ExperimentConfig::preset(kind, args.paper_scale)
        }
    };
    let is_compare = matches!(config.study, StudyKind::CompareSparse | StudyKind::CompareLowrank);
    if is_compare != compare {
        return invalid(format!("config study {:?} does not match this subcommand", config.study));
    }
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    if let Some(tol) = args.tol {
        config.tol = tol;
    }
    if let Some(k) = args.max_iters {
        config.solver.max_iters = k;
    }
    config.jobs = args.jobs;
    config.validate()?;
    Ok(config)
}

pub fn cmd_study(args: &StudyArgs, compare: bool) -> std::result::Result<u8, CliError> {
    let config = resolve_study(args, compare)?;
    let stem = serde_json::to_value(config.study)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_else(|| "study".into());
    println!("{}", config.to_json()?);
    let result = if compare {
        experiments::run_comparison(&config)?
    } else {
        experiments::run_phase_transition(&config)?
    };
    let (csv, json) = experiments::write_outputs(&result, &args.out, &stem)?;
    eprintln!("wrote {} and {}", csv.display(), json.display());
    for map in &result.maps {
        for level in &map.levels {
            match map.m_star(*level) {
                Some(m) => eprintln!("{} level={level}: 50% success at m={m}", map.method),
                None => eprintln!("{} level={level}: 50% success not reached", map.method),
            }
        }
    }
    Ok(EXIT_OK)
}

pub fn improve_from_document(doc: &ImproveDocument) -> Result<ImproveReport> {
    if doc.version != 1 {
        return invalid(format!("unsupported improve-prior schema version {}", doc.version));
    }
    let (phi, shape) = doc.prior.to_signal()?;
    let partition = match (doc.structure, doc.block_size) {
        (StructureKind::Block, Some(k)) => Some(BlockPartition::new(phi.len(), k)?),
        (StructureKind::Block, None) => return invalid("`block_size` is required for block priors"),
        _ => None,
    };
    let improved = prior::improve(&phi, shape, doc.structure, partition.as_ref(), doc.level, doc.kappa)?;
    let shift = match shape {
        crate::ensembles::SignalShape::Matrix { rows, cols } => {
            Payload::from_matrix(&linalg::to_matrix(improved.shift.payload(), rows, cols))
        }
        _ => Payload::from_vector(improved.shift.payload()),
    };
    Ok(ImproveReport {
        structure: doc.structure,
        shift,
        kappa: improved.kappa,
        level: improved.level,
        estimated: improved.estimated,
    })
}

pub fn cmd_improve_prior(args: &CommonArgs) -> std::result::Result<u8, CliError> {
    let doc: ImproveDocument = serde_json::from_str(&read_input(args)?).map_err(Error::from)?;
    let report = improve_from_document(&doc)?;
    emit(args.out.as_deref(), &(serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n"))?;
    Ok(EXIT_OK)
}

/// Runs a parsed invocation and returns the process exit code.
pub fn run(cli: Cli) -> ExitCode {
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .target(env_logger::Target::Stderr)
        .try_init();
    let outcome = match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Bounds(a) => cmd_bounds(a),
        Command::PhaseTransition(a) => cmd_study(a, false),
        Command::Compare(a) => cmd_study(a, true),
        Command::ImprovePrior(a) => cmd_improve_prior(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {}", e.error);
            ExitCode::from(e.code)
        }
    }
}
