//! Problem configuration: a sectioned key = value file (TOML) naming the
//! time points, noise level, grid, marginal files, and solver options.
//!
//! ```toml
//! [problem]
//! times = [0.0, 0.5, 1.0]
//! epsilon = 0.1
//! cost_mode = "exact"            # optional: "exact" (default) | "uniform"
//! marginals = ["rho0.csv", "rho1.csv", "rho2.csv"]
//!
//! [grid]
//! x_min = -1.0
//! x_max = 2.0
//! n_x = 48
//! v_min = -6.0
//! v_max = 6.0
//! n_v = 48
//!
//! [solver]                       # optional, shown with defaults
//! tolerance = 1e-8
//! max_sweeps = 5000
//! representation = "scaling"     # "scaling" | "dense"
//! sweep_order = "forward"        # "forward" | "forward-backward" | "random"
//! seed = 0
//! max_kernel_entries = 64000000
//!
//! [output]                       # optional
//! directory = "out"
//! trace = false
//! ```
//!
//! Marginal paths are resolved relative to the config file's directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;

use crate::bregman::{Problem, Representation, SolveOptions, SweepOrder};
use crate::error::{Error, Result};
use crate::io::read_positional_csv;
use crate::kernel::{CostMode, DEFAULT_KERNEL_BUDGET};
use crate::phasegrid::{PhaseGrid, PositionalMarginal};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    problem: RawProblem,
    grid: RawGrid,
    #[serde(default)]
    solver: RawSolver,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    times: Vec<f64>,
    epsilon: f64,
    #[serde(default)]
    cost_mode: Option<String>,
    marginals: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    x_min: f64,
    x_max: f64,
    n_x: usize,
    v_min: f64,
    v_max: f64,
    n_v: usize,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    tolerance: Option<f64>,
    max_sweeps: Option<usize>,
    representation: Option<String>,
    sweep_order: Option<String>,
    seed: Option<u64>,
    max_kernel_entries: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    directory: Option<String>,
    trace: Option<bool>,
}

/// A validated problem specification with all marginal files loaded.
#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub times: Vec<f64>,
    pub eps: f64,
    pub cost_mode: CostMode,
    pub grid: Arc<PhaseGrid>,
    pub marginal_paths: Vec<PathBuf>,
    pub marginals: Vec<PositionalMarginal>,
    pub tolerance: f64,
    pub max_sweeps: usize,
    pub representation: Representation,
    pub sweep_order: SweepOrder,
    pub seed: u64,
    pub max_kernel_entries: u64,
    pub trace: bool,
    pub out_dir: PathBuf,
}

impl ProblemSpec {
    pub fn to_problem(&self) -> Problem {
        Problem {
            grid: self.grid.clone(),
            times: self.times.clone(),
            eps: self.eps,
            cost_mode: self.cost_mode,
            marginals: self.marginals.clone(),
            options: SolveOptions {
                tolerance: self.tolerance,
                max_sweeps: self.max_sweeps,
                representation: self.representation,
                sweep_order: self.sweep_order,
                seed: self.seed,
                max_kernel_entries: self.max_kernel_entries,
            },
        }
    }
}

/// Parses, validates, and loads a config file, including all marginal CSVs.
pub fn load_spec(path: &Path) -> Result<ProblemSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Validation(format!("cannot read config {}: {e}", path.display()))
    })?;
    let raw: RawConfig = toml::from_str(&text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
            .unwrap_or(0);
        Error::Parse { line, msg: e.message().to_string() }
    })?;

    if raw.problem.times.len() < 2 {
        return Err(Error::Validation("times: need at least two time points".into()));
    }
    if raw.problem.times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Validation("times: not strictly increasing".into()));
    }
    if !(raw.problem.epsilon > 0.0) {
        return Err(Error::Validation(format!(
            "epsilon: must be positive, got {}",
            raw.problem.epsilon
        )));
    }
    if raw.problem.marginals.len() != raw.problem.times.len() {
        return Err(Error::Validation(format!(
            "marginals: got {} files, need one per time point ({})",
            raw.problem.marginals.len(),
            raw.problem.times.len()
        )));
    }
    let cost_mode = match &raw.problem.cost_mode {
        Some(s) => CostMode::parse(s)?,
        None => CostMode::Exact,
    };

    let grid = Arc::new(PhaseGrid::regular(
        raw.grid.x_min,
        raw.grid.x_max,
        raw.grid.n_x,
        raw.grid.v_min,
        raw.grid.v_max,
        raw.grid.n_v,
    )?);

    let tolerance = raw.solver.tolerance.unwrap_or(1e-8);
    if !(tolerance > 0.0) {
        return Err(Error::Validation(format!("tolerance: must be positive, got {tolerance}")));
    }
    let max_sweeps = raw.solver.max_sweeps.unwrap_or(5000);
    let representation = match &raw.solver.representation {
        Some(s) => Representation::parse(s)?,
        None => Representation::Scaling,
    };
    let sweep_order = match &raw.solver.sweep_order {
        Some(s) => SweepOrder::parse(s)?,
        None => SweepOrder::Forward,
    };

    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut marginal_paths = Vec::new();
    let mut marginals = Vec::new();
    for rel in &raw.problem.marginals {
        let p = base.join(rel);
        if !p.is_file() {
            return Err(Error::Validation(format!("marginal file not found: {}", p.display())));
        }
        marginals.push(read_positional_csv(&p, grid.clone())?);
        marginal_paths.push(p);
    }

    Ok(ProblemSpec {
        times: raw.problem.times,
        eps: raw.problem.epsilon,
        cost_mode,
        grid,
        marginal_paths,
        marginals,
        tolerance,
        max_sweeps,
        representation,
        sweep_order,
        seed: raw.solver.seed.unwrap_or(0),
        max_kernel_entries: raw.solver.max_kernel_entries.unwrap_or(DEFAULT_KERNEL_BUDGET),
        trace: raw.output.trace.unwrap_or(false),
        out_dir: PathBuf::from(raw.output.directory.as_deref().unwrap_or("out")),
    })
}
