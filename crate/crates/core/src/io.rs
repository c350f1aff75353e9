//! CSV readers and writers for the file formats the CLI speaks, plus the
//! output-directory lock.
//!
//! Coordinates and times are written with the shortest round-trip decimal
//! form; masses and other small magnitudes use exponent notation so tails do
//! not degenerate into hundreds of zeros. Both re-parse exactly.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::bregman::{SolveReport, SweepTrace};
use crate::error::{Error, Result};
use crate::interpolate::PathPoint;
use crate::phasegrid::{DiscreteMeasure, PhaseGrid, PositionalMarginal};

/// Loaded marginal weights must sum to 1 within this before silent
/// renormalization; anything further off is an error.
const LOAD_MASS_TOL: f64 = 1e-6;

fn fmt_coord(x: f64) -> String {
    format!("{x}")
}

fn fmt_mass(x: f64) -> String {
    format!("{x:e}")
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.trim()
        .parse::<f64>()
        .map_err(|_| Error::Parse { line, msg: format!("not a number: {tok:?}") })
}

/// Reads a `x,weight` CSV whose position nodes must match the grid.
pub fn read_positional_csv(path: &Path, grid: Arc<PhaseGrid>) -> Result<PositionalMarginal> {
    let file = File::open(path)
        .map_err(|e| Error::Validation(format!("cannot open {}: {e}", path.display())))?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines().enumerate();
    let header = match lines.next() {
        Some((_, Ok(h))) => h,
        Some((_, Err(e))) => return Err(e.into()),
        None => return Err(Error::Parse { line: 1, msg: "empty marginal file".into() }),
    };
    if header.trim() != "x,weight" {
        return Err(Error::Parse { line: 1, msg: format!("expected header x,weight, got {header:?}") });
    }
    let mut xs = Vec::new();
    let mut ws = Vec::new();
    for (i, line) in lines {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let (Some(xt), Some(wt), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse { line: lineno, msg: "expected two comma-separated fields".into() });
        };
        xs.push(parse_f64(xt, lineno)?);
        ws.push(parse_f64(wt, lineno)?);
    }
    if xs.len() != grid.n_x() {
        return Err(Error::Validation(format!(
            "{}: has {} rows, grid has {} position nodes",
            path.display(),
            xs.len(),
            grid.n_x()
        )));
    }
    for (i, (&x, &gx)) in xs.iter().zip(grid.x_nodes()).enumerate() {
        if (x - gx).abs() > 1e-8 * (1.0 + gx.abs()) {
            return Err(Error::Validation(format!(
                "{}: row {} position {} does not match grid node {}",
                path.display(),
                i + 2,
                x,
                gx
            )));
        }
    }
    if ws.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Validation(format!(
            "{}: weights must be nonnegative",
            path.display()
        )));
    }
    let total: f64 = crate::numeric::sum(&ws);
    if (total - 1.0).abs() >= LOAD_MASS_TOL {
        return Err(Error::Validation(format!(
            "{}: weights sum to {total}, further than {LOAD_MASS_TOL} from 1",
            path.display()
        )));
    }
    PositionalMarginal::from_unnormalized(grid, ws)
}

pub fn write_positional_csv<W: Write>(mut w: W, rho: &PositionalMarginal) -> Result<()> {
    writeln!(w, "x,weight")?;
    for (x, m) in rho.grid().x_nodes().iter().zip(rho.weights()) {
        writeln!(w, "{},{}", fmt_coord(*x), fmt_mass(*m))?;
    }
    Ok(())
}

/// Long-format phase measure: `x,v,mass`, one row per state.
pub fn write_measure_csv<W: Write>(mut w: W, mu: &DiscreteMeasure) -> Result<()> {
    writeln!(w, "x,v,mass")?;
    let grid = mu.grid();
    for (s, m) in mu.weights().iter().enumerate() {
        let (x, v) = grid.coords(s);
        writeln!(w, "{},{},{}", fmt_coord(x), fmt_coord(v), fmt_mass(*m))?;
    }
    Ok(())
}

/// Writes the header of the timed long format (`t,x,v,mass`).
pub fn write_timed_measure_header<W: Write>(mut w: W) -> Result<()> {
    writeln!(w, "t,x,v,mass")?;
    Ok(())
}

/// Appends one time block to a timed long-format CSV.
pub fn write_timed_measure_block<W: Write>(mut w: W, t: f64, mu: &DiscreteMeasure) -> Result<()> {
    let grid = mu.grid();
    for (s, m) in mu.weights().iter().enumerate() {
        let (x, v) = grid.coords(s);
        writeln!(w, "{},{},{},{}", fmt_coord(t), fmt_coord(x), fmt_coord(v), fmt_mass(*m))?;
    }
    Ok(())
}

pub fn write_mean_path_csv<W: Write>(mut w: W, path: &[PathPoint]) -> Result<()> {
    writeln!(w, "t,mean_x,mean_v")?;
    for p in path {
        writeln!(w, "{},{},{}", fmt_coord(p.t), fmt_coord(p.mean_x), fmt_coord(p.mean_v))?;
    }
    Ok(())
}

/// Knot file for the spline reference: header `t,x`.
pub fn read_knots_csv(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Validation(format!("cannot open {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "t,x" => {}
        Some((_, h)) => {
            return Err(Error::Parse { line: 1, msg: format!("expected header t,x, got {h:?}") })
        }
        None => return Err(Error::Parse { line: 1, msg: "empty knot file".into() }),
    }
    let mut ts = Vec::new();
    let mut xs = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let mut parts = line.split(',');
        let (Some(tt), Some(xt), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::Parse { line: lineno, msg: "expected two comma-separated fields".into() });
        };
        ts.push(parse_f64(tt, lineno)?);
        xs.push(parse_f64(xt, lineno)?);
    }
    Ok((ts, xs))
}

pub fn write_sampled_curve_csv<W: Write>(mut w: W, pts: &[(f64, f64)]) -> Result<()> {
    writeln!(w, "t,x")?;
    for (t, x) in pts {
        writeln!(w, "{},{}", fmt_coord(*t), fmt_coord(*x))?;
    }
    Ok(())
}

/// One row of the noise-level sweep comparison table.
#[derive(Debug, Clone, Copy)]
pub struct EpsSweepRow {
    pub eps: f64,
    pub t: f64,
    pub mean_x: f64,
    pub mean_v: f64,
    pub spline_x: f64,
    pub spline_v: f64,
    pub abs_err_x: f64,
    pub converged: bool,
}

pub fn write_eps_sweep_csv<W: Write>(mut w: W, rows: &[EpsSweepRow]) -> Result<()> {
    writeln!(w, "epsilon,t,mean_x,mean_v,spline_x,spline_v,abs_err_x,converged")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            fmt_coord(r.eps),
            fmt_coord(r.t),
            fmt_coord(r.mean_x),
            fmt_coord(r.mean_v),
            fmt_coord(r.spline_x),
            fmt_coord(r.spline_v),
            fmt_mass(r.abs_err_x),
            r.converged
        )?;
    }
    Ok(())
}

/// Structured-text run summary, key = value per line.
pub fn write_report<W: Write>(mut w: W, report: &SolveReport, extra: &[(&str, String)]) -> Result<()> {
    writeln!(w, "converged = {}", report.converged)?;
    writeln!(w, "sweeps = {}", report.sweeps)?;
    writeln!(w, "final_violation = {}", fmt_mass(report.final_violation))?;
    if let Some(last) = report.objective_trace.last() {
        writeln!(w, "objective = {}", fmt_mass(*last))?;
    }
    writeln!(w, "wall_seconds = {}", fmt_coord(report.wall_seconds))?;
    for (k, v) in extra {
        writeln!(w, "{k} = {v}")?;
    }
    Ok(())
}

/// Streaming per-sweep diagnostics: `sweep,violation,objective,seconds`.
pub struct TraceWriter {
    inner: BufWriter<File>,
}

impl TraceWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path)?;
        let mut inner = BufWriter::new(file);
        writeln!(inner, "sweep,violation,objective,seconds")?;
        Ok(Self { inner })
    }

    pub fn append(&mut self, row: &SweepTrace) -> Result<()> {
        writeln!(
            self.inner,
            "{},{},{},{}",
            row.sweep,
            fmt_mass(row.violation),
            fmt_mass(row.objective),
            fmt_coord(row.seconds)
        )?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Guards an output directory against concurrent runs. The lock file is
/// removed on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".mmsb-lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Validation(
                format!(
                    "output directory {} is locked by another run (remove {} if stale)",
                    dir.display(),
                    path.display()
                ),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
