//! Discretized phase space and the measure types living on it.
//!
//! States are (position, velocity) nodes on a uniform tensor grid, indexed
//! row-major: `s = ix * n_v + iv`. Weights are masses at nodes, not density
//! values; densities are recovered as mass / (dx * dv) only for display.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numeric;

/// Relative deviation allowed between node spacings.
const SPACING_TOL: f64 = 1e-12;

/// Mass-sum tolerance for measure constructors.
const MASS_TOL: f64 = 1e-12;

/// Uniform (position, velocity) grid. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseGrid {
    x_nodes: Vec<f64>,
    v_nodes: Vec<f64>,
    dx: f64,
    dv: f64,
}

fn check_axis(nodes: &[f64], name: &str) -> Result<f64> {
    if nodes.is_empty() {
        return Err(Error::Validation(format!("{name}: no nodes")));
    }
    if nodes.len() == 1 {
        // Spacing is undefined on a single-node axis; 1.0 keeps cell areas finite.
        return Ok(1.0);
    }
    let d0 = nodes[1] - nodes[0];
    if d0 <= 0.0 {
        return Err(Error::Validation(format!("{name}: nodes not strictly increasing")));
    }
    for w in nodes.windows(2) {
        let d = w[1] - w[0];
        if d <= 0.0 {
            return Err(Error::Validation(format!("{name}: nodes not strictly increasing")));
        }
        if (d - d0).abs() > SPACING_TOL * d0.abs() {
            return Err(Error::Validation(format!("{name}: spacing not uniform")));
        }
    }
    Ok(d0)
}

impl PhaseGrid {
    pub fn new(x_nodes: Vec<f64>, v_nodes: Vec<f64>) -> Result<Self> {
        let dx = check_axis(&x_nodes, "x_nodes")?;
        let dv = check_axis(&v_nodes, "v_nodes")?;
        Ok(Self { x_nodes, v_nodes, dx, dv })
    }

    /// Evenly spaced grid over `[x_min, x_max] x [v_min, v_max]`.
    /// A single-node axis places its node at the interval midpoint.
    pub fn regular(
        x_min: f64,
        x_max: f64,
        n_x: usize,
        v_min: f64,
        v_max: f64,
        n_v: usize,
    ) -> Result<Self> {
        Self::new(linspace(x_min, x_max, n_x)?, linspace(v_min, v_max, n_v)?)
    }

    pub fn n_x(&self) -> usize {
        self.x_nodes.len()
    }

    pub fn n_v(&self) -> usize {
        self.v_nodes.len()
    }

    pub fn n_state(&self) -> usize {
        self.x_nodes.len() * self.v_nodes.len()
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dv(&self) -> f64 {
        self.dv
    }

    pub fn x_nodes(&self) -> &[f64] {
        &self.x_nodes
    }

    pub fn v_nodes(&self) -> &[f64] {
        &self.v_nodes
    }

    #[inline]
    pub fn state_index(&self, ix: usize, iv: usize) -> usize {
        ix * self.v_nodes.len() + iv
    }

    #[inline]
    pub fn split_index(&self, s: usize) -> (usize, usize) {
        (s / self.v_nodes.len(), s % self.v_nodes.len())
    }

    #[inline]
    pub fn coords(&self, s: usize) -> (f64, f64) {
        let (ix, iv) = self.split_index(s);
        (self.x_nodes[ix], self.v_nodes[iv])
    }

    /// True when v_nodes are symmetric about 0 (needed by time-reversal tests).
    pub fn is_v_symmetric(&self, tol: f64) -> bool {
        let n = self.v_nodes.len();
        (0..n).all(|i| (self.v_nodes[i] + self.v_nodes[n - 1 - i]).abs() <= tol)
    }

    /// State index with velocity negated. Only meaningful on v-symmetric grids.
    pub fn flip_v(&self, s: usize) -> usize {
        let (ix, iv) = self.split_index(s);
        self.state_index(ix, self.v_nodes.len() - 1 - iv)
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Validation("axis needs at least one node".into()));
    }
    if n == 1 {
        return Ok(vec![0.5 * (lo + hi)]);
    }
    if hi <= lo {
        return Err(Error::Validation(format!("axis bounds not increasing: [{lo}, {hi}]")));
    }
    let step = (hi - lo) / (n - 1) as f64;
    Ok((0..n).map(|i| lo + step * i as f64).collect())
}

/// Probability mass vector over the full phase grid.
#[derive(Debug, Clone)]
pub struct DiscreteMeasure {
    grid: Arc<PhaseGrid>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    /// Accepts weights already normalized to 1 within 1e-12, then removes the
    /// residual so downstream mass checks start from an exact unit total.
    pub fn new(grid: Arc<PhaseGrid>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != grid.n_state() {
            return Err(Error::Validation(format!(
                "measure has {} weights, grid has {} states",
                weights.len(),
                grid.n_state()
            )));
        }
        if let Some(i) = weights.iter().position(|w| !(*w >= 0.0)) {
            return Err(Error::Validation(format!(
                "measure weight {} at state {i} is negative or NaN",
                weights[i]
            )));
        }
        let total = numeric::sum(&weights);
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::Validation(format!("measure mass {total} differs from 1")));
        }
        Ok(Self::renormalized(grid, weights, total))
    }

    /// Normalizes arbitrary nonnegative mass. Errors on zero or negative total.
    pub fn from_unnormalized(grid: Arc<PhaseGrid>, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != grid.n_state() {
            return Err(Error::Validation(format!(
                "measure has {} weights, grid has {} states",
                weights.len(),
                grid.n_state()
            )));
        }
        if let Some(i) = weights.iter().position(|w| !(*w >= 0.0)) {
            return Err(Error::Validation(format!(
                "measure weight {} at state {i} is negative or NaN",
                weights[i]
            )));
        }
        let total = numeric::sum(&weights);
        if !(total > 0.0) {
            return Err(Error::Validation("measure has no mass".into()));
        }
        Ok(Self::renormalized(grid, weights, total))
    }

    fn renormalized(grid: Arc<PhaseGrid>, mut weights: Vec<f64>, total: f64) -> Self {
        if total != 1.0 {
            let inv = 1.0 / total;
            for w in &mut weights {
                *w *= inv;
            }
        }
        Self { grid, weights }
    }

    pub fn grid(&self) -> &Arc<PhaseGrid> {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_mass(&self) -> f64 {
        numeric::sum(&self.weights)
    }
}

/// Probability mass vector over position nodes only.
#[derive(Debug, Clone)]
pub struct PositionalMarginal {
    grid: Arc<PhaseGrid>,
    weights: Vec<f64>,
}

impl PositionalMarginal {
    pub fn new(grid: Arc<PhaseGrid>, weights: Vec<f64>) -> Result<Self> {
        Self::validate(&grid, &weights)?;
        let total = numeric::sum(&weights);
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::Validation(format!("marginal mass {total} differs from 1")));
        }
        Ok(Self::renormalized(grid, weights, total))
    }

    pub fn from_unnormalized(grid: Arc<PhaseGrid>, weights: Vec<f64>) -> Result<Self> {
        Self::validate(&grid, &weights)?;
        let total = numeric::sum(&weights);
        if !(total > 0.0) {
            return Err(Error::Validation("marginal has no mass".into()));
        }
        Ok(Self::renormalized(grid, weights, total))
    }

    fn validate(grid: &Arc<PhaseGrid>, weights: &[f64]) -> Result<()> {
        if weights.len() != grid.n_x() {
            return Err(Error::Validation(format!(
                "marginal has {} weights, grid has {} position nodes",
                weights.len(),
                grid.n_x()
            )));
        }
        if let Some(i) = weights.iter().position(|w| !(*w >= 0.0)) {
            return Err(Error::Validation(format!(
                "marginal weight {} at node {i} is negative or NaN",
                weights[i]
            )));
        }
        Ok(())
    }

    fn renormalized(grid: Arc<PhaseGrid>, mut weights: Vec<f64>, total: f64) -> Self {
        if total != 1.0 {
            let inv = 1.0 / total;
            for w in &mut weights {
                *w *= inv;
            }
        }
        Self { grid, weights }
    }

    /// Gaussian bump sampled at position nodes. Values below `floor` times the
    /// peak are cut to exact zero before normalization, which keeps file
    /// round-trips and dense-representation runs free of denormal tails.
    pub fn gaussian(grid: Arc<PhaseGrid>, mean: f64, sigma: f64, floor: f64) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::Validation(format!("gaussian sigma must be positive, got {sigma}")));
        }
        let raw: Vec<f64> = grid
            .x_nodes()
            .iter()
            .map(|&x| {
                let z = (x - mean) / sigma;
                (-0.5 * z * z).exp()
            })
            .collect();
        let peak = raw.iter().copied().fold(0.0, f64::max);
        let cut: Vec<f64> = raw
            .into_iter()
            .map(|w| if w < floor * peak { 0.0 } else { w })
            .collect();
        Self::from_unnormalized(grid, cut)
    }

    pub fn grid(&self) -> &Arc<PhaseGrid> {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Positional projection: sums velocity columns within each position slice.
pub fn project_x(mu: &DiscreteMeasure) -> PositionalMarginal {
    let grid = mu.grid().clone();
    let weights = project_x_weights(&grid, mu.weights());
    PositionalMarginal { grid, weights }
}

/// Same reduction on a raw weight slice (used on unnormalized marginals too).
pub fn project_x_weights(grid: &PhaseGrid, weights: &[f64]) -> Vec<f64> {
    let n_v = grid.n_v();
    (0..grid.n_x())
        .map(|ix| numeric::sum(&weights[ix * n_v..(ix + 1) * n_v]))
        .collect()
}

/// First and second central moments of a phase-space measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean_x: f64,
    pub mean_v: f64,
    pub var_x: f64,
    pub var_v: f64,
}

pub fn moments(mu: &DiscreteMeasure) -> Moments {
    let grid = mu.grid();
    let w = mu.weights();
    let (mut mx, mut mv) = (numeric::Accum::new(), numeric::Accum::new());
    for (s, &m) in w.iter().enumerate() {
        let (x, v) = grid.coords(s);
        mx.add(m * x);
        mv.add(m * v);
    }
    let (mean_x, mean_v) = (mx.value(), mv.value());
    let (mut vx, mut vv) = (numeric::Accum::new(), numeric::Accum::new());
    for (s, &m) in w.iter().enumerate() {
        let (x, v) = grid.coords(s);
        vx.add(m * (x - mean_x) * (x - mean_x));
        vv.add(m * (v - mean_v) * (v - mean_v));
    }
    Moments { mean_x, mean_v, var_x: vx.value(), var_v: vv.value() }
}

/// Histogram of samples binned to the nearest position node.
pub fn marginal_from_samples(xs: &[f64], grid: Arc<PhaseGrid>) -> Result<PositionalMarginal> {
    if xs.is_empty() {
        return Err(Error::Validation("no samples".into()));
    }
    let nodes = grid.x_nodes();
    let dx = grid.dx();
    let lo = nodes[0] - 0.5 * dx;
    let hi = nodes[nodes.len() - 1] + 0.5 * dx;
    let mut counts = vec![0.0; nodes.len()];
    for &x in xs {
        let idx = ((x - nodes[0]) / dx).round();
        if !(x >= lo && x <= hi) || idx < 0.0 || idx as usize >= nodes.len() {
            return Err(Error::SampleOutOfRange { value: x, lo, hi });
        }
        counts[idx as usize] += 1.0;
    }
    PositionalMarginal::from_unnormalized(grid, counts)
}
