//! Cyclic KL projections onto the marginal constraint sets.
//!
//! The optimization variables are couplings over consecutive-time state
//! pairs. Three closed-form projections exist: one fixing the positional
//! marginal at the first node, one at the last, and one that rebalances the
//! two couplings adjacent to an interior node around their geometric-mean
//! marginal. A sweep applies all of them in index order; the solver sweeps
//! until the largest constraint mismatch falls under tolerance.
//!
//! Couplings come in two representations with identical semantics: a dense
//! mass table, and a scaling form `a ⊙ K ⊙ b` kept entirely in the log
//! domain. Every update multiplies by a function of a single endpoint state,
//! so the scaling form is closed under all three projections.

use std::sync::Arc;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernel::{build_gibbs, CostMode, GibbsKernel, DEFAULT_KERNEL_BUDGET};
use crate::numeric::{self, ROW_CHUNK};
use crate::phasegrid::{project_x_weights, DiscreteMeasure, PhaseGrid, PositionalMarginal};

/// Storage strategy for couplings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    Dense,
    Scaling,
}

impl Representation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Representation::Dense),
            "scaling" => Ok(Representation::Scaling),
            other => Err(Error::Validation(format!(
                "representation must be \"dense\" or \"scaling\", got \"{other}\""
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Representation::Dense => "dense",
            Representation::Scaling => "scaling",
        }
    }
}

/// Order in which the constraint sets are visited within one sweep.
/// Only `Forward` is covered by the acceptance suite; the others are
/// experimental knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepOrder {
    Forward,
    ForwardBackward,
    Random,
}

impl SweepOrder {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(SweepOrder::Forward),
            "forward-backward" => Ok(SweepOrder::ForwardBackward),
            "random" => Ok(SweepOrder::Random),
            other => Err(Error::Validation(format!(
                "sweep_order must be \"forward\", \"forward-backward\" or \"random\", got \"{other}\""
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SweepOrder::Forward => "forward",
            SweepOrder::ForwardBackward => "forward-backward",
            SweepOrder::Random => "random",
        }
    }
}

/// Joint mass over consecutive-time state pairs, dense mass table.
///
/// Alongside the masses it accumulates the per-row/per-column log factors
/// applied so far; since every projection is a row or column scaling of the
/// normalized prior, these give the objective without an n^2 log pass.
#[derive(Debug, Clone)]
pub struct DenseCoupling {
    grid: Arc<PhaseGrid>,
    mass: Vec<f64>,
    log_row_acc: Vec<f64>,
    log_col_acc: Vec<f64>,
    /// log of the initial uniform normalization (-log sum K).
    log_base: f64,
}

/// Coupling in scaling form: `pi[s0,s1] = exp(log_a[s0] + log K[s0,s1] + log_b[s1])`.
#[derive(Debug, Clone)]
pub struct ScalingCoupling {
    kernel: Arc<GibbsKernel>,
    log_a: Vec<f64>,
    log_b: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum Coupling {
    Dense(DenseCoupling),
    Scaling(ScalingCoupling),
}

impl Coupling {
    /// Normalized prior kernel as the starting coupling.
    pub fn normalized_prior(kernel: &Arc<GibbsKernel>, repr: Representation) -> Coupling {
        let n = kernel.n_state();
        match repr {
            Representation::Dense => Coupling::Dense(DenseCoupling {
                grid: kernel.grid().clone(),
                mass: kernel.dense_normalized(),
                log_row_acc: vec![0.0; n],
                log_col_acc: vec![0.0; n],
                log_base: -kernel.log_total(),
            }),
            Representation::Scaling => {
                // the whole normalization constant lives in log_a
                let z = kernel.log_total();
                Coupling::Scaling(ScalingCoupling {
                    kernel: kernel.clone(),
                    log_a: vec![-z; n],
                    log_b: vec![0.0; n],
                })
            }
        }
    }

    pub fn grid(&self) -> &Arc<PhaseGrid> {
        match self {
            Coupling::Dense(c) => &c.grid,
            Coupling::Scaling(c) => c.kernel.grid(),
        }
    }

    pub fn representation(&self) -> Representation {
        match self {
            Coupling::Dense(_) => Representation::Dense,
            Coupling::Scaling(_) => Representation::Scaling,
        }
    }

    pub fn n_state(&self) -> usize {
        self.grid().n_state()
    }

    /// Left (row) state marginal, linear domain.
    pub fn row_marginal(&self) -> Vec<f64> {
        let n = self.n_state();
        match self {
            Coupling::Dense(c) => {
                let mut out = vec![0.0; n];
                out.par_iter_mut().enumerate().for_each(|(s0, o)| {
                    *o = numeric::sum(&c.mass[s0 * n..(s0 + 1) * n]);
                });
                out
            }
            Coupling::Scaling(c) => {
                let mut log_m = vec![0.0; n];
                c.kernel.log_row_contract(&c.log_b, &mut log_m);
                log_m
                    .iter()
                    .zip(&c.log_a)
                    .map(|(m, a)| (m + a).exp())
                    .collect()
            }
        }
    }

    /// Right (column) state marginal, linear domain.
    pub fn col_marginal(&self) -> Vec<f64> {
        let n = self.n_state();
        match self {
            Coupling::Dense(c) => dense_col_sums(&c.mass, n),
            Coupling::Scaling(c) => {
                let mut log_m = vec![0.0; n];
                c.kernel.log_col_contract(&c.log_a, &mut log_m);
                log_m
                    .iter()
                    .zip(&c.log_b)
                    .map(|(m, b)| (m + b).exp())
                    .collect()
            }
        }
    }

    pub fn total_mass(&self) -> f64 {
        numeric::sum(&self.row_marginal())
    }

    /// Linear-domain masses of one row.
    pub fn row_masses(&self, s0: usize, buf: &mut [f64]) {
        let n = self.n_state();
        debug_assert_eq!(buf.len(), n);
        match self {
            Coupling::Dense(c) => buf.copy_from_slice(&c.mass[s0 * n..(s0 + 1) * n]),
            Coupling::Scaling(c) => {
                let a = c.log_a[s0];
                if a == f64::NEG_INFINITY {
                    buf.fill(0.0);
                    return;
                }
                let row = &c.kernel.log_weights()[s0 * n..(s0 + 1) * n];
                for ((o, k), b) in buf.iter_mut().zip(row).zip(&c.log_b) {
                    *o = (a + k + b).exp();
                }
            }
        }
    }

    /// Materialized mass table; intended for small instances and diagnostics.
    pub fn to_mass_vec(&self) -> Vec<f64> {
        let n = self.n_state();
        let mut out = vec![0.0; n * n];
        for s0 in 0..n {
            let (lo, hi) = (s0 * n, (s0 + 1) * n);
            self.row_masses(s0, &mut out[lo..hi]);
        }
        out
    }
}

/// Column sums of a dense row-major table, chunked deterministically.
fn dense_col_sums(mass: &[f64], n: usize) -> Vec<f64> {
    let partials: Vec<Vec<f64>> = mass
        .par_chunks(n * ROW_CHUNK)
        .map(|chunk| {
            let mut acc = vec![0.0f64; n];
            for row in chunk.chunks_exact(n) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            acc
        })
        .collect();
    let mut out = vec![numeric::Accum::new(); n];
    for p in &partials {
        for (o, &v) in out.iter_mut().zip(p) {
            o.add(v);
        }
    }
    out.into_iter().map(|a| a.value()).collect()
}

/// KL divergence `sum a ln(a/b) - a + b` with the 0 ln 0 = 0 convention.
pub fn kl(alpha: &[f64], beta: &[f64]) -> Result<f64> {
    debug_assert_eq!(alpha.len(), beta.len());
    let mut acc = numeric::Accum::new();
    for (i, (&a, &b)) in alpha.iter().zip(beta).enumerate() {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(Error::SupportMismatch { index: i });
            }
            acc.add(a * (a / b).ln() - a + b);
        } else {
            acc.add(b);
        }
    }
    Ok(acc.value())
}

/// Per-position ratio factors for an endpoint projection, with the 0/0 = 0
/// convention and a hard error where mass is demanded but none is available.
fn positional_factors(
    rho: &PositionalMarginal,
    m_pos: &[f64],
    node: usize,
) -> Result<Vec<f64>> {
    rho.weights()
        .iter()
        .zip(m_pos)
        .enumerate()
        .map(|(ix, (&r, &m))| {
            if r > 0.0 {
                if m > 0.0 {
                    Ok(r / m)
                } else {
                    Err(Error::StarvedConstraint { node, position: ix })
                }
            } else {
                Ok(0.0)
            }
        })
        .collect()
}

/// Projection onto the first constraint set: rescales row blocks so the left
/// positional marginal equals `rho`. Returns the resulting node marginal.
pub fn project_first(
    coupling: &mut Coupling,
    rho: &PositionalMarginal,
) -> Result<DiscreteMeasure> {
    let grid = coupling.grid().clone();
    let n = grid.n_state();
    let n_v = grid.n_v();
    match coupling {
        Coupling::Dense(c) => {
            let m_state = {
                let mut out = vec![0.0; n];
                out.par_iter_mut().enumerate().for_each(|(s0, o)| {
                    *o = numeric::sum(&c.mass[s0 * n..(s0 + 1) * n]);
                });
                out
            };
            let m_pos = project_x_weights(&grid, &m_state);
            let f = positional_factors(rho, &m_pos, 0)?;
            c.mass.par_chunks_mut(n).enumerate().for_each(|(s0, row)| {
                let fac = f[s0 / n_v];
                if fac != 1.0 {
                    for v in row {
                        *v *= fac;
                    }
                }
            });
            let mut mu = vec![0.0; n];
            for s0 in 0..n {
                let fac = f[s0 / n_v];
                c.log_row_acc[s0] += fac.ln();
                mu[s0] = m_state[s0] * fac;
            }
            DiscreteMeasure::new(grid, mu)
        }
        Coupling::Scaling(c) => {
            let mut log_m = vec![0.0; n];
            c.kernel.log_row_contract(&c.log_b, &mut log_m);
            for (m, a) in log_m.iter_mut().zip(&c.log_a) {
                *m += a;
            }
            let inc = log_positional_increments(rho, &log_m, n_v, 0)?;
            let mut mu = vec![0.0; n];
            for s0 in 0..n {
                let i = inc[s0 / n_v];
                c.log_a[s0] += i;
                mu[s0] = (log_m[s0] + i).exp();
            }
            DiscreteMeasure::new(grid, mu)
        }
    }
}

/// Mirror of [`project_first`] acting on the right (column) index. `node` is
/// the time index reported by starvation errors.
pub fn project_last(
    coupling: &mut Coupling,
    rho: &PositionalMarginal,
    node: usize,
) -> Result<DiscreteMeasure> {
    let grid = coupling.grid().clone();
    let n = grid.n_state();
    let n_v = grid.n_v();
    match coupling {
        Coupling::Dense(c) => {
            let m_state = dense_col_sums(&c.mass, n);
            let m_pos = project_x_weights(&grid, &m_state);
            let f = positional_factors(rho, &m_pos, node)?;
            c.mass.par_chunks_mut(n).for_each(|row| {
                for (s1, v) in row.iter_mut().enumerate() {
                    *v *= f[s1 / n_v];
                }
            });
            let mut mu = vec![0.0; n];
            for s1 in 0..n {
                let fac = f[s1 / n_v];
                c.log_col_acc[s1] += fac.ln();
                mu[s1] = m_state[s1] * fac;
            }
            DiscreteMeasure::new(grid, mu)
        }
        Coupling::Scaling(c) => {
            let mut log_m = vec![0.0; n];
            c.kernel.log_col_contract(&c.log_a, &mut log_m);
            for (m, b) in log_m.iter_mut().zip(&c.log_b) {
                *m += b;
            }
            let inc = log_positional_increments(rho, &log_m, n_v, node)?;
            let mut mu = vec![0.0; n];
            for s1 in 0..n {
                let i = inc[s1 / n_v];
                c.log_b[s1] += i;
                mu[s1] = (log_m[s1] + i).exp();
            }
            DiscreteMeasure::new(grid, mu)
        }
    }
}

/// Log-domain per-position increments `ln rho[ix] - log m_pos[ix]`.
fn log_positional_increments(
    rho: &PositionalMarginal,
    log_m_state: &[f64],
    n_v: usize,
    node: usize,
) -> Result<Vec<f64>> {
    let n_x = rho.weights().len();
    let mut inc = vec![f64::NEG_INFINITY; n_x];
    for ix in 0..n_x {
        let r = rho.weights()[ix];
        if r > 0.0 {
            let log_m = numeric::log_sum_exp(&log_m_state[ix * n_v..(ix + 1) * n_v]);
            if log_m == f64::NEG_INFINITY {
                return Err(Error::StarvedConstraint { node, position: ix });
            }
            inc[ix] = r.ln() - log_m;
        }
    }
    Ok(inc)
}

/// Projection onto an interior constraint set. The shared node marginal is
/// the positional-rescaled geometric mean of the marginals the two couplings
/// currently induce; both couplings are rescaled to carry it exactly.
/// Returns the common node marginal.
pub fn project_interior(
    left: &mut Coupling,
    right: &mut Coupling,
    rho: &PositionalMarginal,
    node: usize,
) -> Result<DiscreteMeasure> {
    let grid = left.grid().clone();
    if grid.as_ref() != right.grid().as_ref() {
        return Err(Error::Validation("adjacent couplings live on different grids".into()));
    }
    let n = grid.n_state();
    let n_v = grid.n_v();
    match (left, right) {
        (Coupling::Dense(cl), Coupling::Dense(cr)) => {
            let m_l = dense_col_sums(&cl.mass, n);
            let m_r = {
                let mut out = vec![0.0; n];
                out.par_iter_mut().enumerate().for_each(|(s0, o)| {
                    *o = numeric::sum(&cr.mass[s0 * n..(s0 + 1) * n]);
                });
                out
            };
            let g: Vec<f64> = m_l.iter().zip(&m_r).map(|(&a, &b)| (a * b).sqrt()).collect();
            let z = project_x_weights(&grid, &g);
            let mut mu = vec![0.0; n];
            for s in 0..n {
                let ix = s / n_v;
                let r = rho.weights()[ix];
                if r > 0.0 {
                    if z[ix] <= 0.0 {
                        return Err(Error::StarvedConstraint { node, position: ix });
                    }
                    mu[s] = r * g[s] / z[ix];
                }
            }
            let f_l: Vec<f64> = mu
                .iter()
                .zip(&m_l)
                .map(|(&m, &d)| if d > 0.0 { m / d } else { 0.0 })
                .collect();
            let f_r: Vec<f64> = mu
                .iter()
                .zip(&m_r)
                .map(|(&m, &d)| if d > 0.0 { m / d } else { 0.0 })
                .collect();
            cl.mass.par_chunks_mut(n).for_each(|row| {
                for (s1, v) in row.iter_mut().enumerate() {
                    *v *= f_l[s1];
                }
            });
            cr.mass.par_chunks_mut(n).enumerate().for_each(|(s0, row)| {
                let fac = f_r[s0];
                if fac != 1.0 {
                    for v in row {
                        *v *= fac;
                    }
                }
            });
            for s in 0..n {
                cl.log_col_acc[s] += f_l[s].ln();
                cr.log_row_acc[s] += f_r[s].ln();
            }
            DiscreteMeasure::new(grid, mu)
        }
        (Coupling::Scaling(cl), Coupling::Scaling(cr)) => {
            let mut log_m_l = vec![0.0; n];
            cl.kernel.log_col_contract(&cl.log_a, &mut log_m_l);
            for (m, b) in log_m_l.iter_mut().zip(&cl.log_b) {
                *m += b;
            }
            let mut log_m_r = vec![0.0; n];
            cr.kernel.log_row_contract(&cr.log_b, &mut log_m_r);
            for (m, a) in log_m_r.iter_mut().zip(&cr.log_a) {
                *m += a;
            }
            // geometric mean in the log domain
            let log_g: Vec<f64> = log_m_l
                .iter()
                .zip(&log_m_r)
                .map(|(&a, &b)| 0.5 * (a + b))
                .collect();
            let mut log_mu = vec![f64::NEG_INFINITY; n];
            for ix in 0..grid.n_x() {
                let r = rho.weights()[ix];
                if r > 0.0 {
                    let log_z = numeric::log_sum_exp(&log_g[ix * n_v..(ix + 1) * n_v]);
                    if log_z == f64::NEG_INFINITY {
                        return Err(Error::StarvedConstraint { node, position: ix });
                    }
                    let log_r = r.ln();
                    for iv in 0..n_v {
                        let s = ix * n_v + iv;
                        log_mu[s] = log_r + log_g[s] - log_z;
                    }
                }
            }
            let mut mu = vec![0.0; n];
            for s in 0..n {
                let lm = log_mu[s];
                let inc_l = if lm == f64::NEG_INFINITY { f64::NEG_INFINITY } else { lm - log_m_l[s] };
                let inc_r = if lm == f64::NEG_INFINITY { f64::NEG_INFINITY } else { lm - log_m_r[s] };
                cl.log_b[s] += inc_l;
                cr.log_a[s] += inc_r;
                mu[s] = lm.exp();
            }
            DiscreteMeasure::new(grid, mu)
        }
        _ => Err(Error::Validation("adjacent couplings use different representations".into())),
    }
}

/// Chain of couplings plus cached node marginals.
#[derive(Debug, Clone)]
pub struct ChainState {
    couplings: Vec<Coupling>,
    cached: Vec<Option<DiscreteMeasure>>,
    sweeps: usize,
}

impl ChainState {
    pub fn from_prior(kernels: &[Arc<GibbsKernel>], repr: Representation) -> ChainState {
        let couplings: Vec<Coupling> = kernels
            .iter()
            .map(|k| Coupling::normalized_prior(k, repr))
            .collect();
        let cached = vec![None; kernels.len() + 1];
        ChainState { couplings, cached, sweeps: 0 }
    }

    pub fn n_intervals(&self) -> usize {
        self.couplings.len()
    }

    pub fn couplings(&self) -> &[Coupling] {
        &self.couplings
    }

    pub fn grid(&self) -> &Arc<PhaseGrid> {
        self.couplings[0].grid()
    }

    pub fn sweeps_done(&self) -> usize {
        self.sweeps
    }

    /// Node marginal as induced by the coupling left of node `i` (its column
    /// marginal); `None` for i = 0.
    pub fn marginal_from_left(&self, i: usize) -> Option<Vec<f64>> {
        (i > 0).then(|| self.couplings[i - 1].col_marginal())
    }

    /// Node marginal as induced by the coupling right of node `i` (its row
    /// marginal); `None` for the last node.
    pub fn marginal_from_right(&self, i: usize) -> Option<Vec<f64>> {
        (i < self.couplings.len()).then(|| self.couplings[i].row_marginal())
    }

    /// Cached node marginal if fresh, otherwise recomputed from an adjacent
    /// coupling.
    pub fn node_marginal(&self, i: usize) -> Result<DiscreteMeasure> {
        if let Some(mu) = &self.cached[i] {
            return Ok(mu.clone());
        }
        let w = self
            .marginal_from_right(i)
            .or_else(|| self.marginal_from_left(i))
            .expect("chain has at least one coupling");
        DiscreteMeasure::from_unnormalized(self.grid().clone(), w)
    }

    /// Applies the projection for constraint set `i`, refreshing the cache at
    /// `i` and invalidating the neighbors it touched.
    pub fn project_node(&mut self, i: usize, rhos: &[PositionalMarginal]) -> Result<()> {
        let last = self.couplings.len();
        let mu = if i == 0 {
            let mu = project_first(&mut self.couplings[0], &rhos[0])?;
            self.cached[1] = None;
            mu
        } else if i == last {
            let mu = project_last(&mut self.couplings[last - 1], &rhos[last], last)?;
            self.cached[last - 1] = None;
            mu
        } else {
            let (a, b) = self.couplings.split_at_mut(i);
            let mu = project_interior(&mut a[i - 1], &mut b[0], &rhos[i], i)?;
            self.cached[i - 1] = None;
            self.cached[i + 1] = None;
            mu
        };
        self.cached[i] = Some(mu);
        Ok(())
    }

    /// One full pass over the constraint sets in the given node order.
    pub fn sweep_ordered(&mut self, rhos: &[PositionalMarginal], order: &[usize]) -> Result<()> {
        for &i in order {
            self.project_node(i, rhos)?;
        }
        self.sweeps += 1;
        Ok(())
    }

    /// One forward sweep 0, 1, ..., N.
    pub fn sweep(&mut self, rhos: &[PositionalMarginal]) -> Result<()> {
        let order: Vec<usize> = (0..=self.couplings.len()).collect();
        self.sweep_ordered(rhos, &order)
    }
}

/// Row and column marginals of every coupling, computed once per sweep and
/// shared by the violation and objective evaluations.
struct ChainMarginals {
    row: Vec<Vec<f64>>,
    col: Vec<Vec<f64>>,
}

fn chain_marginals(state: &ChainState) -> ChainMarginals {
    ChainMarginals {
        row: state.couplings.iter().map(|c| c.row_marginal()).collect(),
        col: state.couplings.iter().map(|c| c.col_marginal()).collect(),
    }
}

fn violation_from(margs: &ChainMarginals, grid: &PhaseGrid, rhos: &[PositionalMarginal]) -> f64 {
    let n_nodes = rhos.len();
    let mut worst_pos: f64 = 0.0;
    for i in 0..n_nodes {
        if i < margs.row.len() {
            let p = project_x_weights(grid, &margs.row[i]);
            worst_pos = worst_pos.max(numeric::l1_distance(&p, rhos[i].weights()));
        }
        if i > 0 {
            let p = project_x_weights(grid, &margs.col[i - 1]);
            worst_pos = worst_pos.max(numeric::l1_distance(&p, rhos[i].weights()));
        }
    }
    let mut worst_int: f64 = 0.0;
    for i in 1..n_nodes - 1 {
        worst_int = worst_int.max(numeric::l1_distance(&margs.col[i - 1], &margs.row[i]));
    }
    worst_pos + worst_int
}

/// Largest L1 mismatch of the positional constraints over all nodes and both
/// inducing couplings, plus the largest L1 disagreement between the two
/// marginals induced at each interior node. This is the stopping statistic.
pub fn constraint_violation(state: &ChainState, rhos: &[PositionalMarginal]) -> f64 {
    violation_from(&chain_marginals(state), state.grid(), rhos)
}

/// Sum over intervals of `KL(pi_i | K_i)` with unnormalized reference
/// kernels. Exact computation; for the dense representation this walks the
/// full mass table.
pub fn objective(state: &ChainState, kernels: &[Arc<GibbsKernel>]) -> Result<f64> {
    let n = state.grid().n_state();
    let mut total = numeric::Accum::new();
    for (c, k) in state.couplings.iter().zip(kernels) {
        let sum_k = k.log_total().exp();
        match c {
            Coupling::Dense(d) => {
                let partials: Vec<f64> = d
                    .mass
                    .par_chunks(n * ROW_CHUNK)
                    .enumerate()
                    .map(|(ci, chunk)| {
                        let base = ci * ROW_CHUNK * n;
                        let mut acc = numeric::Accum::new();
                        for (off, &m) in chunk.iter().enumerate() {
                            if m > 0.0 {
                                let lk = k.log_weights()[base + off];
                                acc.add(m * (m.ln() - lk) - m);
                            }
                        }
                        acc.value()
                    })
                    .collect();
                for p in partials {
                    total.add(p);
                }
                total.add(sum_k);
            }
            Coupling::Scaling(s) => {
                let row = c.row_marginal();
                let col = c.col_marginal();
                for (m, a) in row.iter().zip(&s.log_a) {
                    if *m > 0.0 {
                        total.add(m * a);
                    }
                }
                for (m, b) in col.iter().zip(&s.log_b) {
                    if *m > 0.0 {
                        total.add(m * b);
                    }
                }
                total.add(-numeric::sum(&row));
                total.add(sum_k);
            }
        }
    }
    Ok(total.value())
}

/// Objective from precomputed marginals and the factor bookkeeping; equals
/// [`objective`] up to accumulated round-off. Used for the per-sweep trace.
fn trace_objective(state: &ChainState, margs: &ChainMarginals, kernel_sums: &[f64]) -> f64 {
    let mut total = numeric::Accum::new();
    for (i, c) in state.couplings.iter().enumerate() {
        let (row, col) = (&margs.row[i], &margs.col[i]);
        match c {
            Coupling::Dense(d) => {
                for (m, a) in row.iter().zip(&d.log_row_acc) {
                    if *m > 0.0 {
                        total.add(m * a);
                    }
                }
                for (m, b) in col.iter().zip(&d.log_col_acc) {
                    if *m > 0.0 {
                        total.add(m * b);
                    }
                }
                let mass = numeric::sum(row);
                total.add(mass * d.log_base);
                total.add(-mass);
            }
            Coupling::Scaling(s) => {
                for (m, a) in row.iter().zip(&s.log_a) {
                    if *m > 0.0 {
                        total.add(m * a);
                    }
                }
                for (m, b) in col.iter().zip(&s.log_b) {
                    if *m > 0.0 {
                        total.add(m * b);
                    }
                }
                total.add(-numeric::sum(row));
            }
        }
        total.add(kernel_sums[i]);
    }
    total.value()
}

/// Solver configuration.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub tolerance: f64,
    pub max_sweeps: usize,
    pub representation: Representation,
    pub sweep_order: SweepOrder,
    pub seed: u64,
    pub max_kernel_entries: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_sweeps: 5000,
            representation: Representation::Scaling,
            sweep_order: SweepOrder::Forward,
            seed: 0,
            max_kernel_entries: DEFAULT_KERNEL_BUDGET,
        }
    }
}

/// A fully assembled problem instance.
#[derive(Debug, Clone)]
pub struct Problem {
    pub grid: Arc<PhaseGrid>,
    pub times: Vec<f64>,
    pub eps: f64,
    pub cost_mode: CostMode,
    pub marginals: Vec<PositionalMarginal>,
    pub options: SolveOptions,
}

impl Problem {
    pub fn validate(&self) -> Result<()> {
        if self.times.len() < 2 {
            return Err(Error::Validation("times: need at least two time points".into()));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Validation("times: not strictly increasing".into()));
        }
        if self.marginals.len() != self.times.len() {
            return Err(Error::Validation(format!(
                "marginals: got {}, need one per time point ({})",
                self.marginals.len(),
                self.times.len()
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Validation(format!("eps: must be positive, got {}", self.eps)));
        }
        if !(self.options.tolerance > 0.0) {
            return Err(Error::Validation("tolerance: must be positive".into()));
        }
        for (i, rho) in self.marginals.iter().enumerate() {
            if rho.grid().as_ref() != self.grid.as_ref() {
                return Err(Error::Validation(format!("marginal {i} lives on a different grid")));
            }
        }
        Ok(())
    }

    pub fn n_intervals(&self) -> usize {
        self.times.len() - 1
    }

    pub fn build_kernels(&self) -> Result<Vec<Arc<GibbsKernel>>> {
        self.times
            .windows(2)
            .map(|w| {
                build_gibbs(
                    self.grid.clone(),
                    w[1] - w[0],
                    self.eps,
                    self.cost_mode,
                    self.options.max_kernel_entries,
                )
                .map(Arc::new)
            })
            .collect()
    }
}

/// Per-sweep diagnostics handed to the observer and recorded in the report.
#[derive(Debug, Clone, Copy)]
pub struct SweepTrace {
    pub sweep: usize,
    pub violation: f64,
    pub objective: f64,
    pub seconds: f64,
}

/// Outcome of a solve. `converged = false` is a soft failure: the partial
/// state is still returned and the caller decides what to do with it.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub converged: bool,
    pub sweeps: usize,
    pub final_violation: f64,
    pub violation_trace: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub seconds_trace: Vec<f64>,
    pub wall_seconds: f64,
}

pub fn solve(problem: &Problem) -> Result<(ChainState, SolveReport)> {
    solve_observed(problem, |_| {})
}

/// Solve with a per-sweep observer (used by the CLI to stream the trace).
pub fn solve_observed(
    problem: &Problem,
    mut observer: impl FnMut(&SweepTrace),
) -> Result<(ChainState, SolveReport)> {
    problem.validate()?;
    let start = Instant::now();
    let kernels = problem.build_kernels()?;
    let kernel_sums: Vec<f64> = kernels.iter().map(|k| k.log_total().exp()).collect();
    let mut state = ChainState::from_prior(&kernels, problem.options.representation);
    let n_nodes = problem.times.len();

    let forward: Vec<usize> = (0..n_nodes).collect();
    let backward: Vec<usize> = (0..n_nodes).rev().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(problem.options.seed);

    let mut report = SolveReport {
        converged: false,
        sweeps: 0,
        final_violation: f64::INFINITY,
        violation_trace: Vec::new(),
        objective_trace: Vec::new(),
        seconds_trace: Vec::new(),
        wall_seconds: 0.0,
    };

    for sweep_idx in 0..problem.options.max_sweeps {
        let order: Vec<usize> = match problem.options.sweep_order {
            SweepOrder::Forward => forward.clone(),
            SweepOrder::ForwardBackward => {
                if sweep_idx % 2 == 0 {
                    forward.clone()
                } else {
                    backward.clone()
                }
            }
            SweepOrder::Random => {
                let mut o = forward.clone();
                o.shuffle(&mut rng);
                o
            }
        };
        state.sweep_ordered(&problem.marginals, &order)?;

        let margs = chain_marginals(&state);
        let violation = violation_from(&margs, &problem.grid, &problem.marginals);
        let obj = trace_objective(&state, &margs, &kernel_sums);
        let seconds = start.elapsed().as_secs_f64();
        report.violation_trace.push(violation);
        report.objective_trace.push(obj);
        report.seconds_trace.push(seconds);
        report.sweeps = sweep_idx + 1;
        report.final_violation = violation;
        observer(&SweepTrace { sweep: sweep_idx + 1, violation, objective: obj, seconds });

        if violation < problem.options.tolerance {
            report.converged = true;
            break;
        }
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok((state, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phasegrid::project_x;

    fn grid(n_x: usize, n_v: usize) -> Arc<PhaseGrid> {
        Arc::new(PhaseGrid::regular(-1.0, 1.0, n_x, -1.5, 1.5, n_v).unwrap())
    }

    fn dense_from_mass(g: &Arc<PhaseGrid>, mass: Vec<f64>) -> Coupling {
        let n = g.n_state();
        assert_eq!(mass.len(), n * n);
        Coupling::Dense(DenseCoupling {
            grid: g.clone(),
            mass,
            log_row_acc: vec![0.0; n],
            log_col_acc: vec![0.0; n],
            log_base: 0.0,
        })
    }

    fn rho(g: &Arc<PhaseGrid>, w: Vec<f64>) -> PositionalMarginal {
        PositionalMarginal::new(g.clone(), w).unwrap()
    }

    fn random_coupling(g: &Arc<PhaseGrid>, rng: &mut ChaCha8Rng) -> Coupling {
        let n = g.n_state();
        let mass: Vec<f64> = (0..n * n).map(|_| 0.05 + rng.random::<f64>()).collect();
        let total = numeric::sum(&mass);
        dense_from_mass(g, mass.into_iter().map(|m| m / total).collect())
    }

    fn random_rho(g: &Arc<PhaseGrid>, rng: &mut ChaCha8Rng) -> PositionalMarginal {
        let w: Vec<f64> = (0..g.n_x()).map(|_| 0.1 + rng.random::<f64>()).collect();
        PositionalMarginal::from_unnormalized(g.clone(), w).unwrap()
    }

    #[test]
    fn kl_identity_is_zero() {
        let b = vec![0.25, 0.25, 0.25, 0.25];
        assert_eq!(kl(&b, &b).unwrap(), 0.0);
    }

    #[test]
    fn kl_half_support_is_ln2() {
        let a = vec![0.5, 0.5, 0.0, 0.0];
        let b = vec![0.25; 4];
        assert!((kl(&a, &b).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn kl_nonnegative_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let a: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
            let ta = numeric::sum(&a);
            let a: Vec<f64> = a.into_iter().map(|x| x / ta).collect();
            let b: Vec<f64> = (0..8).map(|_| 0.01 + rng.random::<f64>()).collect();
            let tb = numeric::sum(&b);
            let b: Vec<f64> = b.into_iter().map(|x| x / tb).collect();
            let d = kl(&a, &b).unwrap();
            assert!(d >= -1e-15, "kl = {d}");
        }
    }

    #[test]
    fn kl_support_mismatch_detected() {
        match kl(&[0.5, 0.5], &[1.0, 0.0]) {
            Err(Error::SupportMismatch { index: 1 }) => {}
            other => panic!("expected SupportMismatch, got {other:?}"),
        }
    }

    #[test]
    fn project_first_ratio_update() {
        // 2x1 grid each side, uniform pi, rho = [0.8, 0.2]
        let g = grid(2, 1);
        let mut c = dense_from_mass(&g, vec![0.25; 4]);
        let mu = project_first(&mut c, &rho(&g, vec![0.8, 0.2])).unwrap();
        let mass = c.to_mass_vec();
        let expect = [0.4, 0.4, 0.1, 0.1];
        for (a, b) in mass.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((mu.weights()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn project_first_idempotent_on_satisfied_constraint() {
        let g = grid(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut c = random_coupling(&g, &mut rng);
        let target = project_x_weights(&g, &c.row_marginal());
        let r = PositionalMarginal::from_unnormalized(g.clone(), target).unwrap();
        let before = c.to_mass_vec();
        project_first(&mut c, &r).unwrap();
        let after = c.to_mass_vec();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn project_first_zero_rows_stay_zero() {
        let g = grid(2, 1);
        // all mass in the second position block
        let mut c = dense_from_mass(&g, vec![0.0, 0.0, 0.5, 0.5]);
        project_first(&mut c, &rho(&g, vec![0.0, 1.0])).unwrap();
        let mass = c.to_mass_vec();
        assert_eq!(&mass[..2], &[0.0, 0.0]);
        assert!((mass[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn project_first_starved_constraint() {
        let g = grid(2, 1);
        let mut c = dense_from_mass(&g, vec![0.0, 0.0, 0.5, 0.5]);
        match project_first(&mut c, &rho(&g, vec![0.3, 0.7])) {
            Err(Error::StarvedConstraint { node: 0, position: 0 }) => {}
            other => panic!("expected StarvedConstraint, got {other:?}"),
        }
    }

    #[test]
    fn project_last_transpose_equivariant() {
        let g = grid(3, 2);
        let n = g.n_state();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let c = random_coupling(&g, &mut rng);
            let r = random_rho(&g, &mut rng);
            let mut via_last = c.clone();
            project_last(&mut via_last, &r, 1).unwrap();

            // transpose, project_first, transpose back
            let mass = c.to_mass_vec();
            let mut t = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    t[j * n + i] = mass[i * n + j];
                }
            }
            let mut via_first = dense_from_mass(&g, t);
            project_first(&mut via_first, &r).unwrap();
            let tf = via_first.to_mass_vec();
            let vl = via_last.to_mass_vec();
            for i in 0..n {
                for j in 0..n {
                    assert!((vl[i * n + j] - tf[j * n + i]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn project_last_idempotent() {
        let g = grid(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut c = random_coupling(&g, &mut rng);
        let r = random_rho(&g, &mut rng);
        project_last(&mut c, &r, 1).unwrap();
        let once = c.to_mass_vec();
        project_last(&mut c, &r, 1).unwrap();
        let twice = c.to_mass_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn interior_two_velocity_hand_example() {
        // single position, two velocities: interior marginal must be g / sum g
        let g = Arc::new(PhaseGrid::regular(0.0, 0.0, 1, -1.0, 1.0, 2).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut left = random_coupling(&g, &mut rng);
        let mut right = random_coupling(&g, &mut rng);
        let m_l = left.col_marginal();
        let m_r = right.row_marginal();
        let gm: Vec<f64> = m_l.iter().zip(&m_r).map(|(&a, &b)| (a * b).sqrt()).collect();
        let z = gm[0] + gm[1];
        let mu = project_interior(&mut left, &mut right, &rho(&g, vec![1.0]), 1).unwrap();
        assert!((mu.weights()[0] - gm[0] / z).abs() < 1e-14);
        assert!((mu.weights()[1] - gm[1] / z).abs() < 1e-14);
        // both couplings now induce the same marginal
        let l_after = left.col_marginal();
        let r_after = right.row_marginal();
        assert!(numeric::l1_distance(&l_after, &r_after) < 1e-13);
        assert!(numeric::l1_distance(&l_after, mu.weights()) < 1e-13);
    }

    #[test]
    fn interior_fixed_point_when_satisfied() {
        let g = grid(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut left = random_coupling(&g, &mut rng);
        let mut right = random_coupling(&g, &mut rng);
        let r = random_rho(&g, &mut rng);
        // run the projection once to land on the constraint set
        project_interior(&mut left, &mut right, &r, 1).unwrap();
        let (l0, r0) = (left.to_mass_vec(), right.to_mass_vec());
        // a second application must not move
        project_interior(&mut left, &mut right, &r, 1).unwrap();
        let (l1, r1) = (left.to_mass_vec(), right.to_mass_vec());
        for (a, b) in l0.iter().zip(&l1).chain(r0.iter().zip(&r1)) {
            assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0));
        }
    }

    #[test]
    fn interior_shared_marginal_on_random_inputs() {
        let g = grid(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..50 {
            let mut left = random_coupling(&g, &mut rng);
            let mut right = random_coupling(&g, &mut rng);
            let r = random_rho(&g, &mut rng);
            let mu = project_interior(&mut left, &mut right, &r, 1).unwrap();
            let l_after = left.col_marginal();
            let r_after = right.row_marginal();
            assert!(numeric::l1_distance(&l_after, &r_after) < 1e-13);
            let p = project_x_weights(&g, mu.weights());
            assert!(numeric::l1_distance(&p, r.weights()) < 1e-13);
        }
    }

    fn tiny_problem(repr: Representation, n_nodes: usize, seed: u64) -> Problem {
        let g = grid(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let marginals: Vec<PositionalMarginal> =
            (0..n_nodes).map(|_| random_rho(&g, &mut rng)).collect();
        let times: Vec<f64> = (0..n_nodes).map(|i| i as f64 / (n_nodes - 1) as f64).collect();
        Problem {
            grid: g,
            times,
            eps: 0.8,
            cost_mode: CostMode::Exact,
            marginals,
            options: SolveOptions { representation: repr, ..Default::default() },
        }
    }

    #[test]
    fn two_marginal_sweep_is_sinkhorn_structure() {
        // N = 1: a sweep is project_first then project_last
        let p = tiny_problem(Representation::Dense, 2, 21);
        let kernels = p.build_kernels().unwrap();
        let mut state = ChainState::from_prior(&kernels, Representation::Dense);
        let mut reference = match &state.couplings()[0] {
            Coupling::Dense(_) => state.couplings()[0].clone(),
            _ => unreachable!(),
        };
        state.sweep(&p.marginals).unwrap();
        project_first(&mut reference, &p.marginals[0]).unwrap();
        project_last(&mut reference, &p.marginals[1], 1).unwrap();
        let a = state.couplings()[0].to_mass_vec();
        let b = reference.to_mass_vec();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn solve_converges_and_mass_is_conserved() {
        for repr in [Representation::Dense, Representation::Scaling] {
            let p = tiny_problem(repr, 4, 23);
            let (state, report) = solve(&p).unwrap();
            assert!(report.converged, "{repr:?} did not converge");
            assert!(report.final_violation < p.options.tolerance);
            for c in state.couplings() {
                assert!((c.total_mass() - 1.0).abs() < 1e-10);
            }
            // every node marginal projects onto its constraint
            for i in 0..p.marginals.len() {
                let mu = state.node_marginal(i).unwrap();
                let px = project_x(&mu);
                assert!(
                    numeric::l1_distance(px.weights(), p.marginals[i].weights()) < 1e-7,
                    "node {i}"
                );
            }
        }
    }

    #[test]
    fn solve_on_self_consistent_data_converges_fast() {
        // project the prior chain once, use its own marginals as data
        let p0 = tiny_problem(Representation::Dense, 3, 29);
        let kernels = p0.build_kernels().unwrap();
        let mut state = ChainState::from_prior(&kernels, Representation::Dense);
        state.sweep(&p0.marginals).unwrap();
        let consistent: Vec<PositionalMarginal> = (0..3)
            .map(|i| {
                let mu = state.node_marginal(i).unwrap();
                project_x(&mu)
            })
            .collect();
        let p = Problem { marginals: consistent, ..p0 };
        let (_, report) = solve(&p).unwrap();
        assert!(report.converged);
        assert!(report.sweeps <= 2, "took {} sweeps", report.sweeps);
    }

    #[test]
    fn sweep_on_converged_state_is_fixed_point() {
        let p = tiny_problem(Representation::Dense, 3, 31);
        let (mut state, report) = solve(&p).unwrap();
        assert!(report.converged);
        let before: Vec<Vec<f64>> = (0..3)
            .map(|i| state.node_marginal(i).unwrap().weights().to_vec())
            .collect();
        state.sweep(&p.marginals).unwrap();
        for (i, b) in before.iter().enumerate() {
            let a = state.node_marginal(i).unwrap();
            assert!(numeric::l1_distance(a.weights(), b) < 1e-12, "node {i}");
        }
    }

    #[test]
    fn one_sweep_reduces_violation() {
        for seed in 40..48 {
            let p = tiny_problem(Representation::Dense, 4, seed);
            let kernels = p.build_kernels().unwrap();
            let mut state = ChainState::from_prior(&kernels, Representation::Dense);
            let v0 = constraint_violation(&state, &p.marginals);
            state.sweep(&p.marginals).unwrap();
            let v1 = constraint_violation(&state, &p.marginals);
            assert!(v1 < v0, "seed {seed}: {v0} -> {v1}");
        }
    }

    #[test]
    fn violation_zero_checks() {
        let p = tiny_problem(Representation::Dense, 3, 33);
        let kernels = p.build_kernels().unwrap();
        let state = ChainState::from_prior(&kernels, Representation::Dense);
        // initialization with mismatched marginals violates
        assert!(constraint_violation(&state, &p.marginals) > 0.0);
        let (state, _) = solve(&p).unwrap();
        assert!(constraint_violation(&state, &p.marginals) < p.options.tolerance);
    }

    #[test]
    fn objective_of_prior_chain_with_normalized_kernel() {
        // single interval, kernel already of unit mass => objective 0
        let g = Arc::new(PhaseGrid::regular(0.0, 1.0, 2, -0.5, 0.5, 2).unwrap());
        let k = build_gibbs(g.clone(), 1.0, 2.0, CostMode::Exact, 1 << 20).unwrap();
        // normalize by shifting: subtract log total
        let kn = Arc::new(k.with_log_shift(-k.log_total()));
        let state = ChainState::from_prior(&[kn.clone()], Representation::Dense);
        let j = objective(&state, &[kn]).unwrap();
        assert!(j.abs() < 1e-12, "objective {j}");
    }

    #[test]
    fn objective_matches_closed_form_at_initialization() {
        let p = tiny_problem(Representation::Dense, 3, 35);
        let kernels = p.build_kernels().unwrap();
        let state = ChainState::from_prior(&kernels, Representation::Dense);
        // KL(K/Z | K) = -ln Z - 1 + Z per interval
        let expect: f64 = kernels
            .iter()
            .map(|k| {
                let z = k.log_total().exp();
                -k.log_total() - 1.0 + z
            })
            .sum();
        let j = objective(&state, &kernels).unwrap();
        assert!((j - expect).abs() < 1e-9, "{j} vs {expect}");
    }

    #[test]
    fn solver_output_objective_not_above_initialization() {
        for seed in [51, 52, 53] {
            for repr in [Representation::Dense, Representation::Scaling] {
                let p = tiny_problem(repr, 3, seed);
                let kernels = p.build_kernels().unwrap();
                let init = ChainState::from_prior(&kernels, repr);
                let j_init = objective(&init, &kernels).unwrap();
                let (state, _) = solve(&p).unwrap();
                let j_final = objective(&state, &kernels).unwrap();
                assert!(j_final <= j_init + 1e-12, "{repr:?} seed {seed}: {j_final} > {j_init}");
            }
        }
    }

    #[test]
    fn trace_objective_tracks_exact_objective() {
        let p = tiny_problem(Representation::Dense, 3, 57);
        let kernels = p.build_kernels().unwrap();
        let kernel_sums: Vec<f64> = kernels.iter().map(|k| k.log_total().exp()).collect();
        let mut state = ChainState::from_prior(&kernels, Representation::Dense);
        for _ in 0..5 {
            state.sweep(&p.marginals).unwrap();
            let margs = chain_marginals(&state);
            let fast = trace_objective(&state, &margs, &kernel_sums);
            let exact = objective(&state, &kernels).unwrap();
            assert!((fast - exact).abs() < 1e-9, "{fast} vs {exact}");
        }
    }

    #[test]
    fn representations_agree_on_marginals() {
        let pd = tiny_problem(Representation::Dense, 4, 61);
        let ps = Problem {
            options: SolveOptions {
                representation: Representation::Scaling,
                ..pd.options.clone()
            },
            ..pd.clone()
        };
        let (sd, rd) = solve(&pd).unwrap();
        let (ss, rs) = solve(&ps).unwrap();
        assert_eq!(rd.sweeps, rs.sweeps, "stopping sweep diverged between representations");
        for i in 0..4 {
            let a = sd.node_marginal(i).unwrap();
            let b = ss.node_marginal(i).unwrap();
            assert!(
                numeric::l1_distance(a.weights(), b.weights()) < 1e-10,
                "node {i}"
            );
        }
    }

    #[test]
    fn kernel_scaling_changes_no_iterate() {
        let p = tiny_problem(Representation::Dense, 3, 63);
        let kernels = p.build_kernels().unwrap();
        let shifted: Vec<Arc<GibbsKernel>> = kernels
            .iter()
            .map(|k| Arc::new(k.with_log_shift(1.7)))
            .collect();
        let mut a = ChainState::from_prior(&kernels, Representation::Dense);
        let mut b = ChainState::from_prior(&shifted, Representation::Dense);
        for _ in 0..10 {
            a.sweep(&p.marginals).unwrap();
            b.sweep(&p.marginals).unwrap();
        }
        for i in 0..3 {
            let ma = a.node_marginal(i).unwrap();
            let mb = b.node_marginal(i).unwrap();
            assert!(numeric::l1_distance(ma.weights(), mb.weights()) < 1e-12);
        }
        // objective differs by the additive constant mass * shift + (Z' - Z)
        let ja = objective(&a, &kernels).unwrap();
        let jb = objective(&b, &shifted).unwrap();
        let shift_const: f64 = kernels
            .iter()
            .map(|k| {
                let z = k.log_total().exp();
                -1.7 + (1.7f64.exp() - 1.0) * z
            })
            .sum();
        assert!((jb - ja - shift_const).abs() < 1e-9, "{jb} - {ja} vs {shift_const}");
    }

    #[test]
    fn time_reversal_mirror_solutions() {
        let g = Arc::new(PhaseGrid::regular(-1.0, 1.0, 5, -2.0, 2.0, 5).unwrap());
        assert!(g.is_v_symmetric(0.0));
        let mk = |w: Vec<f64>| PositionalMarginal::from_unnormalized(g.clone(), w).unwrap();
        let rhos = vec![
            mk(vec![0.6, 0.2, 0.1, 0.05, 0.05]),
            mk(vec![0.1, 0.2, 0.4, 0.2, 0.1]),
            mk(vec![0.05, 0.05, 0.1, 0.2, 0.6]),
        ];
        let mut rev_rhos: Vec<PositionalMarginal> = rhos.clone();
        rev_rhos.reverse();
        let base = Problem {
            grid: g.clone(),
            times: vec![0.0, 0.5, 1.0],
            eps: 0.5,
            cost_mode: CostMode::Exact,
            marginals: rhos,
            options: SolveOptions {
                representation: Representation::Dense,
                max_sweeps: 200,
                tolerance: 1e-10,
                ..Default::default()
            },
        };
        let (fwd, rf) = solve(&base).unwrap();
        let rev_problem = Problem { marginals: rev_rhos, ..base.clone() };
        let (rev, rr) = solve(&rev_problem).unwrap();
        assert_eq!(rf.sweeps, rr.sweeps);
        for i in 0..3 {
            let mf = fwd.node_marginal(i).unwrap();
            let mr = rev.node_marginal(2 - i).unwrap();
            let mut mirrored = vec![0.0; g.n_state()];
            for s in 0..g.n_state() {
                mirrored[g.flip_v(s)] = mr.weights()[s];
            }
            assert!(
                numeric::l1_distance(mf.weights(), &mirrored) < 1e-8,
                "node {i}"
            );
        }
    }

    #[test]
    fn delta_marginals_give_v_symmetric_endpoints() {
        let g = Arc::new(PhaseGrid::regular(-1.0, 1.0, 5, -2.0, 2.0, 4).unwrap());
        let mut w0 = vec![0.0; 5];
        w0[2] = 1.0;
        let rho0 = PositionalMarginal::new(g.clone(), w0).unwrap();
        let p = Problem {
            grid: g.clone(),
            times: vec![0.0, 1.0],
            eps: 0.6,
            cost_mode: CostMode::Exact,
            marginals: vec![rho0.clone(), rho0],
            options: SolveOptions { representation: Representation::Dense, ..Default::default() },
        };
        let (state, report) = solve(&p).unwrap();
        assert!(report.converged);
        for i in 0..2 {
            let mu = state.node_marginal(i).unwrap();
            for s in 0..g.n_state() {
                let diff = (mu.weights()[s] - mu.weights()[g.flip_v(s)]).abs();
                assert!(diff < 1e-10, "node {i} state {s}");
            }
        }
    }

    #[test]
    fn violation_trace_decays_geometrically() {
        let p = tiny_problem(Representation::Dense, 4, 71);
        let (_, report) = solve(&p).unwrap();
        assert!(report.converged);
        let trace = &report.violation_trace;
        assert!(trace.len() >= 6, "trace too short for a fit: {}", trace.len());
        // log-linear fit after 3-sweep burn-in
        let pts: Vec<(f64, f64)> = trace
            .iter()
            .enumerate()
            .skip(3)
            .filter(|(_, v)| **v > 0.0)
            .map(|(k, v)| (k as f64, v.ln()))
            .collect();
        let nf = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / nf;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / nf;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        let slope = sxy / sxx;
        assert!(slope < 0.0, "slope {slope}");
    }

    #[test]
    fn experimental_sweep_orders_still_converge() {
        for order in [SweepOrder::ForwardBackward, SweepOrder::Random] {
            let mut p = tiny_problem(Representation::Dense, 4, 73);
            p.options.sweep_order = order;
            let (_, report) = solve(&p).unwrap();
            assert!(report.converged, "{order:?}");
        }
    }

    #[test]
    fn problem_validation_errors() {
        let p = tiny_problem(Representation::Dense, 3, 75);
        let bad_times = Problem { times: vec![0.0, 0.7, 0.5], ..p.clone() };
        assert!(matches!(bad_times.validate(), Err(Error::Validation(m)) if m.contains("times")));
        let bad_eps = Problem { eps: -1.0, ..p.clone() };
        assert!(bad_eps.validate().is_err());
        let bad_count = Problem { marginals: p.marginals[..2].to_vec(), ..p.clone() };
        assert!(bad_count.validate().is_err());
    }
}
