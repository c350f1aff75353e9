//! Reconstruction of phase-space marginals and mean paths at arbitrary times
//! from the converged couplings, by mixing pinned prior bridges over the
//! coupling masses.
//!
//! At an interior time the measure is a mixture of bridge Gaussians, one per
//! state pair, each evaluated at grid nodes and renormalized per bridge so
//! its pair mass lands on the grid no matter how narrow the bridge is
//! relative to the node spacing. At a constraint time the cached node
//! marginal is returned directly instead of a grid-blurred version of it.

use rayon::prelude::*;

use crate::bregman::{ChainState, Coupling, Problem, SolveReport};
use crate::error::{Error, Result};
use crate::kernel::bridge_moments;
use crate::numeric::{self, ROW_CHUNK};
use crate::phasegrid::{moments, DiscreteMeasure};

/// Pair masses at or below this absolute threshold are skipped by the
/// mixture loops. On unit-mass couplings the dropped total is below
/// n^2 * 1e-16, which the final renormalization absorbs; both the mixture
/// and the moment shortcut use the same cutoff so they see identical pairs.
const PAIR_PRUNE: f64 = 1e-16;

/// A converged chain plus the problem it solves.
#[derive(Debug, Clone)]
pub struct Solution {
    problem: Problem,
    state: ChainState,
    report: SolveReport,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathPoint {
    pub t: f64,
    pub mean_x: f64,
    pub mean_v: f64,
}

enum Location {
    Node(usize),
    Interior { interval: usize, tau: f64 },
}

impl Solution {
    /// Wraps a solver result, enforcing that it actually satisfies the
    /// constraints at the problem tolerance.
    pub fn new(problem: Problem, state: ChainState, report: SolveReport) -> Result<Self> {
        if !report.converged || !(report.final_violation < problem.options.tolerance) {
            return Err(Error::Validation(format!(
                "solution violates constraints: violation {} at tolerance {}",
                report.final_violation, problem.options.tolerance
            )));
        }
        Ok(Self { problem, state, report })
    }

    /// Wraps a possibly unconverged state for diagnostic interpolation.
    pub fn new_unchecked(problem: Problem, state: ChainState, report: SolveReport) -> Self {
        Self { problem, state, report }
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn report(&self) -> &SolveReport {
        &self.report
    }

    pub fn node_marginal(&self, i: usize) -> Result<DiscreteMeasure> {
        self.state.node_marginal(i)
    }

    fn locate(&self, t: f64) -> Result<Location> {
        let times = &self.problem.times;
        let (t0, t1) = (times[0], times[times.len() - 1]);
        if !(t >= t0 && t <= t1) {
            return Err(Error::TimeOutOfRange { t, t0, t1 });
        }
        if let Some(i) = times.iter().position(|&ti| ti == t) {
            return Ok(Location::Node(i));
        }
        let interval = times.windows(2).position(|w| t > w[0] && t < w[1]).expect("t bracketed");
        Ok(Location::Interior { interval, tau: t - times[interval] })
    }

    /// Phase-space marginal at time `t`.
    pub fn marginal_at(&self, t: f64) -> Result<DiscreteMeasure> {
        match self.locate(t)? {
            Location::Node(i) => self.state.node_marginal(i),
            Location::Interior { interval, tau } => self.mixture_marginal(interval, tau),
        }
    }

    /// First moments along the requested times, using closed-form bridge
    /// means instead of density evaluation.
    pub fn mean_path(&self, times: &[f64]) -> Result<Vec<PathPoint>> {
        times
            .iter()
            .map(|&t| {
                let (mean_x, mean_v) = self.mean_at(t)?;
                Ok(PathPoint { t, mean_x, mean_v })
            })
            .collect()
    }

    /// Mixture mean at one time via the moment shortcut.
    pub fn mean_at(&self, t: f64) -> Result<(f64, f64)> {
        match self.locate(t)? {
            Location::Node(i) => {
                let m = moments(&self.state.node_marginal(i)?);
                Ok((m.mean_x, m.mean_v))
            }
            Location::Interior { interval, tau } => {
                let h = self.problem.times[interval + 1] - self.problem.times[interval];
                let eps = self.problem.eps;
                let acc = self.fold_pairs(interval, |part: &mut MeanAcc, z0, z1, w| {
                    let b = bridge_moments(z0, z1, h, tau, eps).expect("tau within interval");
                    part.wx.add(w * b.mean.0);
                    part.wv.add(w * b.mean.1);
                    part.mass.add(w);
                });
                let mass = acc.mass.value();
                Ok((acc.wx.value() / mass, acc.wv.value() / mass))
            }
        }
    }

    /// Mixture mean at one time by per-bridge Gaussian quadrature on a fine
    /// moving grid. An independent evaluation path used to cross-check
    /// [`Solution::mean_at`]; it integrates the bridge densities numerically
    /// instead of trusting their closed-form means.
    pub fn mean_at_quadrature(&self, t: f64) -> Result<(f64, f64)> {
        match self.locate(t)? {
            Location::Node(i) => {
                let m = moments(&self.state.node_marginal(i)?);
                Ok((m.mean_x, m.mean_v))
            }
            Location::Interior { interval, tau } => {
                let h = self.problem.times[interval + 1] - self.problem.times[interval];
                let eps = self.problem.eps;
                let acc = self.fold_pairs(interval, |part: &mut MeanAcc, z0, z1, w| {
                    let b = bridge_moments(z0, z1, h, tau, eps).expect("tau within interval");
                    let (ex, ev) = gaussian_mean_by_quadrature(&b.mean, &b.cov);
                    part.wx.add(w * ex);
                    part.wv.add(w * ev);
                    part.mass.add(w);
                });
                let mass = acc.mass.value();
                Ok((acc.wx.value() / mass, acc.wv.value() / mass))
            }
        }
    }

    fn mixture_marginal(&self, interval: usize, tau: f64) -> Result<DiscreteMeasure> {
        let grid = self.problem.grid.clone();
        let h = self.problem.times[interval + 1] - self.problem.times[interval];
        let eps = self.problem.eps;
        let n = grid.n_state();
        let n_x = grid.n_x();
        let n_v = grid.n_v();
        let (dx, dv) = (grid.dx(), grid.dv());
        let xs = grid.x_nodes();
        let vs = grid.v_nodes();

        let coupling = &self.state.couplings()[interval];
        let chunks: Vec<usize> = (0..n.div_ceil(ROW_CHUNK)).collect();
        let partials: Vec<Vec<f64>> = chunks
            .par_iter()
            .map(|&ci| {
                let mut out = vec![0.0f64; n];
                let mut row = vec![0.0f64; n];
                let mut qbuf: Vec<(usize, f64)> = Vec::new();
                for s0 in ci * ROW_CHUNK..((ci + 1) * ROW_CHUNK).min(n) {
                    coupling.row_masses(s0, &mut row);
                    let z0 = grid.coords(s0);
                    for s1 in 0..n {
                        let w = row[s1];
                        if w <= PAIR_PRUNE {
                            continue;
                        }
                        let z1 = grid.coords(s1);
                        let b = bridge_moments(z0, z1, h, tau, eps).expect("tau within interval");
                        let (mx, mv) = b.mean;
                        let (sxx, sxv, svv) = (b.cov[0][0], b.cov[0][1], b.cov[1][1]);
                        let det = sxx * svv - sxv * sxv;

                        // node box: 8 sigma around the mean, at least one node
                        let rx = (8.0 * sxx.sqrt()).max(dx);
                        let rv = (8.0 * svv.sqrt()).max(dv);
                        let ix_lo = clamp_idx((mx - rx - xs[0]) / dx, n_x);
                        let ix_hi = clamp_idx((mx + rx - xs[0]) / dx, n_x);
                        let iv_lo = clamp_idx((mv - rv - vs[0]) / dv, n_v);
                        let iv_hi = clamp_idx((mv + rv - vs[0]) / dv, n_v);

                        qbuf.clear();
                        let mut qmin = f64::INFINITY;
                        if det > 1e-300 {
                            let (ixx, ixv, ivv) = (svv / det, -sxv / det, sxx / det);
                            for ix in ix_lo..=ix_hi {
                                let ddx = xs[ix] - mx;
                                for iv in iv_lo..=iv_hi {
                                    let ddv = vs[iv] - mv;
                                    let q = ixx * ddx * ddx + 2.0 * ixv * ddx * ddv + ivv * ddv * ddv;
                                    if q < qmin {
                                        qmin = q;
                                    }
                                    qbuf.push((ix * n_v + iv, q));
                                }
                            }
                        } else {
                            // degenerate bridge: all pair mass to the nearest node
                            let ix = clamp_idx((mx - xs[0]) / dx + 0.5, n_x);
                            let iv = clamp_idx((mv - vs[0]) / dv + 0.5, n_v);
                            qbuf.push((ix * n_v + iv, 0.0));
                            qmin = 0.0;
                        }
                        // per-bridge softmax keeps every pair's mass on the grid
                        let mut norm = 0.0;
                        for &(_, q) in qbuf.iter() {
                            norm += (-0.5 * (q - qmin)).exp();
                        }
                        let scale = w / norm;
                        for &(s, q) in qbuf.iter() {
                            out[s] += scale * (-0.5 * (q - qmin)).exp();
                        }
                    }
                }
                out
            })
            .collect();

        let mut total = vec![numeric::Accum::new(); n];
        for p in &partials {
            for (acc, &v) in total.iter_mut().zip(p) {
                acc.add(v);
            }
        }
        let weights: Vec<f64> = total.into_iter().map(|a| a.value()).collect();
        DiscreteMeasure::from_unnormalized(grid, weights)
    }

    /// Deterministic chunked fold over the pairs of one coupling.
    fn fold_pairs(&self, interval: usize, f: impl Fn(&mut MeanAcc, (f64, f64), (f64, f64), f64) + Sync) -> MeanAcc {
        let grid = &self.problem.grid;
        let n = grid.n_state();
        let coupling: &Coupling = &self.state.couplings()[interval];
        let chunks: Vec<usize> = (0..n.div_ceil(ROW_CHUNK)).collect();
        let partials: Vec<MeanAcc> = chunks
            .par_iter()
            .map(|&ci| {
                let mut part = MeanAcc::default();
                let mut row = vec![0.0f64; n];
                for s0 in ci * ROW_CHUNK..((ci + 1) * ROW_CHUNK).min(n) {
                    coupling.row_masses(s0, &mut row);
                    let z0 = grid.coords(s0);
                    for (s1, &w) in row.iter().enumerate() {
                        if w > PAIR_PRUNE {
                            f(&mut part, z0, grid.coords(s1), w);
                        }
                    }
                }
                part
            })
            .collect();
        let mut acc = MeanAcc::default();
        for p in &partials {
            acc.wx.add(p.wx.value());
            acc.wv.add(p.wv.value());
            acc.mass.add(p.mass.value());
        }
        acc
    }
}

#[derive(Default)]
struct MeanAcc {
    wx: numeric::Accum,
    wv: numeric::Accum,
    mass: numeric::Accum,
}

fn clamp_idx(raw: f64, n: usize) -> usize {
    if raw.is_nan() || raw < 0.0 {
        0
    } else if raw as usize >= n {
        n - 1
    } else {
        raw as usize
    }
}

/// Mean of a 2x2-covariance Gaussian via tensor quadrature: 49 points per
/// axis over +-6 sigma, renormalized. Sampling at one quarter sigma keeps the
/// lattice error many orders below the 1e-8 cross-check tolerance.
fn gaussian_mean_by_quadrature(mean: &(f64, f64), cov: &[[f64; 2]; 2]) -> (f64, f64) {
    const PTS: usize = 49;
    const SPAN: f64 = 6.0;
    let (mx, mv) = *mean;
    let (sxx, sxv, svv) = (cov[0][0], cov[0][1], cov[1][1]);
    let det = sxx * svv - sxv * sxv;
    if det <= 1e-300 {
        return (mx, mv);
    }
    let (ixx, ixv, ivv) = (svv / det, -sxv / det, sxx / det);
    let (sx, sv) = (sxx.sqrt(), svv.sqrt());
    let step_x = 2.0 * SPAN * sx / (PTS - 1) as f64;
    let step_v = 2.0 * SPAN * sv / (PTS - 1) as f64;
    let mut wsum = numeric::Accum::new();
    let mut wx = numeric::Accum::new();
    let mut wv = numeric::Accum::new();
    for i in 0..PTS {
        let x = mx - SPAN * sx + step_x * i as f64;
        let ddx = x - mx;
        for j in 0..PTS {
            let v = mv - SPAN * sv + step_v * j as f64;
            let ddv = v - mv;
            let q = ixx * ddx * ddx + 2.0 * ixv * ddx * ddv + ivv * ddv * ddv;
            let w = (-0.5 * q).exp();
            wsum.add(w);
            wx.add(w * x);
            wv.add(w * v);
        }
    }
    (wx.value() / wsum.value(), wv.value() / wsum.value())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bregman::{solve, Representation, SolveOptions};
    use crate::kernel::CostMode;
    use crate::phasegrid::{PhaseGrid, PositionalMarginal};
    use std::sync::Arc;

    fn solved_two_point() -> Solution {
        let g = Arc::new(PhaseGrid::regular(-1.0, 2.0, 13, -4.0, 4.0, 13).unwrap());
        let rho0 = PositionalMarginal::gaussian(g.clone(), 0.0, 0.12, 1e-12).unwrap();
        let rho1 = PositionalMarginal::gaussian(g.clone(), 1.0, 0.12, 1e-12).unwrap();
        let problem = Problem {
            grid: g,
            times: vec![0.0, 1.0],
            eps: 0.15,
            cost_mode: CostMode::Exact,
            marginals: vec![rho0, rho1],
            options: SolveOptions {
                representation: Representation::Scaling,
                ..Default::default()
            },
        };
        let (state, report) = solve(&problem).unwrap();
        assert!(report.converged);
        Solution::new(problem, state, report).unwrap()
    }

    #[test]
    fn node_time_bypasses_mixture() {
        let sol = solved_two_point();
        for (i, &t) in [0.0, 1.0].iter().enumerate() {
            let via_time = sol.marginal_at(t).unwrap();
            let direct = sol.node_marginal(i).unwrap();
            assert_eq!(via_time.weights(), direct.weights());
        }
    }

    #[test]
    fn out_of_range_time_rejected() {
        let sol = solved_two_point();
        assert!(matches!(sol.marginal_at(-0.1), Err(Error::TimeOutOfRange { .. })));
        assert!(matches!(sol.marginal_at(1.1), Err(Error::TimeOutOfRange { .. })));
    }

    #[test]
    fn interior_marginal_is_valid_measure() {
        let sol = solved_two_point();
        for t in [0.25, 0.5, 0.75] {
            let mu = sol.marginal_at(t).unwrap();
            assert!((mu.total_mass() - 1.0).abs() < 1e-10);
            assert!(mu.weights().iter().all(|w| *w >= 0.0));
        }
    }

    #[test]
    fn midpoint_mean_tracks_pair_weighted_hermite_midpoints() {
        let sol = solved_two_point();
        // direct evaluation of the mixture mean from the coupling and
        // closed-form bridge means, written independently of mean_at
        let grid = &sol.problem().grid;
        let n = grid.n_state();
        let coupling = &sol.state().couplings()[0];
        let mut row = vec![0.0; n];
        let (mut wx, mut mass) = (0.0, 0.0);
        for s0 in 0..n {
            coupling.row_masses(s0, &mut row);
            let (x0, v0) = grid.coords(s0);
            for (s1, &w) in row.iter().enumerate() {
                if w <= PAIR_PRUNE {
                    continue;
                }
                let (x1, v1) = grid.coords(s1);
                // Hermite midpoint: h = 1, tau = 1/2
                let mid = 0.5 * (x0 + x1) + 0.125 * (v0 - v1);
                wx += w * mid;
                mass += w;
            }
        }
        let expect = wx / mass;
        let (got, _) = sol.mean_at(0.5).unwrap();
        assert!((got - expect).abs() < 1e-10, "{got} vs {expect}");
    }

    #[test]
    fn symmetric_delta_problem_concentrates_at_origin() {
        let g = Arc::new(PhaseGrid::regular(-1.0, 1.0, 11, -3.0, 3.0, 11).unwrap());
        let mut w = vec![0.0; 11];
        w[5] = 1.0;
        let rho = PositionalMarginal::new(g.clone(), w).unwrap();
        let problem = Problem {
            grid: g,
            times: vec![0.0, 1.0],
            eps: 0.05,
            cost_mode: CostMode::Exact,
            marginals: vec![rho.clone(), rho],
            options: SolveOptions {
                representation: Representation::Scaling,
                ..Default::default()
            },
        };
        let (state, report) = solve(&problem).unwrap();
        let sol = Solution::new(problem, state, report).unwrap();
        let mu = sol.marginal_at(0.5).unwrap();
        let m = moments(&mu);
        assert!(m.mean_x.abs() < 1e-8, "mean_x {}", m.mean_x);
        assert!(m.var_x < 0.05, "var_x {}", m.var_x);
    }

    #[test]
    fn continuity_near_constraint_times() {
        let sol = solved_two_point();
        let mu0 = sol.node_marginal(0).unwrap();
        let near = sol.marginal_at(1e-3).unwrap();
        let l1 = numeric::l1_distance(mu0.weights(), near.weights());
        assert!(l1 < 0.05, "L1 jump {l1}");
        let mu1 = sol.node_marginal(1).unwrap();
        let near1 = sol.marginal_at(1.0 - 1e-3).unwrap();
        let l1 = numeric::l1_distance(mu1.weights(), near1.weights());
        assert!(l1 < 0.05, "L1 jump {l1}");
    }

    #[test]
    fn mean_path_at_node_times_matches_node_moments() {
        let sol = solved_two_point();
        let path = sol.mean_path(&[0.0, 1.0]).unwrap();
        for (i, p) in path.iter().enumerate() {
            let m = moments(&sol.node_marginal(i).unwrap());
            assert_eq!(p.mean_x, m.mean_x);
            assert_eq!(p.mean_v, m.mean_v);
        }
    }

    #[test]
    fn shortcut_and_quadrature_means_agree() {
        let sol = solved_two_point();
        for t in [0.2, 0.5, 0.8] {
            let (sx, sv) = sol.mean_at(t).unwrap();
            let (qx, qv) = sol.mean_at_quadrature(t).unwrap();
            assert!((sx - qx).abs() < 1e-8, "t={t}: x {sx} vs {qx}");
            assert!((sv - qv).abs() < 1e-8, "t={t}: v {sv} vs {qv}");
        }
    }

    #[test]
    fn reversed_problem_mirrors_mean_path() {
        let g = Arc::new(PhaseGrid::regular(-1.0, 2.0, 13, -4.0, 4.0, 13).unwrap());
        let rho0 = PositionalMarginal::gaussian(g.clone(), 0.0, 0.12, 1e-12).unwrap();
        let rho1 = PositionalMarginal::gaussian(g.clone(), 1.0, 0.12, 1e-12).unwrap();
        let mk = |marginals: Vec<PositionalMarginal>| Problem {
            grid: g.clone(),
            times: vec![0.0, 1.0],
            eps: 0.15,
            cost_mode: CostMode::Exact,
            marginals,
            options: SolveOptions {
                representation: Representation::Scaling,
                ..Default::default()
            },
        };
        let pf = mk(vec![rho0.clone(), rho1.clone()]);
        let pr = mk(vec![rho1, rho0]);
        let (sf, rf) = solve(&pf).unwrap();
        let (sr, rr) = solve(&pr).unwrap();
        let solf = Solution::new(pf, sf, rf).unwrap();
        let solr = Solution::new(pr, sr, rr).unwrap();
        for t in [0.25, 0.5, 0.75] {
            let (fx, fv) = solf.mean_at(t).unwrap();
            let (rx, rv) = solr.mean_at(1.0 - t).unwrap();
            assert!((fx - rx).abs() < 1e-6, "t={t}: {fx} vs {rx}");
            assert!((fv + rv).abs() < 1e-6, "t={t}: {fv} vs {rv}");
        }
    }

    #[test]
    fn unconverged_solution_rejected() {
        let g = Arc::new(PhaseGrid::regular(-1.0, 2.0, 9, -3.0, 3.0, 9).unwrap());
        let rho0 = PositionalMarginal::gaussian(g.clone(), 0.0, 0.2, 1e-12).unwrap();
        let rho1 = PositionalMarginal::gaussian(g.clone(), 1.0, 0.2, 1e-12).unwrap();
        let problem = Problem {
            grid: g,
            times: vec![0.0, 1.0],
            eps: 0.2,
            cost_mode: CostMode::Exact,
            marginals: vec![rho0, rho1],
            options: SolveOptions {
                representation: Representation::Dense,
                max_sweeps: 1,
                ..Default::default()
            },
        };
        let (state, report) = solve(&problem).unwrap();
        assert!(!report.converged);
        assert!(Solution::new(problem, state, report).is_err());
    }
}
