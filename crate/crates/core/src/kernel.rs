//! Pairwise transition cost and Gibbs kernel of the stochastic
//! double-integrator prior `dx = v dt, dv = sqrt(eps) dw`, plus the pinned
//! bridge moments used for intermediate-time reconstruction.
//!
//! Kernels are stored in the log domain throughout; noise levels as small as
//! 0.025 drive linear-domain entries far below f64 underflow.

use std::io::{Read, Write};
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numeric::{self, LsePartial, LSE_DROP, ROW_CHUNK};
use crate::phasegrid::PhaseGrid;

/// How the pairwise cost depends on the interval length h.
///
/// `Exact` uses the transition-density powers h^3, h^2, h of the prior
/// process, valid for any time spacing. `Uniform` divides all three terms by
/// h and measures displacement against the raw velocity (not v*h); the two
/// coincide at h = 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostMode {
    Exact,
    Uniform,
}

impl CostMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(CostMode::Exact),
            "uniform" => Ok(CostMode::Uniform),
            other => Err(Error::Validation(format!(
                "cost_mode must be \"exact\" or \"uniform\", got \"{other}\""
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CostMode::Exact => "exact",
            CostMode::Uniform => "uniform",
        }
    }
}

/// Transition cost between phase states over an interval of length `h`.
///
/// Exact mode is twice the negative log-density exponent of the prior
/// transition (up to an additive constant): with d = x1 - x0 - v0*h and
/// w = v1 - v0,
///
/// ```text
/// C = 12 d^2 / h^3 - 12 d w / h^2 + 4 w^2 / h
/// ```
///
/// Uniform mode uses d = x1 - x0 - v0 and divides the same quadratic by h.
/// Both are nonnegative (the form 12d^2 - 12dw + 4w^2 is positive definite)
/// and invariant under time reversal with velocity flip.
pub fn pair_cost(z0: (f64, f64), z1: (f64, f64), h: f64, mode: CostMode) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::NonPositiveDuration(h));
    }
    let (x0, v0) = z0;
    let (x1, v1) = z1;
    let w = v1 - v0;
    Ok(match mode {
        CostMode::Exact => {
            let d = x1 - x0 - v0 * h;
            12.0 * d * d / (h * h * h) - 12.0 * d * w / (h * h) + 4.0 * w * w / h
        }
        CostMode::Uniform => {
            let d = x1 - x0 - v0;
            (12.0 * d * d - 12.0 * d * w + 4.0 * w * w) / h
        }
    })
}

/// Log-domain Gibbs kernel over state pairs: `log_weights[s0 * n + s1] = -C/eps`.
#[derive(Debug, Clone)]
pub struct GibbsKernel {
    grid: Arc<PhaseGrid>,
    h: f64,
    eps: f64,
    mode: CostMode,
    log_weights: Vec<f64>,
}

/// Default cap on kernel entries (f64 count), ~512 MB.
pub const DEFAULT_KERNEL_BUDGET: u64 = 64_000_000;

pub fn build_gibbs(
    grid: Arc<PhaseGrid>,
    h: f64,
    eps: f64,
    mode: CostMode,
    max_entries: u64,
) -> Result<GibbsKernel> {
    if !(h > 0.0) {
        return Err(Error::NonPositiveDuration(h));
    }
    if !(eps > 0.0) {
        return Err(Error::Validation(format!("eps must be positive, got {eps}")));
    }
    let n = grid.n_state();
    let entries = (n as u128) * (n as u128);
    if entries > max_entries as u128 {
        return Err(Error::GridTooLarge { entries, budget: max_entries });
    }
    let mut log_weights = vec![0.0f64; n * n];
    let coords: Vec<(f64, f64)> = (0..n).map(|s| grid.coords(s)).collect();
    let inv_eps = 1.0 / eps;
    log_weights
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(s0, row)| {
            let z0 = coords[s0];
            for (s1, w) in row.iter_mut().enumerate() {
                // h > 0 checked above; unwrap is fine
                *w = -pair_cost(z0, coords[s1], h, mode).unwrap() * inv_eps;
            }
        });
    Ok(GibbsKernel { grid, h, eps, mode, log_weights })
}

impl GibbsKernel {
    pub fn grid(&self) -> &Arc<PhaseGrid> {
        &self.grid
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn mode(&self) -> CostMode {
        self.mode
    }

    pub fn n_state(&self) -> usize {
        self.grid.n_state()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    #[inline]
    pub fn log_weight(&self, s0: usize, s1: usize) -> f64 {
        self.log_weights[s0 * self.n_state() + s1]
    }

    /// Copy with every log-weight shifted by a constant. All projection
    /// formulas are invariant to a positive per-kernel scaling, which this
    /// exposes for testing.
    pub fn with_log_shift(&self, delta: f64) -> GibbsKernel {
        let mut k = self.clone();
        for w in &mut k.log_weights {
            *w += delta;
        }
        k
    }

    /// log of the total linear-domain kernel mass.
    pub fn log_total(&self) -> f64 {
        let n = self.n_state();
        let partials: Vec<(f64, f64)> = self
            .log_weights
            .par_chunks(n * ROW_CHUNK)
            .map(|chunk| {
                let m = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    return (m, 0.0);
                }
                let mut acc = numeric::Accum::new();
                for &w in chunk {
                    let d = w - m;
                    if d >= -LSE_DROP {
                        acc.add(d.exp());
                    }
                }
                (m, acc.value())
            })
            .collect();
        let m = partials.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let mut acc = numeric::Accum::new();
        for &(pm, ps) in &partials {
            if pm > f64::NEG_INFINITY {
                acc.add(ps * (pm - m).exp());
            }
        }
        m + acc.value().ln()
    }

    /// out[s0] = log sum_{s1} exp(log K[s0, s1] + log_b[s1]).
    pub fn log_row_contract(&self, log_b: &[f64], out: &mut [f64]) {
        let n = self.n_state();
        debug_assert_eq!(log_b.len(), n);
        debug_assert_eq!(out.len(), n);
        out.par_iter_mut().enumerate().for_each(|(s0, o)| {
            let row = &self.log_weights[s0 * n..(s0 + 1) * n];
            let mut m = f64::NEG_INFINITY;
            for (k, b) in row.iter().zip(log_b) {
                let v = k + b;
                if v > m {
                    m = v;
                }
            }
            if m == f64::NEG_INFINITY {
                *o = f64::NEG_INFINITY;
                return;
            }
            let mut acc = numeric::Accum::new();
            for (k, b) in row.iter().zip(log_b) {
                let d = k + b - m;
                if d >= -LSE_DROP {
                    acc.add(d.exp());
                }
            }
            *o = m + acc.value().ln();
        });
    }

    /// out[s1] = log sum_{s0} exp(log K[s0, s1] + log_a[s0]).
    ///
    /// Row chunks of fixed size are reduced independently and merged in chunk
    /// order, so the result does not depend on the worker count.
    pub fn log_col_contract(&self, log_a: &[f64], out: &mut [f64]) {
        let n = self.n_state();
        debug_assert_eq!(log_a.len(), n);
        debug_assert_eq!(out.len(), n);
        let partials: Vec<LsePartial> = self
            .log_weights
            .par_chunks(n * ROW_CHUNK)
            .enumerate()
            .map(|(ci, chunk)| {
                let base = ci * ROW_CHUNK;
                let rows = chunk.len() / n;
                let mut part = LsePartial::new(n);
                for r in 0..rows {
                    let a = log_a[base + r];
                    if a == f64::NEG_INFINITY {
                        continue;
                    }
                    let row = &chunk[r * n..(r + 1) * n];
                    for (j, k) in row.iter().enumerate() {
                        let v = k + a;
                        if v > part.max[j] {
                            part.max[j] = v;
                        }
                    }
                }
                for r in 0..rows {
                    let a = log_a[base + r];
                    if a == f64::NEG_INFINITY {
                        continue;
                    }
                    let row = &chunk[r * n..(r + 1) * n];
                    for (j, k) in row.iter().enumerate() {
                        let d = k + a - part.max[j];
                        if d >= -LSE_DROP {
                            part.sum[j] += d.exp();
                        }
                    }
                }
                part
            })
            .collect();
        let mut total = LsePartial::new(n);
        for p in &partials {
            total.merge(p);
        }
        let finished = total.finish();
        out.copy_from_slice(&finished);
    }

    /// Linear-domain kernel normalized to unit total mass (the prior coupling).
    pub fn dense_normalized(&self) -> Vec<f64> {
        let log_z = self.log_total();
        let mut mass = vec![0.0f64; self.log_weights.len()];
        mass.par_iter_mut()
            .zip(self.log_weights.par_iter())
            .for_each(|(m, &lw)| *m = (lw - log_z).exp());
        mass
    }

    /// Binary dump: 8-byte magic `MMSBKRN1`, n_state as LE u64, then
    /// linear-domain kernel values as LE f64, row-major over (s0, s1).
    pub fn dump<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(KERNEL_MAGIC)?;
        w.write_all(&(self.n_state() as u64).to_le_bytes())?;
        for &lw in &self.log_weights {
            w.write_all(&lw.exp().to_le_bytes())?;
        }
        Ok(())
    }
}

pub const KERNEL_MAGIC: &[u8; 8] = b"MMSBKRN1";

/// Reads a kernel dump back as (n_state, linear-domain values).
pub fn read_kernel_dump<R: Read>(mut r: R) -> Result<(usize, Vec<f64>)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != KERNEL_MAGIC {
        return Err(Error::Validation("bad kernel dump magic".into()));
    }
    let mut nb = [0u8; 8];
    r.read_exact(&mut nb)?;
    let n = u64::from_le_bytes(nb) as usize;
    let mut vals = vec![0.0f64; n * n];
    let mut buf = [0u8; 8];
    for v in &mut vals {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok((n, vals))
}

/// Mean and covariance of the prior bridge at an interior time.
#[derive(Debug, Clone, Copy)]
pub struct BridgeMoments {
    pub mean: (f64, f64),
    /// Row-major symmetric 2x2: [[var_x, cov_xv], [cov_xv, var_v]].
    pub cov: [[f64; 2]; 2],
}

/// Gaussian conditioning of the prior on exact phase-space endpoints.
///
/// The prior over `[0, h]` started at `z0` has mean `(x0 + v0 t, v0)` and
/// noise covariance `eps * [[t^3/3, t^2/2], [t^2/2, t]]`. Conditioning on
/// `z(h) = z1` is a 2x2 Schur complement; the resulting mean path is the
/// cubic Hermite interpolant of the endpoint constraints and the covariance
/// scales linearly in eps, vanishing at both endpoints.
pub fn bridge_moments(
    z0: (f64, f64),
    z1: (f64, f64),
    h: f64,
    tau: f64,
    eps: f64,
) -> Result<BridgeMoments> {
    if !(h > 0.0) {
        return Err(Error::NonPositiveDuration(h));
    }
    if !(0.0..=h).contains(&tau) {
        return Err(Error::TauOutOfRange { tau, h });
    }
    let (x0, v0) = z0;
    let (x1, v1) = z1;

    // free-flight means at tau and h
    let m_tau = (x0 + v0 * tau, v0);
    let m_h = (x0 + v0 * h, v0);

    // A(tau) = Cov(z_tau)/eps, B = Cov(z_tau, z_h)/eps, Ah_inv = (Cov(z_h)/eps)^-1
    let a = [[tau * tau * tau / 3.0, tau * tau / 2.0], [tau * tau / 2.0, tau]];
    let b = [
        [tau * tau * h / 2.0 - tau * tau * tau / 6.0, tau * tau / 2.0],
        [tau * h - tau * tau / 2.0, tau],
    ];
    let h2 = h * h;
    let h3 = h2 * h;
    let ah_inv = [[12.0 / h3, -6.0 / h2], [-6.0 / h2, 4.0 / h]];

    let g = mat_mul(&b, &ah_inv);
    let r = (x1 - m_h.0, v1 - m_h.1);
    let mean = (
        m_tau.0 + g[0][0] * r.0 + g[0][1] * r.1,
        m_tau.1 + g[1][0] * r.0 + g[1][1] * r.1,
    );

    let gbt = mat_mul_t(&g, &b);
    let mut cov = [
        [eps * (a[0][0] - gbt[0][0]), eps * (a[0][1] - gbt[0][1])],
        [eps * (a[1][0] - gbt[1][0]), eps * (a[1][1] - gbt[1][1])],
    ];
    // symmetrize and clamp rounding-level negatives on the diagonal
    let off = 0.5 * (cov[0][1] + cov[1][0]);
    cov[0][1] = off;
    cov[1][0] = off;
    for d in 0..2 {
        if cov[d][d] < 0.0 {
            cov[d][d] = 0.0;
        }
    }
    Ok(BridgeMoments { mean, cov })
}

fn mat_mul(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

/// a * b^T
fn mat_mul_t(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[0][1],
            a[0][0] * b[1][0] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[0][1],
            a[1][0] * b[1][0] + a[1][1] * b[1][1],
        ],
    ]
}
