//! Independent references for validation: the Euclidean natural cubic spline
//! and a brute-force small-instance minimizer of the chain objective.
//!
//! The brute-force solver deliberately uses a different algorithm family
//! (projected gradient on the flattened couplings with exact projection onto
//! the linear constraints) than the production solver, so agreement between
//! the two is evidence rather than tautology.

use nalgebra::{DMatrix, DVector};

use crate::bregman::Problem;
use crate::error::{Error, Result};
use crate::numeric;
use crate::phasegrid::PositionalMarginal;

/// Natural cubic interpolant: knots plus per-knot second derivatives.
#[derive(Debug, Clone)]
pub struct SplineCurve {
    ts: Vec<f64>,
    ys: Vec<f64>,
    /// second derivatives at the knots, zero at both ends
    m: Vec<f64>,
}

/// Unique C2 natural cubic through the knots; minimizes the integral of the
/// squared second derivative among C2 interpolants. Tridiagonal solve on the
/// interior second derivatives.
pub fn natural_cubic_spline(times: &[f64], values: &[f64]) -> Result<SplineCurve> {
    let n = times.len();
    if n < 2 || values.len() != n || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::DegenerateKnots);
    }
    let h: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let mut m = vec![0.0; n];
    let interior = n - 2;
    if interior > 0 {
        // rows: (h[i-1]/6) M[i-1] + ((h[i-1]+h[i])/3) M[i] + (h[i]/6) M[i+1] = rhs
        let mut diag = vec![0.0; interior];
        let mut sub = vec![0.0; interior];
        let mut sup = vec![0.0; interior];
        let mut rhs = vec![0.0; interior];
        for k in 0..interior {
            let i = k + 1;
            sub[k] = h[i - 1] / 6.0;
            diag[k] = (h[i - 1] + h[i]) / 3.0;
            sup[k] = h[i] / 6.0;
            rhs[k] = (values[i + 1] - values[i]) / h[i] - (values[i] - values[i - 1]) / h[i - 1];
        }
        // Thomas algorithm
        for k in 1..interior {
            let w = sub[k] / diag[k - 1];
            diag[k] -= w * sup[k - 1];
            rhs[k] -= w * rhs[k - 1];
        }
        m[interior] = rhs[interior - 1] / diag[interior - 1];
        for k in (0..interior - 1).rev() {
            m[k + 1] = (rhs[k] - sup[k] * m[k + 2]) / diag[k];
        }
    }
    Ok(SplineCurve { ts: times.to_vec(), ys: values.to_vec(), m })
}

impl SplineCurve {
    pub fn knot_times(&self) -> &[f64] {
        &self.ts
    }

    pub fn second_derivatives(&self) -> &[f64] {
        &self.m
    }

    fn segment(&self, t: f64) -> usize {
        let n = self.ts.len();
        if t <= self.ts[0] {
            return 0;
        }
        if t >= self.ts[n - 1] {
            return n - 2;
        }
        match self.ts.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
            Ok(i) => i.min(n - 2),
            Err(i) => i - 1,
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let i = self.segment(t);
        let (t0, t1) = (self.ts[i], self.ts[i + 1]);
        let h = t1 - t0;
        let (a, b) = (t1 - t, t - t0);
        self.m[i] * a * a * a / (6.0 * h)
            + self.m[i + 1] * b * b * b / (6.0 * h)
            + (self.ys[i] / h - self.m[i] * h / 6.0) * a
            + (self.ys[i + 1] / h - self.m[i + 1] * h / 6.0) * b
    }

    pub fn deriv(&self, t: f64) -> f64 {
        let i = self.segment(t);
        let (t0, t1) = (self.ts[i], self.ts[i + 1]);
        let h = t1 - t0;
        let (a, b) = (t1 - t, t - t0);
        -self.m[i] * a * a / (2.0 * h)
            + self.m[i + 1] * b * b / (2.0 * h)
            - (self.ys[i] / h - self.m[i] * h / 6.0)
            + (self.ys[i + 1] / h - self.m[i + 1] * h / 6.0)
    }

    pub fn second_deriv(&self, t: f64) -> f64 {
        let i = self.segment(t);
        let h = self.ts[i + 1] - self.ts[i];
        (self.m[i] * (self.ts[i + 1] - t) + self.m[i + 1] * (t - self.ts[i])) / h
    }

    /// Integral of the squared second derivative over the knot span.
    /// The integrand is piecewise linear squared, integrated exactly.
    pub fn accel_energy(&self) -> f64 {
        let mut acc = numeric::Accum::new();
        for i in 0..self.ts.len() - 1 {
            let h = self.ts[i + 1] - self.ts[i];
            let (a, b) = (self.m[i], self.m[i + 1]);
            acc.add(h * (a * a + a * b + b * b) / 3.0);
        }
        acc.value()
    }
}

/// Pair-count cap for the brute-force reference.
pub const ORACLE_PAIR_LIMIT: usize = 10_000;

const ORACLE_GRAD_TOL: f64 = 1e-10;
const ORACLE_MAX_ITERS: usize = 500_000;

/// Outcome of the reference minimization.
#[derive(Debug, Clone)]
pub struct OracleSolution {
    /// dense couplings, row-major over state pairs, one per interval
    pub couplings: Vec<Vec<f64>>,
    pub objective: f64,
    /// Euclidean norm of the objective gradient projected onto the
    /// constraint tangent space at the returned point.
    pub projected_grad_norm: f64,
    pub iterations: usize,
}

impl OracleSolution {
    /// Marginal at node `i` implied by the couplings (row marginal of the
    /// right coupling, column marginal of the left for the last node).
    pub fn node_marginal(&self, n_state: usize, i: usize) -> Vec<f64> {
        if i < self.couplings.len() {
            row_sums(&self.couplings[i], n_state)
        } else {
            col_sums(&self.couplings[i - 1], n_state)
        }
    }
}

fn row_sums(mass: &[f64], n: usize) -> Vec<f64> {
    (0..n).map(|s| numeric::sum(&mass[s * n..(s + 1) * n])).collect()
}

fn col_sums(mass: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for row in mass.chunks_exact(n) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Minimizes the chain objective over the constraint polytope by projected
/// gradient descent with exact projection onto the linear constraints each
/// step, run to a projected-gradient norm of 1e-10.
///
/// Requires strictly positive positional marginals; the optimum is then
/// interior and the entropic gradient stays finite. Step sizes come from a
/// Barzilai-Borwein estimate guarded by backtracking that keeps all masses
/// positive and the objective nonincreasing.
pub fn brute_force_solve(problem: &Problem) -> Result<OracleSolution> {
    problem.validate()?;
    let n = problem.grid.n_state();
    let n_v = problem.grid.n_v();
    let n_x = problem.grid.n_x();
    let intervals = problem.n_intervals();
    let pairs = intervals * n * n;
    if pairs > ORACLE_PAIR_LIMIT {
        return Err(Error::InstanceTooLarge { pairs, limit: ORACLE_PAIR_LIMIT });
    }
    for (i, rho) in problem.marginals.iter().enumerate() {
        if rho.weights().iter().any(|w| *w <= 0.0) {
            return Err(Error::Validation(format!(
                "reference solver needs strictly positive marginals, node {i} has a zero"
            )));
        }
    }

    let kernels = problem.build_kernels()?;
    let log_k: Vec<&[f64]> = kernels.iter().map(|k| k.log_weights()).collect();
    let sum_k: Vec<f64> = kernels.iter().map(|k| k.log_total().exp()).collect();

    // Linear constraints A x = b over the stacked couplings.
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut b: Vec<f64> = Vec::new();
    let idx = |i: usize, s0: usize, s1: usize| i * n * n + s0 * n + s1;

    // interior continuity: col marginal of pi_{i-1} == row marginal of pi_i
    for i in 1..intervals {
        for s in 0..n {
            let mut row = Vec::with_capacity(2 * n);
            for s0 in 0..n {
                row.push((idx(i - 1, s0, s), 1.0));
            }
            for s1 in 0..n {
                row.push((idx(i, s, s1), -1.0));
            }
            rows.push(row);
            b.push(0.0);
        }
    }
    // positional constraints; interior nodes pin the left-inducing coupling
    for node in 0..=intervals {
        for ix in 0..n_x {
            let mut row = Vec::new();
            for iv in 0..n_v {
                let s = ix * n_v + iv;
                if node < intervals {
                    for s1 in 0..n {
                        row.push((idx(node, s, s1), 1.0));
                    }
                } else {
                    for s0 in 0..n {
                        row.push((idx(node - 1, s0, s), 1.0));
                    }
                }
            }
            rows.push(row);
            b.push(problem.marginals[node].weights()[ix]);
        }
    }

    let m = rows.len();
    let dim = pairs;
    let mut a = DMatrix::<f64>::zeros(m, dim);
    for (r, row) in rows.iter().enumerate() {
        for &(c, v) in row {
            a[(r, c)] += v;
        }
    }
    let b = DVector::from_vec(b);
    // Pseudo-inverse of A A^T absorbs the redundancy among the constraints.
    let gram = &a * a.transpose();
    let gram_pinv = gram
        .clone()
        .pseudo_inverse(1e-12 * gram.norm())
        .map_err(|e| Error::Validation(format!("constraint Gram pseudo-inverse failed: {e}")))?;
    let project = |x: &DVector<f64>| -> DVector<f64> {
        let r = &a * x - &b;
        x - a.transpose() * (&gram_pinv * r)
    };

    // feasible interior start: independent couplings of uniform velocity lifts
    let lift = |rho: &PositionalMarginal| -> Vec<f64> {
        let mut w = vec![0.0; n];
        for ix in 0..n_x {
            for iv in 0..n_v {
                w[ix * n_v + iv] = rho.weights()[ix] / n_v as f64;
            }
        }
        w
    };
    let mut x = DVector::<f64>::zeros(dim);
    for i in 0..intervals {
        let left = lift(&problem.marginals[i]);
        let right = lift(&problem.marginals[i + 1]);
        for s0 in 0..n {
            for s1 in 0..n {
                x[idx(i, s0, s1)] = left[s0] * right[s1];
            }
        }
    }
    x = project(&x);
    if x.iter().any(|v| *v <= 0.0) {
        return Err(Error::Validation(
            "reference solver could not find a positive feasible start".into(),
        ));
    }

    let objective = |x: &DVector<f64>| -> f64 {
        let mut acc = numeric::Accum::new();
        for i in 0..intervals {
            for (p, &lk) in x.as_slice()[i * n * n..(i + 1) * n * n]
                .iter()
                .zip(log_k[i])
            {
                if *p > 0.0 {
                    acc.add(p * (p.ln() - lk) - p);
                }
            }
            acc.add(sum_k[i]);
        }
        acc.value()
    };
    let gradient = |x: &DVector<f64>| -> DVector<f64> {
        let mut g = DVector::<f64>::zeros(dim);
        for i in 0..intervals {
            for (j, &lk) in log_k[i].iter().enumerate() {
                let p = x[i * n * n + j];
                g[i * n * n + j] = p.max(1e-300).ln() - lk;
            }
        }
        g
    };
    let tangent = |g: &DVector<f64>| -> DVector<f64> {
        let r = &a * g;
        g - a.transpose() * (&gram_pinv * r)
    };

    let mut fx = objective(&x);
    let mut g_t = tangent(&gradient(&x));
    let mut step = 1e-2;
    let mut prev: Option<(DVector<f64>, DVector<f64>)> = None;

    for iter in 0..ORACLE_MAX_ITERS {
        let gnorm = g_t.norm();
        if gnorm <= ORACLE_GRAD_TOL {
            let couplings: Vec<Vec<f64>> = (0..intervals)
                .map(|i| x.as_slice()[i * n * n..(i + 1) * n * n].to_vec())
                .collect();
            return Ok(OracleSolution {
                couplings,
                objective: fx,
                projected_grad_norm: gnorm,
                iterations: iter,
            });
        }
        // Barzilai-Borwein step estimate from the previous move
        if let Some((ref xp, ref gp)) = prev {
            let s = &x - xp;
            let y = &g_t - gp;
            let sy = s.dot(&y);
            if sy > 0.0 {
                step = (s.dot(&s) / sy).clamp(1e-12, 1e4);
            }
        }
        // backtrack: stay positive, do not increase the objective
        let mut eta = step;
        let mut accepted = false;
        for _ in 0..60 {
            let cand = project(&(&x - eta * &g_t));
            if cand.iter().all(|v| *v > 0.0) {
                let fc = objective(&cand);
                if fc <= fx - 1e-4 * eta * gnorm * gnorm || fc < fx {
                    prev = Some((x.clone(), g_t.clone()));
                    x = cand;
                    fx = fc;
                    g_t = tangent(&gradient(&x));
                    accepted = true;
                    break;
                }
            }
            eta *= 0.5;
        }
        if !accepted {
            // no admissible step left at this scale; gradient noise floor
            return if gnorm <= 1e-6 {
                let couplings: Vec<Vec<f64>> = (0..intervals)
                    .map(|i| x.as_slice()[i * n * n..(i + 1) * n * n].to_vec())
                    .collect();
                Ok(OracleSolution {
                    couplings,
                    objective: fx,
                    projected_grad_norm: gnorm,
                    iterations: iter,
                })
            } else {
                Err(Error::OracleNotConverged { grad_norm: gnorm })
            };
        }
    }
    Err(Error::OracleNotConverged { grad_norm: g_t.norm() })
}
