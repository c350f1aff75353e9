//! Compensated summation and log-domain reductions.
//!
//! Everything that feeds an emitted number or a tolerance check goes through
//! these helpers so results do not depend on thread count or reduction order.

/// Neumaier compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct Accum {
    sum: f64,
    comp: f64,
}

impl Accum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated sum of a slice.
pub fn sum(xs: &[f64]) -> f64 {
    let mut acc = Accum::new();
    for &x in xs {
        acc.add(x);
    }
    acc.value()
}

/// L1 distance between two equal-length slices, compensated.
pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = Accum::new();
    for (&x, &y) in a.iter().zip(b) {
        acc.add((x - y).abs());
    }
    acc.value()
}

/// Terms further than this below the running maximum are dropped from
/// log-sum-exp reductions. exp(-64) ~ 1.6e-28; even 1e8 dropped terms
/// perturb the sum below 1e-19 relative, far under every tolerance used.
pub const LSE_DROP: f64 = 64.0;

/// log(sum(exp(xs))) over a slice, safe for empty input and -inf entries.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut acc = Accum::new();
    for &x in xs {
        let d = x - m;
        if d >= -LSE_DROP {
            acc.add(d.exp());
        }
    }
    m + acc.value().ln()
}

/// Partial log-sum-exp state for deterministic chunked column reductions:
/// per-column running max and the sum of exponentials relative to it.
#[derive(Debug, Clone)]
pub struct LsePartial {
    pub max: Vec<f64>,
    pub sum: Vec<f64>,
}

impl LsePartial {
    pub fn new(n: usize) -> Self {
        Self {
            max: vec![f64::NEG_INFINITY; n],
            sum: vec![0.0; n],
        }
    }

    /// Merge `other` into `self`, column by column. Merging in a fixed chunk
    /// order keeps the result independent of the worker count.
    pub fn merge(&mut self, other: &LsePartial) {
        for j in 0..self.max.len() {
            let (ma, sa) = (self.max[j], self.sum[j]);
            let (mb, sb) = (other.max[j], other.sum[j]);
            if mb == f64::NEG_INFINITY {
                continue;
            }
            if ma == f64::NEG_INFINITY {
                self.max[j] = mb;
                self.sum[j] = sb;
            } else if ma >= mb {
                self.sum[j] = sa + sb * (mb - ma).exp();
            } else {
                self.max[j] = mb;
                self.sum[j] = sb + sa * (ma - mb).exp();
            }
        }
    }

    pub fn finish(&self) -> Vec<f64> {
        self.max
            .iter()
            .zip(&self.sum)
            .map(|(&m, &s)| if m == f64::NEG_INFINITY { m } else { m + s.ln() })
            .collect()
    }
}

/// Fixed row-chunk size for parallel matrix reductions. Partials are merged
/// in chunk index order, so results are bit-identical for any thread count.
pub const ROW_CHUNK: usize = 64;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_beats_naive_on_cancellation() {
        let xs = vec![1e16, 1.0, -1e16, 1.0];
        assert_eq!(sum(&xs), 2.0);
    }

    #[test]
    fn log_sum_exp_matches_direct() {
        let xs = vec![-1.0, 0.5, 2.0, -30.0];
        let direct: f64 = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - direct).abs() < 1e-14);
    }

    #[test]
    fn log_sum_exp_empty_and_neg_inf() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn lse_partial_merge_matches_whole() {
        let xs: Vec<f64> = (0..10).map(|i| (i as f64) * 0.3 - 2.0).collect();
        let mut a = LsePartial::new(1);
        for &x in &xs[..4] {
            let d = x - a.max[0];
            if d > 0.0 {
                a.sum[0] = a.sum[0] * (-d).exp() + 1.0;
                a.max[0] = x;
            } else {
                a.sum[0] += d.exp();
            }
        }
        let mut b = LsePartial::new(1);
        for &x in &xs[4..] {
            let d = x - b.max[0];
            if d > 0.0 {
                b.sum[0] = b.sum[0] * (-d).exp() + 1.0;
                b.max[0] = x;
            } else {
                b.sum[0] += d.exp();
            }
        }
        a.merge(&b);
        assert!((a.finish()[0] - log_sum_exp(&xs)).abs() < 1e-13);
    }
}
