//! Small numerical kernels shared across modules.
//!
//! Reductions go through [`pairwise_sum`] so that results do not depend on
//! how rows were scheduled across threads.

use rayon::prelude::*;

/// Probability floor applied before any logarithm.
pub const EPS: f64 = 1e-12;

const PAIRWISE_LEAF: usize = 16;
const PARALLEL_MIN_ROWS: usize = 4096;

/// Sum with a fixed binary-tree association order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= PAIRWISE_LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Evaluate `f` on every index in `0..n` and reduce with [`pairwise_sum`].
///
/// Large inputs are mapped in parallel; the reduction order is fixed, so the
/// result is bit-identical to the sequential evaluation.
pub fn map_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let values: Vec<f64> = if n >= PARALLEL_MIN_ROWS {
        (0..n).into_par_iter().map(&f).collect()
    } else {
        (0..n).map(&f).collect()
    };
    pairwise_sum(&values)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Turn log-weights into probabilities in place.
pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v /= total;
    }
}

/// Turn log-weights into log-probabilities in place.
pub fn log_softmax_in_place(z: &mut [f64]) {
    let lse = log_sum_exp(z);
    for v in z.iter_mut() {
        *v -= lse;
    }
}

/// Clamp to `[EPS, 1]` and renormalize so the entries sum to one while no
/// entry ends up below `EPS`.
pub fn floor_normalize(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = x.max(EPS);
    }
    let total: f64 = v.iter().sum();
    for x in v.iter_mut() {
        *x /= total;
    }
    let mut deficit = 0.0;
    for x in v.iter_mut() {
        if *x < EPS {
            deficit += EPS - *x;
            *x = EPS;
        }
    }
    if deficit > 0.0 {
        let top = argmax(v);
        v[top] -= deficit;
    }
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `ln(max(p, EPS))`
#[inline]
pub fn floored_ln(p: f64) -> f64 {
    p.max(EPS).ln()
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
