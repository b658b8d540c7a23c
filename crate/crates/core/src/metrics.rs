//! Error rate, NLL and binned calibration errors.
//!
//! Binning is equal-mass: rows are stably sorted by the binned score and cut
//! into contiguous groups whose sizes differ by at most one, with the larger
//! groups at the low-score end.

use serde::Serialize;

use crate::domain::ProbVector;
use crate::error::{Error, Result};
use crate::numeric::floored_ln;

pub const DEFAULT_BINS: usize = 15;

fn check_lengths(left: usize, right: usize) -> Result<()> {
    if left != right {
        return Err(Error::LengthMismatch { left, right });
    }
    if left == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

fn check_bins(n: usize, bins: usize) -> Result<()> {
    if bins == 0 {
        return Err(Error::ConfigInvalid("bin count must be positive".into()));
    }
    if n < bins {
        return Err(Error::TooFewRows {
            needed: bins,
            got: n,
        });
    }
    Ok(())
}

pub fn error_rate(preds: &[usize], truth: &[usize]) -> Result<f64> {
    check_lengths(preds.len(), truth.len())?;
    let wrong = preds.iter().zip(truth).filter(|(p, y)| p != y).count();
    Ok(wrong as f64 / preds.len() as f64)
}

/// Mean of `-ln max(q[y], EPS)`.
pub fn nll(posteriors: &[ProbVector], truth: &[usize]) -> Result<f64> {
    check_lengths(posteriors.len(), truth.len())?;
    let total: f64 = posteriors
        .iter()
        .zip(truth)
        .map(|(q, &y)| -floored_ln(q[y]))
        .sum();
    Ok(total / posteriors.len() as f64)
}

/// Row indices sorted ascending by `score` (stable), split into `bins`
/// contiguous ranges.
pub fn equal_mass_bins(score: &[f64], bins: usize) -> Vec<Vec<usize>> {
    let n = score.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score[a].total_cmp(&score[b]));
    let (base, rem) = (n / bins, n % bins);
    let mut out = Vec::with_capacity(bins);
    let mut start = 0;
    for b in 0..bins {
        let size = base + usize::from(b < rem);
        out.push(order[start..start + size].to_vec());
        start += size;
    }
    out
}

/// `sum_b (n_b / n) |mean(hit) - mean(score)|` over equal-mass bins of
/// `score`.
fn binned_gap(score: &[f64], hit: &[bool], bins: usize) -> f64 {
    let n = score.len() as f64;
    let mut total = 0.0;
    for bin in equal_mass_bins(score, bins) {
        if bin.is_empty() {
            continue;
        }
        let size = bin.len() as f64;
        let mut conf = 0.0;
        let mut hits = 0usize;
        for &i in &bin {
            conf += score[i];
            hits += usize::from(hit[i]);
        }
        total += (size / n) * (hits as f64 / size - conf / size).abs();
    }
    total
}

fn check_k(posteriors: &[ProbVector], truth: &[usize]) -> Result<usize> {
    let k = posteriors[0].len();
    for (q, &y) in posteriors.iter().zip(truth) {
        if q.len() != k {
            return Err(Error::WrongLength {
                expected: k,
                got: q.len(),
            });
        }
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, k });
        }
    }
    Ok(k)
}

/// Top-label expected calibration error.
pub fn ece(posteriors: &[ProbVector], truth: &[usize], bins: usize) -> Result<f64> {
    check_lengths(posteriors.len(), truth.len())?;
    check_bins(posteriors.len(), bins)?;
    check_k(posteriors, truth)?;
    let conf: Vec<f64> = posteriors.iter().map(ProbVector::confidence).collect();
    let hit: Vec<bool> = posteriors
        .iter()
        .zip(truth)
        .map(|(q, &y)| q.argmax() == y)
        .collect();
    Ok(binned_gap(&conf, &hit, bins))
}

/// Classwise ECE: the per-class binned gap averaged over classes.
pub fn cw_ece(posteriors: &[ProbVector], truth: &[usize], bins: usize) -> Result<f64> {
    check_lengths(posteriors.len(), truth.len())?;
    check_bins(posteriors.len(), bins)?;
    let k = check_k(posteriors, truth)?;
    let mut total = 0.0;
    for j in 0..k {
        let score: Vec<f64> = posteriors.iter().map(|q| q[j]).collect();
        let hit: Vec<bool> = truth.iter().map(|&y| y == j).collect();
        total += binned_gap(&score, &hit, bins);
    }
    Ok(total / k as f64)
}

/// l1 marginal calibration error `E |p(y = Y | m) - q_Y|`.
///
/// With `oracle` the true conditional is known and the expectation is an
/// exact sample mean. Without it, `p(y = j | m)` is estimated by the
/// frequency of class `j` in equal-mass bins of `q_j`.
pub fn mce_l1(
    posteriors: &[ProbVector],
    truth: &[usize],
    bins: usize,
    oracle: Option<&[ProbVector]>,
) -> Result<f64> {
    check_lengths(posteriors.len(), truth.len())?;
    let k = check_k(posteriors, truth)?;
    let n = posteriors.len() as f64;
    if let Some(oracle) = oracle {
        if oracle.len() != posteriors.len() {
            return Err(Error::LengthMismatch {
                left: posteriors.len(),
                right: oracle.len(),
            });
        }
        let total: f64 = posteriors
            .iter()
            .zip(oracle)
            .zip(truth)
            .map(|((q, p), &y)| (p[y] - q[y]).abs())
            .sum();
        return Ok(total / n);
    }
    check_bins(posteriors.len(), bins)?;
    let mut total = 0.0;
    for j in 0..k {
        let score: Vec<f64> = posteriors.iter().map(|q| q[j]).collect();
        for bin in equal_mass_bins(&score, bins) {
            if bin.is_empty() {
                continue;
            }
            let freq = bin.iter().filter(|&&i| truth[i] == j).count() as f64 / bin.len() as f64;
            for &i in bin.iter().filter(|&&i| truth[i] == j) {
                total += (freq - score[i]).abs();
            }
        }
    }
    Ok(total / n)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub n: usize,
    pub error_rate: f64,
    pub nll: f64,
    pub ece: f64,
    pub cw_ece: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mce_l1: Option<f64>,
    pub bins: usize,
}

impl MetricsReport {
    /// Predictions are the argmax of each posterior. `mce_l1` is filled only
    /// when oracle posteriors are supplied.
    pub fn compute(
        posteriors: &[ProbVector],
        truth: &[usize],
        bins: usize,
        oracle: Option<&[ProbVector]>,
    ) -> Result<Self> {
        let preds: Vec<usize> = posteriors.iter().map(ProbVector::argmax).collect();
        Ok(Self {
            n: posteriors.len(),
            error_rate: error_rate(&preds, truth)?,
            nll: nll(posteriors, truth)?,
            ece: ece(posteriors, truth, bins)?,
            cw_ece: cw_ece(posteriors, truth, bins)?,
            mce_l1: oracle
                .map(|o| mce_l1(posteriors, truth, bins, Some(o)))
                .transpose()?,
            bins,
        })
    }
}

/// One row of a reliability table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReliabilityBin {
    pub bin: usize,
    pub count: usize,
    pub min_confidence: f64,
    pub max_confidence: f64,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

pub fn reliability_bins(
    posteriors: &[ProbVector],
    truth: &[usize],
    bins: usize,
) -> Result<Vec<ReliabilityBin>> {
    check_lengths(posteriors.len(), truth.len())?;
    check_bins(posteriors.len(), bins)?;
    check_k(posteriors, truth)?;
    let conf: Vec<f64> = posteriors.iter().map(ProbVector::confidence).collect();
    Ok(equal_mass_bins(&conf, bins)
        .into_iter()
        .enumerate()
        .map(|(b, idx)| {
            let size = idx.len() as f64;
            let hits = idx
                .iter()
                .filter(|&&i| posteriors[i].argmax() == truth[i])
                .count();
            ReliabilityBin {
                bin: b,
                count: idx.len(),
                min_confidence: conf[idx[0]],
                max_confidence: conf[*idx.last().expect("bins are non-empty when n >= bins")],
                mean_confidence: idx.iter().map(|&i| conf[i]).sum::<f64>() / size,
                accuracy: hits as f64 / size,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v, v.len()).unwrap()
    }

    #[test]
    fn error_rate_bounds() {
        assert_eq!(error_rate(&[0, 1, 2], &[0, 1, 2]).unwrap(), 0.0);
        assert_eq!(error_rate(&[1, 2, 0], &[0, 1, 2]).unwrap(), 1.0);
        assert!(matches!(
            error_rate(&[0], &[0, 1]).unwrap_err(),
            Error::LengthMismatch { .. }
        ));
    }

    #[test]
    fn nll_hand_values() {
        let q = [pv(&[0.8, 0.2]), pv(&[0.6, 0.4])];
        let v = nll(&q, &[0, 1]).unwrap();
        assert!((v - (-(0.8f64.ln()) - 0.4f64.ln()) / 2.0).abs() < 1e-15);
        assert!((v - 0.5697).abs() < 1e-4);
        let uniform = vec![ProbVector::uniform(10); 7];
        assert!((nll(&uniform, &[0, 1, 2, 3, 4, 5, 6]).unwrap() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn bin_sizes_put_remainder_low() {
        let score: Vec<f64> = (0..17).map(|i| i as f64).collect();
        let sizes: Vec<usize> = equal_mass_bins(&score, 5).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 4, 3, 3, 3]);
    }

    #[test]
    fn ece_degenerate_cases() {
        let onehot: Vec<ProbVector> = (0..20)
            .map(|i| pv(if i % 2 == 0 { &[1.0, 0.0] } else { &[0.0, 1.0] }))
            .collect();
        let truth: Vec<usize> = (0..20).map(|i| i % 2).collect();
        assert!(ece(&onehot, &truth, 15).unwrap() < 1e-11);
        assert!(cw_ece(&onehot, &truth, 15).unwrap() < 1e-11);

        let sure = vec![pv(&[1.0, 0.0]); 20];
        let half: Vec<usize> = (0..20).map(|i| i % 2).collect();
        assert!((ece(&sure, &half, 15).unwrap() - 0.5).abs() < 1e-11);
    }

    #[test]
    fn too_few_rows_for_bins() {
        let q = vec![ProbVector::uniform(2); 3];
        assert!(matches!(
            ece(&q, &[0, 1, 0], 15).unwrap_err(),
            Error::TooFewRows { needed: 15, got: 3 }
        ));
    }

    #[test]
    fn mce_oracle_zero_on_self() {
        let q = vec![pv(&[0.3, 0.7]), pv(&[0.9, 0.1])];
        assert_eq!(mce_l1(&q, &[1, 0], 15, Some(&q)).unwrap(), 0.0);
    }

    #[test]
    fn report_serializes_flat() {
        let q = vec![ProbVector::uniform(2); 4];
        let r = MetricsReport::compute(&q, &[0, 1, 0, 1], 2, None).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        assert!(v.get("mce_l1").is_none());
        assert_eq!(v["bins"], 2);
    }
}
