//! Confidence ratios, accuracy bounds for the product rule, the estimation
//! error bound, and conditional-dependence diagnostics.

use serde::Serialize;

use crate::calibration::{temper, Temperature};
use crate::combiner::combine_calibrated;
use crate::confusion::ConfusionMatrix;
use crate::domain::{CombinationDataset, ProbVector};
use crate::error::{Error, Result};
use crate::metrics::mce_l1;

/// Replaces the infinite odds of a certain prediction.
pub const ODDS_CAP: f64 = 1e15;

fn odds(c: f64) -> f64 {
    if c >= 1.0 {
        return ODDS_CAP;
    }
    (c / (1.0 - c)).min(ODDS_CAP)
}

/// `c / (1 - c)` with `c = temper(m, t)[y]`.
pub fn confidence_ratio_model(m: &ProbVector, t: Temperature, y: usize) -> f64 {
    odds(temper(m, t)[y])
}

/// `c / (1 - c)` with `c = phi[h][y]`.
pub fn confidence_ratio_human(phi: &ConfusionMatrix, h: usize, y: usize) -> f64 {
    odds(phi.get(h, y))
}

/// Three-sigma binomial noise allowance for a frequency over `n` rows.
pub fn sampling_slack(n: usize) -> f64 {
    3.0 * (0.25 / n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub empirical_accuracy: f64,
    /// Frequency of `r_m > 1 / r_h`.
    pub bound_weak: f64,
    /// Frequency of `q_y phi[h][y] > max_{k != y} q_k * max_{k != y} phi[h][k]`.
    pub bound_strong: f64,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub binary_gap: Option<f64>,
    pub slack: f64,
}

impl BoundReport {
    pub fn accuracy_respects_weak(&self) -> bool {
        self.empirical_accuracy >= self.bound_weak - self.slack
    }
}

fn max_excluding(v: &[f64], skip: usize) -> f64 {
    v.iter()
        .enumerate()
        .filter(|&(i, _)| i != skip)
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Accuracy of the product rule at `(phi, t)` on the labeled rows, with the
/// weak (odds) and strong (max-ratio) lower bounds.
///
/// Both events are evaluated in product form, which equals the odds form
/// whenever the probabilities are strictly inside `(0, 1)` and needs no cap.
pub fn theorem1_report(
    data: &CombinationDataset,
    phi: &ConfusionMatrix,
    t: Temperature,
) -> Result<BoundReport> {
    if data.supervised_count() == 0 {
        return Err(Error::NoSupervisedRows);
    }
    if phi.k() != data.k() {
        return Err(Error::WrongLength {
            expected: data.k(),
            got: phi.k(),
        });
    }
    let (mut correct, mut weak, mut strong, mut n) = (0usize, 0usize, 0usize, 0usize);
    for (h, m, y) in data.supervised() {
        let q = temper(m, t);
        let posterior = combine_calibrated(h, &q, phi);
        let row = phi.row(h);
        let (qy, fy) = (q[y], row[y]);
        n += 1;
        correct += usize::from(posterior.argmax() == y);
        weak += usize::from(qy * fy > (1.0 - qy) * (1.0 - fy));
        strong += usize::from(qy * fy > max_excluding(q.as_slice(), y) * max_excluding(row, y));
    }
    let nf = n as f64;
    let accuracy = correct as f64 / nf;
    let bound_weak = weak as f64 / nf;
    Ok(BoundReport {
        empirical_accuracy: accuracy,
        bound_weak,
        bound_strong: strong as f64 / nf,
        n,
        binary_gap: (data.k() == 2).then_some(accuracy - bound_weak),
        slack: sampling_slack(n),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Theorem2Report {
    pub eta_mean: f64,
    pub bound: f64,
    pub phi_l1: f64,
    pub mce_l1: f64,
    pub holds: bool,
}

/// Mean of `|phi[h][y] p_y - q_y phi_hat[h][y]|` against its bound
/// `||phi - phi_hat||_1 + MCE(q)`, with `p` the oracle posterior and
/// `q = temper(m, t)`.
pub fn theorem2_report(
    data: &CombinationDataset,
    oracle: Option<&[ProbVector]>,
    phi_true: &ConfusionMatrix,
    phi_hat: &ConfusionMatrix,
    t: Temperature,
) -> Result<Theorem2Report> {
    let oracle = oracle.ok_or(Error::OracleRequired)?;
    if oracle.len() != data.len() {
        return Err(Error::LengthMismatch {
            left: data.len(),
            right: oracle.len(),
        });
    }
    if data.supervised_count() == 0 {
        return Err(Error::NoSupervisedRows);
    }
    let mut q_rows = Vec::new();
    let mut p_rows = Vec::new();
    let mut truth = Vec::new();
    let mut eta = 0.0;
    for (row, p) in data.rows().iter().zip(oracle) {
        let Some(y) = row.true_label else { continue };
        let q = temper(&row.model_probs, t);
        let h = row.human_label;
        eta += (phi_true.get(h, y) * p[y] - q[y] * phi_hat.get(h, y)).abs();
        q_rows.push(q);
        p_rows.push(p.clone());
        truth.push(y);
    }
    let eta_mean = eta / truth.len() as f64;
    let phi_l1 = phi_true.l1_distance(phi_hat);
    let mce = mce_l1(&q_rows, &truth, 1, Some(&p_rows))?;
    let bound = phi_l1 + mce;
    Ok(Theorem2Report {
        eta_mean,
        bound,
        phi_l1,
        mce_l1: mce,
        holds: eta_mean <= bound + 1e-9,
    })
}

/// `|a1 b1 - a2 b2| <= |a1 - a2| + |b1 - b2|` for arguments in `[0, 1]`.
pub fn lemma1_check(a1: f64, b1: f64, a2: f64, b2: f64) -> bool {
    (a1 * b1 - a2 * b2).abs() <= (a1 - a2).abs() + (b1 - b2).abs()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassShift {
    pub class: usize,
    /// Mean `m_y` over rows with `Y = y`.
    pub given_class: Option<f64>,
    /// Mean `m_y` over rows with `Y = y` and `H = y`.
    pub given_class_and_vote: Option<f64>,
    pub count: usize,
    pub count_with_vote: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DependenceReport {
    /// Plug-in `I(M; H | Y)` in nats, `M = argmax m`.
    pub cmi: f64,
    /// Plug-in `I(M; H)` in nats.
    pub mi: f64,
    pub per_class_shift: Vec<ClassShift>,
    pub n: usize,
}

fn plug_in_mi(joint: &[f64], k: usize, total: f64) -> f64 {
    if total <= 0.0 {
        return 0.0;
    }
    let mut row = vec![0.0; k];
    let mut col = vec![0.0; k];
    for a in 0..k {
        for b in 0..k {
            row[a] += joint[a * k + b];
            col[b] += joint[a * k + b];
        }
    }
    let mut mi = 0.0;
    for a in 0..k {
        for b in 0..k {
            let c = joint[a * k + b];
            if c > 0.0 {
                mi += c / total * (c * total / (row[a] * col[b])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Relative-frequency estimates of `I(M; H | Y)` and `I(M; H)`, plus the mean
/// model probability of the true class with and without agreement from the
/// labeler.
pub fn cmi_discrete(data: &CombinationDataset) -> Result<DependenceReport> {
    let n = data.supervised_count();
    if n == 0 {
        return Err(Error::NoSupervisedRows);
    }
    let k = data.k();
    let mut by_class = vec![vec![0.0; k * k]; k];
    let mut joint = vec![0.0; k * k];
    let mut sums = vec![(0.0, 0usize, 0.0, 0usize); k];
    for (h, m, y) in data.supervised() {
        let ml = m.argmax();
        by_class[y][ml * k + h] += 1.0;
        joint[ml * k + h] += 1.0;
        let s = &mut sums[y];
        s.0 += m[y];
        s.1 += 1;
        if h == y {
            s.2 += m[y];
            s.3 += 1;
        }
    }
    let total = n as f64;
    let cmi: f64 = by_class
        .iter()
        .map(|counts| {
            let ny: f64 = counts.iter().sum();
            ny / total * plug_in_mi(counts, k, ny)
        })
        .sum();
    let mean = |s: f64, c: usize| (c > 0).then(|| s / c as f64);
    let per_class_shift = sums
        .iter()
        .enumerate()
        .map(|(class, &(s, c, sv, cv))| ClassShift {
            class,
            given_class: mean(s, c),
            given_class_and_vote: mean(sv, cv),
            count: c,
            count_with_vote: cv,
        })
        .collect();
    Ok(DependenceReport {
        cmi: cmi.max(0.0),
        mi: plug_in_mi(&joint, k, total),
        per_class_shift,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Example;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v, v.len()).unwrap()
    }

    #[test]
    fn odds_values() {
        assert!(
            (confidence_ratio_model(&pv(&[0.5, 0.5]), Temperature::ONE, 0) - 1.0).abs() < 1e-12
        );
        assert!((confidence_ratio_model(&pv(&[0.8, 0.2]), Temperature::ONE, 0) - 4.0).abs() < 1e-9);
        assert_eq!(odds(1.0), ODDS_CAP);
        let phi = ConfusionMatrix::from_rows(&[vec![0.8, 0.5], vec![0.2, 0.5]]).unwrap();
        assert!((confidence_ratio_human(&phi, 0, 0) - 4.0).abs() < 1e-9);
        assert!((confidence_ratio_human(&phi, 1, 1) - 1.0).abs() < 1e-12);
        let id = ConfusionMatrix::identity(3);
        assert!(confidence_ratio_human(&id, 1, 1) > 1e11);
    }

    #[test]
    fn lemma_corners() {
        assert!(lemma1_check(1.0, 1.0, 0.0, 0.0));
        assert!(lemma1_check(0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn identity_phi_bound_is_one() {
        let rows = vec![
            Example::new(0, pv(&[0.3, 0.7]), Some(0)),
            Example::new(1, pv(&[0.6, 0.4]), Some(1)),
        ];
        let data = CombinationDataset::new(2, rows).unwrap();
        let r = theorem1_report(&data, &ConfusionMatrix::identity(2), Temperature::ONE).unwrap();
        assert_eq!(r.empirical_accuracy, 1.0);
        assert_eq!(r.bound_weak, 1.0);
        assert!(r.binary_gap.is_some());
    }

    #[test]
    fn error_bound_needs_oracle() {
        let data =
            CombinationDataset::new(2, vec![Example::new(0, pv(&[0.3, 0.7]), Some(0))]).unwrap();
        let phi = ConfusionMatrix::uniform(2);
        assert!(matches!(
            theorem2_report(&data, None, &phi, &phi, Temperature::ONE).unwrap_err(),
            Error::OracleRequired
        ));
    }

    #[test]
    fn cmi_of_copied_labels_is_conditional_entropy() {
        // H = M always: I(M; H | Y) = H(M | Y).
        let mut rows = Vec::new();
        for i in 0..40 {
            let y = i % 2;
            let m = if i % 3 == 0 {
                pv(&[0.9, 0.1])
            } else {
                pv(&[0.2, 0.8])
            };
            rows.push(Example::new(m.argmax(), m, Some(y)));
        }
        let data = CombinationDataset::new(2, rows).unwrap();
        let r = cmi_discrete(&data).unwrap();
        let mut h = 0.0;
        for y in 0..2 {
            let sel: Vec<_> = data.supervised().filter(|&(_, _, t)| t == y).collect();
            let ny = sel.len() as f64;
            let a = sel.iter().filter(|(_, m, _)| m.argmax() == 0).count() as f64 / ny;
            for p in [a, 1.0 - a] {
                if p > 0.0 {
                    h -= ny / 40.0 * p * p.ln();
                }
            }
        }
        assert!((r.cmi - h).abs() < 1e-12);
    }
}
