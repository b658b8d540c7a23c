//! Confusion-matrix estimation for the categorical labeler.
//!
//! Entry `(i, j)` is `p(h = i | y = j)`, so every column is a distribution.
//! The Bayesian estimates use an independent Dirichlet prior per column with
//! `gamma` on the diagonal and `beta` elsewhere.

use serde::{Deserialize, Serialize};

use crate::domain::{CombinationDataset, LabelSpace};
use crate::error::{Error, Result};
use crate::numeric::floor_normalize;

/// Pseudo-observations per column used when the caller does not choose one.
pub const DEFAULT_PRIOR_STRENGTH: f64 = 10.0;

/// Column-stochastic `K x K` matrix, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    k: usize,
    entries: Vec<f64>,
}

impl ConfusionMatrix {
    /// Build from row-major nested rows. Columns must sum to one within
    /// `1e-6`; the result is floored and renormalized per column.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.len();
        LabelSpace::new(k)?;
        let mut entries = Vec::with_capacity(k * k);
        for row in rows {
            if row.len() != k {
                return Err(Error::WrongLength {
                    expected: k,
                    got: row.len(),
                });
            }
            entries.extend_from_slice(row);
        }
        for (index, &value) in entries.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "confusion entry {index} is {value}"
                )));
            }
            if value < -crate::domain::NEGATIVE_TOLERANCE {
                return Err(Error::NegativeEntry { index, value });
            }
        }
        for j in 0..k {
            let sum: f64 = (0..k).map(|i| entries[i * k + j].max(0.0)).sum();
            if (sum - 1.0).abs() > crate::domain::SUM_TOLERANCE {
                return Err(Error::BadSum { sum });
            }
        }
        Ok(Self::from_column_weights(k, entries))
    }

    /// Normalize each column of nonnegative weights (row-major layout). A
    /// column with no mass becomes uniform.
    pub(crate) fn from_column_weights(k: usize, mut entries: Vec<f64>) -> Self {
        let mut column = vec![0.0; k];
        for j in 0..k {
            for i in 0..k {
                column[i] = entries[i * k + j].max(0.0);
            }
            if column.iter().sum::<f64>() < 1e-300 {
                column.fill(1.0);
            }
            floor_normalize(&mut column);
            for i in 0..k {
                entries[i * k + j] = column[i];
            }
        }
        Self { k, entries }
    }

    pub fn identity(k: usize) -> Self {
        let mut w = vec![0.0; k * k];
        for i in 0..k {
            w[i * k + i] = 1.0;
        }
        Self::from_column_weights(k, w)
    }

    pub fn uniform(k: usize) -> Self {
        Self::from_column_weights(k, vec![1.0; k * k])
    }

    /// `diag` on the diagonal, `(1 - diag) / (K - 1)` elsewhere.
    pub fn symmetric(k: usize, diag: f64) -> Self {
        let off = (1.0 - diag) / (k - 1) as f64;
        let mut w = vec![off; k * k];
        for i in 0..k {
            w[i * k + i] = diag;
        }
        Self::from_column_weights(k, w)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// `p(h = i | y = j)`
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.k + j]
    }

    /// Row `h`: `p(h | y = j)` for every `j`.
    pub fn row(&self, h: usize) -> &[f64] {
        &self.entries[h * self.k..(h + 1) * self.k]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.k).map(|i| self.get(i, j)).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.k).map(|i| self.get(i, i)).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.k).map(<[f64]>::to_vec).collect()
    }

    /// Entrywise `l1` distance.
    pub fn l1_distance(&self, other: &Self) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    /// Entrywise `l-infinity` distance.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Serialize for ConfusionMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ConfusionMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        ConfusionMatrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Symmetric Dirichlet prior over confusion columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirichletPrior {
    pub k: usize,
    /// Diagonal concentration.
    pub gamma: f64,
    /// Off-diagonal concentration.
    pub beta: f64,
}

impl DirichletPrior {
    pub fn new(k: usize, gamma: f64, beta: f64) -> Result<Self> {
        LabelSpace::new(k)?;
        if !(gamma > 1.0 && gamma.is_finite()) || !(beta >= 1.0 && beta.is_finite()) {
            return Err(Error::ConfigInvalid(format!(
                "Dirichlet prior needs gamma > 1 and beta >= 1, got gamma={gamma}, beta={beta}"
            )));
        }
        Ok(Self { k, gamma, beta })
    }

    #[inline]
    pub fn alpha(&self, i: usize, j: usize) -> f64 {
        if i == j {
            self.gamma
        } else {
            self.beta
        }
    }

    /// Pseudo-count total minus `K`; the denominator of the column mode.
    pub fn mode_denominator(&self) -> f64 {
        self.gamma + (self.k - 1) as f64 * self.beta - self.k as f64
    }

    pub fn mode(&self) -> ConfusionMatrix {
        let k = self.k;
        map_from_counts(&vec![0.0; k * k], self, f64::MIN_POSITIVE)
            .expect("gamma > 1 keeps the mode denominator positive")
    }

    /// Unnormalized log-density of `phi` (constants dropped).
    pub fn log_density(&self, phi: &ConfusionMatrix) -> f64 {
        let k = self.k;
        let mut total = 0.0;
        for i in 0..k {
            for j in 0..k {
                total += (self.alpha(i, j) - 1.0) * phi.get(i, j).ln();
            }
        }
        total
    }
}

/// Prior whose per-column mode has diagonal exactly `accuracy`.
///
/// `strength` is the number of pseudo-observations per column: `gamma - 1 =
/// accuracy * strength`, `(K - 1)(beta - 1) = (1 - accuracy) * strength`.
pub fn prior_from_accuracy(accuracy: f64, k: usize, strength: f64) -> Result<DirichletPrior> {
    LabelSpace::new(k)?;
    let lower = 1.0 / k as f64;
    if !(accuracy > lower && accuracy < 1.0) {
        return Err(Error::AccuracyOutOfRange { accuracy, lower });
    }
    if !(strength > 0.0 && strength.is_finite()) {
        return Err(Error::ConfigInvalid(format!(
            "prior strength must be positive, got {strength}"
        )));
    }
    let gamma = 1.0 + accuracy * strength;
    let beta = 1.0 + (1.0 - accuracy) * strength / (k - 1) as f64;
    DirichletPrior::new(k, gamma, beta)
}

/// Row-major `counts[h * K + y]` over supervised rows.
pub fn label_counts(data: &CombinationDataset) -> Vec<f64> {
    let k = data.k();
    let mut counts = vec![0.0; k * k];
    for (h, _, y) in data.supervised() {
        counts[h * k + y] += 1.0;
    }
    counts
}

/// Column-normalized counts; empty columns become uniform.
pub(crate) fn mle_from_counts(k: usize, counts: &[f64]) -> ConfusionMatrix {
    ConfusionMatrix::from_column_weights(k, counts.to_vec())
}

/// Per-column posterior mode `(alpha + c - 1) / (sum_i (alpha + c) - K)`.
///
/// Denominators at or below `min_denominator` are an error when
/// `min_denominator` is zero, and are floored at that value otherwise.
pub(crate) fn map_from_counts(
    counts: &[f64],
    prior: &DirichletPrior,
    min_denominator: f64,
) -> Result<ConfusionMatrix> {
    let k = prior.k;
    let mut w = vec![0.0; k * k];
    for j in 0..k {
        let col_count: f64 = (0..k).map(|i| counts[i * k + j]).sum();
        let mut denom = prior.mode_denominator() + col_count;
        if denom <= 0.0 {
            if min_denominator <= 0.0 {
                return Err(Error::DegenerateMode { column: j });
            }
            denom = min_denominator;
        }
        for i in 0..k {
            w[i * k + j] = ((prior.alpha(i, j) - 1.0 + counts[i * k + j]) / denom).max(0.0);
        }
    }
    Ok(ConfusionMatrix::from_column_weights(k, w))
}

pub fn estimate_mle(data: &CombinationDataset) -> Result<ConfusionMatrix> {
    if data.supervised_count() == 0 {
        return Err(Error::NoSupervisedRows);
    }
    Ok(mle_from_counts(data.k(), &label_counts(data)))
}

pub fn estimate_map(data: &CombinationDataset, prior: &DirichletPrior) -> Result<ConfusionMatrix> {
    check_prior_k(data, prior)?;
    map_from_counts(&label_counts(data), prior, 0.0)
}

/// Posterior mean `alpha' / sum_i alpha'` per column.
pub fn estimate_posterior_mean(
    data: &CombinationDataset,
    prior: &DirichletPrior,
) -> Result<ConfusionMatrix> {
    check_prior_k(data, prior)?;
    let k = data.k();
    let mut w = label_counts(data);
    for i in 0..k {
        for j in 0..k {
            w[i * k + j] += prior.alpha(i, j);
        }
    }
    Ok(ConfusionMatrix::from_column_weights(k, w))
}

fn check_prior_k(data: &CombinationDataset, prior: &DirichletPrior) -> Result<()> {
    if prior.k != data.k() {
        return Err(Error::ConfigInvalid(format!(
            "prior has K={}, data has K={}",
            prior.k,
            data.k()
        )));
    }
    Ok(())
}

/// `phi[h][y]`: the labeler's probability of voting `h` when the truth is `y`.
pub fn human_confidence(phi: &ConfusionMatrix, h: usize, y: usize) -> f64 {
    phi.get(h, y)
}
