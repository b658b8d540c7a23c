//! Temperature scaling: `m -> m^(1/T) / sum_k m_k^(1/T)`.
//!
//! Fits work on `tau = ln T` over the clamped domain `[ln 1e-3, ln 1e3]`.
//! The Bayesian variant places `tau ~ N(mu, sigma^2)`; its full posterior is
//! represented on a deterministic quadrature grid.

use serde::{Deserialize, Serialize};

use crate::domain::{CombinationDataset, ProbVector};
use crate::error::{Error, Result};
use crate::numeric::{floored_ln, map_sum, softmax_in_place, EPS};
use crate::optimize::ScalarSearch;

pub const MIN_TEMPERATURE: f64 = 1e-3;
pub const MAX_TEMPERATURE: f64 = 1e3;
pub const DEFAULT_SEARCH_TOL: f64 = 1e-6;
pub const DEFAULT_POSTERIOR_NODES: usize = 513;

pub fn min_log_temperature() -> f64 {
    MIN_TEMPERATURE.ln()
}

pub fn max_log_temperature() -> f64 {
    MAX_TEMPERATURE.ln()
}

/// A temperature clamped to `[1e-3, 1e3]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
#[serde(transparent)]
pub struct Temperature(f64);

impl Temperature {
    pub const ONE: Temperature = Temperature(1.0);

    pub fn new(t: f64) -> Result<Self> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::ConfigInvalid(format!(
                "temperature must be positive and finite, got {t}"
            )));
        }
        Ok(Self(t.clamp(MIN_TEMPERATURE, MAX_TEMPERATURE)))
    }

    /// From `tau = ln T`.
    pub fn from_log(tau: f64) -> Self {
        Self(tau.exp().clamp(MIN_TEMPERATURE, MAX_TEMPERATURE))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn log(self) -> f64 {
        self.0.ln()
    }
}

impl<'de> Deserialize<'de> for Temperature {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Temperature::new(f64::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// Gaussian prior on the log-temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogTempPrior {
    pub mu: f64,
    pub sigma: f64,
}

impl Default for LogTempPrior {
    fn default() -> Self {
        Self {
            mu: 0.5,
            sigma: 0.5,
        }
    }
}

impl LogTempPrior {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() || !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::ConfigInvalid(format!(
                "need finite mu and sigma > 0, got mu={mu}, sigma={sigma}"
            )));
        }
        Ok(Self { mu, sigma })
    }

    /// `(tau - mu)^2 / (2 sigma^2)`
    pub fn penalty(&self, tau: f64) -> f64 {
        let z = (tau - self.mu) / self.sigma;
        0.5 * z * z
    }
}

/// Normalized posterior masses over an increasing grid of `tau` values.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TemperaturePosterior {
    grid: Vec<f64>,
    weights: Vec<f64>,
}

impl TemperaturePosterior {
    pub fn new(grid: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if grid.is_empty() || grid.len() != weights.len() {
            return Err(Error::LengthMismatch {
                left: grid.len(),
                right: weights.len(),
            });
        }
        if grid.windows(2).any(|w| !(w[1] > w[0])) || grid.iter().any(|t| !t.is_finite()) {
            return Err(Error::ConfigInvalid(
                "temperature grid must be finite and strictly increasing".into(),
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::ConfigInvalid(
                "posterior weights must be nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::ConfigInvalid(
                "posterior weights have zero mass".into(),
            ));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { grid, weights })
    }

    pub fn point_mass(tau: f64) -> Self {
        Self {
            grid: vec![tau],
            weights: vec![1.0],
        }
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Posterior mean of `T = e^tau`.
    pub fn mean_temperature(&self) -> f64 {
        self.grid
            .iter()
            .zip(&self.weights)
            .map(|(t, w)| w * t.exp())
            .sum()
    }
}

/// `ln m` for every row, precomputed once per fit.
pub(crate) struct LogProbTable {
    k: usize,
    logm: Vec<f64>,
    row_max: Vec<f64>,
}

impl LogProbTable {
    pub(crate) fn new<'a>(k: usize, rows: impl Iterator<Item = &'a ProbVector>) -> Self {
        let mut logm = Vec::new();
        let mut row_max = Vec::new();
        for m in rows {
            let start = logm.len();
            logm.extend(m.as_slice().iter().map(|&p| floored_ln(p)));
            row_max.push(
                logm[start..]
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max),
            );
        }
        Self { k, logm, row_max }
    }

    pub(crate) fn row(&self, i: usize) -> &[f64] {
        &self.logm[i * self.k..(i + 1) * self.k]
    }

    /// Log normalizer of `ln m / t` for row `i`.
    #[inline]
    pub(crate) fn log_norm(&self, i: usize, inv_t: f64) -> f64 {
        let max = self.row_max[i];
        let s: f64 = self.row(i).iter().map(|&l| ((l - max) * inv_t).exp()).sum();
        max * inv_t + s.ln()
    }

    /// `ln temper(m_i, t)[j]`
    #[inline]
    pub(crate) fn tempered_log(&self, i: usize, j: usize, inv_t: f64) -> f64 {
        self.row(i)[j] * inv_t - self.log_norm(i, inv_t)
    }
}

/// Raise each entry to `1/t` and renormalize, computed in log space.
pub fn temper(m: &ProbVector, t: Temperature) -> ProbVector {
    let inv_t = 1.0 / t.value();
    let mut z: Vec<f64> = m.as_slice().iter().map(|&p| p.ln() * inv_t).collect();
    softmax_in_place(&mut z);
    ProbVector::from_normalized(z)
}

struct LabeledRows {
    table: LogProbTable,
    labels: Vec<usize>,
}

impl LabeledRows {
    fn new(data: &CombinationDataset) -> Self {
        let (probs, labels): (Vec<&ProbVector>, Vec<usize>) =
            data.supervised().map(|(_, m, y)| (m, y)).unzip();
        Self {
            table: LogProbTable::new(data.k(), probs.into_iter()),
            labels,
        }
    }

    fn n(&self) -> usize {
        self.labels.len()
    }

    /// Sum of floored negative log-likelihoods at `tau`.
    fn nll_sum(&self, tau: f64) -> f64 {
        let inv_t = (-tau).exp();
        let floor = EPS.ln();
        map_sum(self.n(), |i| {
            -self.table.tempered_log(i, self.labels[i], inv_t).max(floor)
        })
    }
}

/// Mean negative log-likelihood of the true labels under `temper(m, e^tau)`.
pub fn nll_of_temperature(data: &CombinationDataset, tau: f64) -> Result<f64> {
    if data.supervised_count() == 0 {
        return Err(Error::NoSupervisedRows);
    }
    let rows = LabeledRows::new(data);
    Ok(rows.nll_sum(tau) / rows.n() as f64)
}

fn log_domain_search(tol: f64, prefer: f64) -> ScalarSearch {
    ScalarSearch::new(min_log_temperature(), max_log_temperature(), tol, prefer)
}

/// Maximum-likelihood temperature on the supervised rows.
pub fn fit_temperature_ml(data: &CombinationDataset, tol: f64) -> Result<Temperature> {
    if data.supervised_count() == 0 {
        return Err(Error::NoSupervisedRows);
    }
    let rows = LabeledRows::new(data);
    let tau = log_domain_search(tol, 0.0).minimize(|tau| rows.nll_sum(tau));
    Ok(Temperature::from_log(tau))
}

/// MAP temperature under a Gaussian prior on `ln T`. With no labeled rows
/// this is the prior mode `e^mu`.
pub fn fit_temperature_map(
    data: &CombinationDataset,
    prior: &LogTempPrior,
    tol: f64,
) -> Result<Temperature> {
    if data.supervised_count() == 0 {
        return Ok(Temperature::from_log(prior.mu));
    }
    let rows = LabeledRows::new(data);
    let tau =
        log_domain_search(tol, prior.mu).minimize(|tau| rows.nll_sum(tau) + prior.penalty(tau));
    Ok(Temperature::from_log(tau))
}

/// Posterior over `tau` evaluated on a uniform grid of `nodes` points
/// spanning `[min(mu - 4 sigma, tau_map - 2), max(mu + 4 sigma, tau_map + 2)]`.
pub fn posterior_temperature(
    data: &CombinationDataset,
    prior: &LogTempPrior,
    nodes: usize,
) -> Result<TemperaturePosterior> {
    if data.supervised_count() == 0 {
        return Err(Error::NoSupervisedRows);
    }
    if nodes < 33 || nodes.is_multiple_of(2) {
        return Err(Error::ConfigInvalid(format!(
            "posterior nodes must be odd and >= 33, got {nodes}"
        )));
    }
    let tau_map = fit_temperature_map(data, prior, DEFAULT_SEARCH_TOL)?.log();
    let lo = (prior.mu - 4.0 * prior.sigma)
        .min(tau_map - 2.0)
        .max(min_log_temperature());
    let hi = (prior.mu + 4.0 * prior.sigma)
        .max(tau_map + 2.0)
        .min(max_log_temperature());
    let step = (hi - lo) / (nodes - 1) as f64;
    let grid: Vec<f64> = (0..nodes).map(|g| lo + step * g as f64).collect();

    let rows = LabeledRows::new(data);
    let mut log_post: Vec<f64> = grid
        .iter()
        .map(|&tau| -rows.nll_sum(tau) - prior.penalty(tau))
        .collect();
    softmax_in_place(&mut log_post);
    TemperaturePosterior::new(grid, log_post)
}

/// Posterior-averaged tempered probabilities, renormalized.
pub fn bayes_calibrated_probs(m: &ProbVector, post: &TemperaturePosterior) -> ProbVector {
    let mut acc = vec![0.0; m.len()];
    for (&tau, &w) in post.grid().iter().zip(post.weights()) {
        if w == 0.0 {
            continue;
        }
        let q = temper(m, Temperature::from_log(tau));
        for (a, &p) in acc.iter_mut().zip(q.as_slice()) {
            *a += w * p;
        }
    }
    ProbVector::from_weights(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Example;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v, v.len()).unwrap()
    }

    fn one_row(m: &[f64], y: usize) -> CombinationDataset {
        CombinationDataset::new(m.len(), vec![Example::new(0, pv(m), Some(y))]).unwrap()
    }

    #[test]
    fn temper_identity_and_hand_values() {
        let m = pv(&[0.7, 0.2, 0.1]);
        let same = temper(&m, Temperature::ONE);
        for (a, b) in same.as_slice().iter().zip(m.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
        let m = pv(&[0.8, 0.2]);
        let hot = temper(&m, Temperature::new(0.5).unwrap());
        assert!((hot[0] - 0.64 / 0.68).abs() < 1e-12);
        let cold = temper(&m, Temperature::new(1e3).unwrap());
        assert!((cold[0] - 0.5).abs() < 2e-3);
    }

    #[test]
    fn temperature_is_clamped() {
        assert_eq!(Temperature::new(1e9).unwrap().value(), MAX_TEMPERATURE);
        assert_eq!(Temperature::new(1e-9).unwrap().value(), MIN_TEMPERATURE);
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(f64::NAN).is_err());
    }

    #[test]
    fn nll_hand_values() {
        let perfect = nll_of_temperature(&one_row(&[1.0, 0.0], 0), 0.0).unwrap();
        assert!((0.0..1e-11).contains(&perfect));
        let flat = nll_of_temperature(&one_row(&[0.5, 0.5], 1), 0.77).unwrap();
        assert!((flat - std::f64::consts::LN_2).abs() < 1e-12);
        let v = nll_of_temperature(&one_row(&[0.8, 0.2], 0), 2f64.ln()).unwrap();
        let expected = -(0.8f64.sqrt() / (0.8f64.sqrt() + 0.2f64.sqrt())).ln();
        assert!((v - expected).abs() < 1e-12);
        // sqrt(0.8) / (sqrt(0.8) + sqrt(0.2)) = 2/3
        assert!((v - 1.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_requires_labels() {
        let data =
            CombinationDataset::new(2, vec![Example::new(0, pv(&[0.5, 0.5]), None)]).unwrap();
        assert!(matches!(
            nll_of_temperature(&data, 0.0).unwrap_err(),
            Error::NoSupervisedRows
        ));
        assert!(fit_temperature_ml(&data, 1e-6).is_err());
    }

    #[test]
    fn flat_objective_tie_rules() {
        let data = one_row(&[0.5, 0.5], 0);
        assert_eq!(fit_temperature_ml(&data, 1e-6).unwrap().value(), 1.0);
        let prior = LogTempPrior::default();
        let t = fit_temperature_map(&data, &prior, 1e-6).unwrap();
        assert!((t.log() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn map_without_labels_is_prior_mode() {
        let data = CombinationDataset::new(2, vec![]).unwrap();
        let t = fit_temperature_map(&data, &LogTempPrior::default(), 1e-6).unwrap();
        assert!((t.value() - 0.5f64.exp()).abs() < 1e-12);
        assert!((t.value() - 1.6487).abs() < 1e-4);
    }

    #[test]
    fn bayes_probs_hand_values() {
        let m = pv(&[0.8, 0.2]);
        let at_zero = bayes_calibrated_probs(&m, &TemperaturePosterior::point_mass(0.0));
        assert!((at_zero[0] - 0.8).abs() < 1e-15);
        let at_ln2 = bayes_calibrated_probs(&m, &TemperaturePosterior::point_mass(2f64.ln()));
        assert!((at_ln2[0] - 2.0 / 3.0).abs() < 1e-12);
        let mix = TemperaturePosterior::new(vec![0.0, 2f64.ln()], vec![0.5, 0.5]).unwrap();
        let q = bayes_calibrated_probs(&m, &mix);
        assert!((q[0] - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((q[0] - 0.7333).abs() < 1e-4);
    }

    #[test]
    fn posterior_validation() {
        let data = one_row(&[0.5, 0.5], 0);
        let prior = LogTempPrior::default();
        assert!(posterior_temperature(&data, &prior, 32).is_err());
        assert!(posterior_temperature(&data, &prior, 34).is_err());
        let post = posterior_temperature(&data, &prior, 33).unwrap();
        assert!((post.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(TemperaturePosterior::new(vec![1.0, 0.0], vec![0.5, 0.5]).is_err());
    }
}
