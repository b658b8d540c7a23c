//! Expectation-maximization for `(phi, T)` with the true labels latent.
//!
//! The observed-data likelihood of a row is
//! `sum_y temper(m, T)[y] * phi[h][y]`. The E-step is the product-rule
//! posterior; the M-step splits into a closed-form update of each confusion
//! column and a one-dimensional search over `ln T`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    max_log_temperature, min_log_temperature, LogProbTable, LogTempPrior, Temperature,
    DEFAULT_SEARCH_TOL,
};
use crate::combiner::{Combiner, CombinerParams};
use crate::confusion::{map_from_counts, mle_from_counts, ConfusionMatrix, DirichletPrior};
use crate::domain::CombinationDataset;
use crate::error::{Error, Result};
use crate::numeric::{log_sum_exp, map_sum, softmax_in_place};
use crate::optimize::ScalarSearch;

/// Below this a responsibility column is treated as empty.
const EMPTY_COLUMN: f64 = 1e-9;
/// Floor on the MAP column denominator.
const MIN_MAP_DENOMINATOR: f64 = 1e-9;
const DEFAULT_ML_DIAGONAL: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmVariant {
    Ml,
    Map,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub variant: EmVariant,
    pub confusion_prior: Option<DirichletPrior>,
    pub temp_prior: Option<LogTempPrior>,
    pub max_iters: usize,
    /// Relative change of the objective that counts as converged.
    pub loglik_tol: f64,
    /// Defaults to `e^mu` (MAP) or 1 (ML).
    pub init_temperature: Option<f64>,
    pub search_tol: f64,
}

impl EmConfig {
    pub fn ml() -> Self {
        Self {
            variant: EmVariant::Ml,
            confusion_prior: None,
            temp_prior: None,
            max_iters: 500,
            loglik_tol: 1e-6,
            init_temperature: None,
            search_tol: DEFAULT_SEARCH_TOL,
        }
    }

    pub fn map(confusion_prior: DirichletPrior, temp_prior: LogTempPrior) -> Self {
        Self {
            variant: EmVariant::Map,
            confusion_prior: Some(confusion_prior),
            temp_prior: Some(temp_prior),
            ..Self::ml()
        }
    }

    fn validate(&self, k: usize) -> Result<()> {
        if self.variant == EmVariant::Map
            && (self.confusion_prior.is_none() || self.temp_prior.is_none())
        {
            return Err(Error::ConfigInvalid(
                "MAP EM needs both a confusion prior and a temperature prior".into(),
            ));
        }
        if let Some(p) = &self.confusion_prior {
            if p.k != k {
                return Err(Error::ConfigInvalid(format!(
                    "prior has K={}, data has K={k}",
                    p.k
                )));
            }
        }
        if !(self.loglik_tol >= 0.0) {
            return Err(Error::ConfigInvalid(format!(
                "loglik_tol must be >= 0, got {}",
                self.loglik_tol
            )));
        }
        if let Some(t) = self.init_temperature {
            Temperature::new(t)?;
        }
        Ok(())
    }

    fn initial_temperature(&self) -> Temperature {
        match (self.init_temperature, self.variant, &self.temp_prior) {
            (Some(t), _, _) => Temperature::new(t).unwrap_or(Temperature::ONE),
            (None, EmVariant::Map, Some(p)) => Temperature::from_log(p.mu),
            _ => Temperature::ONE,
        }
    }

    fn initial_confusion(&self, k: usize) -> ConfusionMatrix {
        match (&self.variant, &self.confusion_prior) {
            (EmVariant::Map, Some(p)) => p.mode(),
            _ => ConfusionMatrix::symmetric(k, DEFAULT_ML_DIAGONAL),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    pub iterations: usize,
    /// Objective at the initial point followed by one value per iteration.
    #[serde(rename = "loglik")]
    pub loglik_history: Vec<f64>,
    pub converged: bool,
}

/// Posterior over latent labels, `n x K` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    k: usize,
    values: Vec<f64>,
}

impl Responsibilities {
    pub fn new(k: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * k);
        for row in rows {
            if row.len() != k {
                return Err(Error::WrongLength {
                    expected: k,
                    got: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Ok(Self { k, values })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }
}

/// The rows as EM sees them: labeler votes and `ln m`. Truth is dropped.
struct EmRows {
    k: usize,
    human: Vec<usize>,
    table: LogProbTable,
}

impl EmRows {
    fn new(data: &CombinationDataset) -> Self {
        Self {
            k: data.k(),
            human: data.rows().iter().map(|r| r.human_label).collect(),
            table: LogProbTable::new(data.k(), data.rows().iter().map(|r| &r.model_probs)),
        }
    }

    fn n(&self) -> usize {
        self.human.len()
    }

    /// Unnormalized log posterior of row `i`, shifted by the tempering
    /// normalizer so that its log-sum-exp is the row log-likelihood.
    fn joint_log(&self, i: usize, phi: &ConfusionMatrix, inv_t: f64, out: &mut [f64]) {
        let norm = self.table.log_norm(i, inv_t);
        let frow = phi.row(self.human[i]);
        for ((o, &l), &f) in out.iter_mut().zip(self.table.row(i)).zip(frow) {
            *o = f.ln() + l * inv_t - norm;
        }
    }

    fn loglik(&self, phi: &ConfusionMatrix, t: Temperature) -> f64 {
        let inv_t = 1.0 / t.value();
        map_sum(self.n(), |i| {
            let mut z = vec![0.0; self.k];
            self.joint_log(i, phi, inv_t, &mut z);
            log_sum_exp(&z)
        })
    }

    fn e_step(&self, phi: &ConfusionMatrix, t: Temperature) -> Responsibilities {
        let inv_t = 1.0 / t.value();
        let k = self.k;
        let row = |i: usize| {
            let mut z = vec![0.0; k];
            self.joint_log(i, phi, inv_t, &mut z);
            softmax_in_place(&mut z);
            z
        };
        let rows: Vec<Vec<f64>> = if self.n() >= 4096 {
            (0..self.n()).into_par_iter().map(row).collect()
        } else {
            (0..self.n()).map(row).collect()
        };
        Responsibilities {
            k,
            values: rows.concat(),
        }
    }

    /// `counts[i * K + j] = sum over rows voted i of resp[., j]`.
    fn soft_counts(&self, resp: &Responsibilities) -> Vec<f64> {
        let k = self.k;
        let mut counts = vec![0.0; k * k];
        for (r, &h) in self.human.iter().enumerate() {
            for (c, &p) in counts[h * k..(h + 1) * k].iter_mut().zip(resp.row(r)) {
                *c += p;
            }
        }
        counts
    }

    /// Expected complete-data log-likelihood in `tau`, as a minimization
    /// objective (sign flipped).
    fn temperature_objective<'a>(&'a self, resp: &Responsibilities) -> impl Fn(f64) -> f64 + 'a {
        let weighted: Vec<f64> = (0..self.n())
            .map(|i| {
                resp.row(i)
                    .iter()
                    .zip(self.table.row(i))
                    .map(|(r, l)| r * l)
                    .sum()
            })
            .collect();
        let mass: Vec<f64> = (0..self.n()).map(|i| resp.row(i).iter().sum()).collect();
        move |tau: f64| {
            let inv_t = (-tau).exp();
            -map_sum(self.n(), |i| {
                weighted[i] * inv_t - mass[i] * self.table.log_norm(i, inv_t)
            })
        }
    }
}

fn check_resp(data: &CombinationDataset, resp: &Responsibilities) -> Result<()> {
    if resp.k != data.k() {
        return Err(Error::WrongLength {
            expected: data.k(),
            got: resp.k,
        });
    }
    if resp.len() != data.len() {
        return Err(Error::LengthMismatch {
            left: data.len(),
            right: resp.len(),
        });
    }
    Ok(())
}

/// Row `i` is `combine_pl(h_i, m_i, phi, t)`.
pub fn e_step(
    data: &CombinationDataset,
    phi: &ConfusionMatrix,
    t: Temperature,
) -> Result<Responsibilities> {
    if phi.k() != data.k() {
        return Err(Error::WrongLength {
            expected: data.k(),
            got: phi.k(),
        });
    }
    Ok(EmRows::new(data).e_step(phi, t))
}

fn confusion_update(
    rows: &EmRows,
    resp: &Responsibilities,
    variant: EmVariant,
    prior: Option<&DirichletPrior>,
) -> Result<ConfusionMatrix> {
    let k = rows.k;
    let mut counts = rows.soft_counts(resp);
    match variant {
        EmVariant::Ml => {
            for j in 0..k {
                let total: f64 = (0..k).map(|i| counts[i * k + j]).sum();
                if total < EMPTY_COLUMN {
                    for i in 0..k {
                        counts[i * k + j] = 0.0;
                    }
                }
            }
            Ok(mle_from_counts(k, &counts))
        }
        EmVariant::Map => {
            let prior = prior
                .ok_or_else(|| Error::ConfigInvalid("MAP update needs a confusion prior".into()))?;
            map_from_counts(&counts, prior, MIN_MAP_DENOMINATOR)
        }
    }
}

/// Closed-form confusion update from soft counts.
pub fn m_step_confusion(
    data: &CombinationDataset,
    resp: &Responsibilities,
    variant: EmVariant,
    prior: Option<&DirichletPrior>,
) -> Result<ConfusionMatrix> {
    check_resp(data, resp)?;
    confusion_update(&EmRows::new(data), resp, variant, prior)
}

fn temperature_search(
    variant: EmVariant,
    prior: Option<&LogTempPrior>,
    tol: f64,
) -> Result<ScalarSearch> {
    let prefer = match variant {
        EmVariant::Ml => 0.0,
        EmVariant::Map => {
            prior
                .ok_or_else(|| Error::ConfigInvalid("MAP update needs a temperature prior".into()))?
                .mu
        }
    };
    Ok(ScalarSearch::new(
        min_log_temperature(),
        max_log_temperature(),
        tol,
        prefer,
    ))
}

/// Maximizes `sum_i sum_j resp[i][j] ln temper(m_i, e^tau)[j]`, plus the log
/// prior on `tau` for MAP.
pub fn m_step_temperature(
    data: &CombinationDataset,
    resp: &Responsibilities,
    variant: EmVariant,
    prior: Option<&LogTempPrior>,
    tol: f64,
) -> Result<Temperature> {
    check_resp(data, resp)?;
    let rows = EmRows::new(data);
    let search = temperature_search(variant, prior, tol)?;
    let q = rows.temperature_objective(resp);
    let tau = match (variant, prior) {
        (EmVariant::Map, Some(p)) => search.minimize(|tau| q(tau) + p.penalty(tau)),
        _ => search.minimize(q),
    };
    Ok(Temperature::from_log(tau))
}

/// Observed-data objective: `sum_i ln sum_y temper(m_i, T)[y] phi[h_i][y]`,
/// plus both log priors (up to constants) for MAP.
pub fn em_objective(
    data: &CombinationDataset,
    phi: &ConfusionMatrix,
    t: Temperature,
    config: &EmConfig,
) -> Result<f64> {
    config.validate(data.k())?;
    Ok(objective(&EmRows::new(data), phi, t, config))
}

fn objective(rows: &EmRows, phi: &ConfusionMatrix, t: Temperature, config: &EmConfig) -> f64 {
    let mut value = rows.loglik(phi, t);
    if config.variant == EmVariant::Map {
        if let Some(p) = &config.confusion_prior {
            value += p.log_density(phi);
        }
        if let Some(p) = &config.temp_prior {
            value -= p.penalty(t.log());
        }
    }
    value
}

/// Fits a `PL_EM` combiner without reading any true label.
pub fn run_em(data: &CombinationDataset, config: &EmConfig) -> Result<(CombinerParams, EmTrace)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = data.k();
    config.validate(k)?;
    let rows = EmRows::new(data);
    let search = temperature_search(
        config.variant,
        config.temp_prior.as_ref(),
        config.search_tol,
    )?;
    let penalty = |tau: f64| match (config.variant, &config.temp_prior) {
        (EmVariant::Map, Some(p)) => p.penalty(tau),
        _ => 0.0,
    };

    let mut phi = config.initial_confusion(k);
    let mut t = config.initial_temperature();
    let mut prev = objective(&rows, &phi, t, config);
    let mut history = vec![prev];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < config.max_iters {
        iterations += 1;
        let resp = rows.e_step(&phi, t);
        phi = confusion_update(
            &rows,
            &resp,
            config.variant,
            config.confusion_prior.as_ref(),
        )?;

        let q = rows.temperature_objective(&resp);
        let tau = search.minimize(|tau| q(tau) + penalty(tau));
        // Keep the old temperature unless the search actually improved Q.
        if q(tau) + penalty(tau) <= q(t.log()) + penalty(t.log()) {
            t = Temperature::from_log(tau);
        }

        let value = objective(&rows, &phi, t, config);
        history.push(value);
        if !value.is_finite() {
            return Err(Error::NonFinite("EM objective".into()));
        }
        let change = (value - prev).abs();
        prev = value;
        if change < config.loglik_tol * prev.abs().max(1.0) {
            converged = true;
            break;
        }
    }

    let params = CombinerParams::new(
        k,
        Combiner::PlEm {
            phi,
            temperature: t,
        },
    )?;
    Ok((
        params,
        EmTrace {
            iterations,
            loglik_history: history,
            converged,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combiner::combine_pl;
    use crate::domain::{Example, ProbVector};

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v, v.len()).unwrap()
    }

    fn toy() -> CombinationDataset {
        let rows = vec![
            Example::new(0, pv(&[0.6, 0.4]), Some(0)),
            Example::new(1, pv(&[0.3, 0.7]), Some(1)),
            Example::new(0, pv(&[0.2, 0.8]), Some(1)),
            Example::new(1, pv(&[0.55, 0.45]), None),
        ];
        CombinationDataset::new(2, rows).unwrap()
    }

    #[test]
    fn e_step_matches_product_rule() {
        let data = toy();
        let phi = ConfusionMatrix::from_rows(&[vec![0.8, 0.3], vec![0.2, 0.7]]).unwrap();
        let t = Temperature::new(1.3).unwrap();
        let resp = e_step(&data, &phi, t).unwrap();
        for (i, row) in data.rows().iter().enumerate() {
            let q = combine_pl(row.human_label, &row.model_probs, &phi, t);
            for j in 0..2 {
                assert!((resp.row(i)[j] - q[j]).abs() < 1e-12);
            }
        }
        assert!((resp.row(0)[0] - 0.8).abs() < 1e-9 || t != Temperature::ONE);
        let one = e_step(&data, &phi, Temperature::ONE).unwrap();
        assert!((one.row(0)[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn uniform_responsibilities_give_vote_marginal() {
        let data = toy();
        let resp = Responsibilities::new(2, &vec![vec![0.5, 0.5]; 4]).unwrap();
        let phi = m_step_confusion(&data, &resp, EmVariant::Ml, None).unwrap();
        for j in 0..2 {
            assert!((phi.get(0, j) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn map_with_no_mass_is_prior_mode() {
        let data = toy();
        let prior = DirichletPrior::new(2, 5.0, 2.0).unwrap();
        let resp = Responsibilities::new(2, &vec![vec![0.0, 0.0]; data.len()]).unwrap();
        let phi = m_step_confusion(&data, &resp, EmVariant::Map, Some(&prior)).unwrap();
        assert!(phi.max_abs_diff(&prior.mode()) < 1e-12);
    }

    #[test]
    fn uniform_responsibilities_push_temperature_up() {
        let data = toy();
        let resp = Responsibilities::new(2, &vec![vec![0.5, 0.5]; 4]).unwrap();
        let t = m_step_temperature(&data, &resp, EmVariant::Ml, None, 1e-6).unwrap();
        assert!(t.value() > 999.0, "{t:?}");
    }

    #[test]
    fn map_config_requires_priors() {
        let mut cfg = EmConfig::ml();
        cfg.variant = EmVariant::Map;
        assert!(matches!(
            run_em(&toy(), &cfg).unwrap_err(),
            Error::ConfigInvalid(_)
        ));
    }

    #[test]
    fn objective_is_monotone_on_toy() {
        let (_, trace) = run_em(&toy(), &EmConfig::ml()).unwrap();
        for w in trace.loglik_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "{:?}", trace.loglik_history);
        }
        assert_eq!(trace.loglik_history.len(), trace.iterations + 1);
    }

    #[test]
    fn trace_serializes_with_short_keys() {
        let trace = EmTrace {
            iterations: 1,
            loglik_history: vec![-1.0, -0.5],
            converged: true,
        };
        let v: serde_json::Value = serde_json::to_value(&trace).unwrap();
        assert!(v.get("loglik").is_some() && v.get("iterations").is_some());
    }
}
