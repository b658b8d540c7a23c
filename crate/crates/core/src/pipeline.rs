//! Method dispatch: fit any combiner from a dataset and evaluate it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::{
    fit_temperature_map, fit_temperature_ml, posterior_temperature, temper, LogTempPrior,
    Temperature, DEFAULT_POSTERIOR_NODES, DEFAULT_SEARCH_TOL,
};
use crate::combiner::{
    combine_calibrated, fit_lr, predict, smoothed_class_prior, Combiner, CombinerParams, LrConfig,
};
use crate::confusion::{
    estimate_map, estimate_mle, estimate_posterior_mean, prior_from_accuracy, ConfusionMatrix,
    DirichletPrior, DEFAULT_PRIOR_STRENGTH,
};
use crate::domain::{CombinationDataset, Example, ProbVector};
use crate::em::{run_em, EmConfig, EmTrace};
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, DEFAULT_BINS};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Anchor for the confusion prior when nothing else is available.
pub const FALLBACK_PRIOR_ACCURACY: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    PlMl,
    PlMap,
    PlEmMl,
    PlEmMap,
    Ll,
    Sp,
    Lr,
    PlBayes,
}

impl FitMethod {
    pub const ALL: [FitMethod; 8] = [
        FitMethod::PlMl,
        FitMethod::PlMap,
        FitMethod::PlEmMl,
        FitMethod::PlEmMap,
        FitMethod::Ll,
        FitMethod::Sp,
        FitMethod::Lr,
        FitMethod::PlBayes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FitMethod::PlMl => "pl-ml",
            FitMethod::PlMap => "pl-map",
            FitMethod::PlEmMl => "pl-em-ml",
            FitMethod::PlEmMap => "pl-em-map",
            FitMethod::Ll => "ll",
            FitMethod::Sp => "sp",
            FitMethod::Lr => "lr",
            FitMethod::PlBayes => "pl-bayes",
        }
    }

    /// Whether the method reads true labels.
    pub fn is_supervised(self) -> bool {
        !matches!(self, FitMethod::PlEmMl | FitMethod::PlEmMap)
    }
}

impl fmt::Display for FitMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FitMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FitMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::ConfigInvalid(format!("unknown method {s:?}")))
    }
}

/// Hyperparameters shared by all fit paths. Fields a method does not use are
/// ignored by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Mode of the confusion prior's diagonal. Supervised methods default to
    /// the model's accuracy on the labeled rows.
    pub prior_accuracy: Option<f64>,
    pub prior_strength: f64,
    pub temp_mu: f64,
    pub temp_sigma: f64,
    pub search_tol: f64,
    pub em_max_iters: usize,
    pub em_tol: f64,
    pub em_init_temperature: Option<f64>,
    pub l2: f64,
    pub lr_max_iters: usize,
    pub lr_tol: f64,
    pub posterior_nodes: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        let lr = LrConfig::default();
        let em = EmConfig::ml();
        let temp = LogTempPrior::default();
        Self {
            prior_accuracy: None,
            prior_strength: DEFAULT_PRIOR_STRENGTH,
            temp_mu: temp.mu,
            temp_sigma: temp.sigma,
            search_tol: DEFAULT_SEARCH_TOL,
            em_max_iters: em.max_iters,
            em_tol: em.loglik_tol,
            em_init_temperature: None,
            l2: lr.l2,
            lr_max_iters: lr.max_iters,
            lr_tol: lr.tol,
            posterior_nodes: DEFAULT_POSTERIOR_NODES,
        }
    }
}

impl FitConfig {
    pub fn temp_prior(&self) -> Result<LogTempPrior> {
        LogTempPrior::new(self.temp_mu, self.temp_sigma)
    }

    pub fn lr(&self) -> LrConfig {
        LrConfig {
            l2: self.l2,
            max_iters: self.lr_max_iters,
            tol: self.lr_tol,
        }
    }

    /// Prior anchor: the explicit setting, else (when allowed to read truth)
    /// the model's labeled accuracy kept inside `(1/K, 1)`, else the fallback.
    pub fn anchor_accuracy(&self, data: &CombinationDataset, read_truth: bool) -> f64 {
        if let Some(a) = self.prior_accuracy {
            return a;
        }
        let k = data.k() as f64;
        match data.model_accuracy().filter(|_| read_truth) {
            Some(a) => a.clamp(1.0 / k + 0.01, 0.99),
            None => FALLBACK_PRIOR_ACCURACY.max(1.0 / k + 0.01),
        }
    }

    fn confusion_prior(
        &self,
        data: &CombinationDataset,
        read_truth: bool,
    ) -> Result<(f64, DirichletPrior)> {
        let a = self.anchor_accuracy(data, read_truth);
        Ok((a, prior_from_accuracy(a, data.k(), self.prior_strength)?))
    }

    fn em(&self, base: EmConfig) -> EmConfig {
        EmConfig {
            max_iters: self.em_max_iters,
            loglik_tol: self.em_tol,
            init_temperature: self.em_init_temperature,
            search_tol: self.search_tol,
            ..base
        }
    }
}

/// MAP of the single diagonal parameter of a symmetric confusion matrix,
/// under the product of column priors anchored at `prior`.
pub fn fit_sp_diag(data: &CombinationDataset, accuracy: f64, strength: f64) -> Result<f64> {
    let n = data.supervised_count();
    if n == 0 {
        return Err(Error::NoSupervisedRows);
    }
    let k = data.k() as f64;
    let correct = data.supervised().filter(|&(h, _, y)| h == y).count() as f64;
    let d = (k * accuracy * strength + correct) / (k * strength + n as f64);
    Ok(d.clamp(1.0 / k + 1e-9, 1.0 - 1e-12))
}

fn model_as_voter(data: &CombinationDataset) -> Result<CombinationDataset> {
    let rows = data
        .rows()
        .iter()
        .map(|r| Example::new(r.model_probs.argmax(), r.model_probs.clone(), r.true_label))
        .collect();
    CombinationDataset::new(data.k(), rows)
}

fn require_labels(data: &CombinationDataset) -> Result<()> {
    if data.supervised_count() == 0 {
        Err(Error::NoSupervisedRows)
    } else {
        Ok(())
    }
}

/// Fit `method` on `data`. The returned params carry a `meta` record of the
/// method, hyperparameters, library version and training set size.
pub fn fit(
    data: &CombinationDataset,
    method: FitMethod,
    config: &FitConfig,
) -> Result<(CombinerParams, Option<EmTrace>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = data.k();
    let tol = config.search_tol;
    let mut anchor = None;
    let mut trace = None;

    let combiner = match method {
        FitMethod::PlMl => {
            require_labels(data)?;
            Combiner::Pl {
                phi: estimate_mle(data)?,
                temperature: fit_temperature_ml(data, tol)?,
            }
        }
        FitMethod::PlMap => {
            require_labels(data)?;
            let (a, prior) = config.confusion_prior(data, true)?;
            anchor = Some(a);
            Combiner::Pl {
                phi: estimate_map(data, &prior)?,
                temperature: fit_temperature_map(data, &config.temp_prior()?, tol)?,
            }
        }
        FitMethod::PlEmMl | FitMethod::PlEmMap => {
            let unlabeled = data.without_truth();
            let em = if method == FitMethod::PlEmMl {
                config.em(EmConfig::ml())
            } else {
                let (a, prior) = config.confusion_prior(data, false)?;
                anchor = Some(a);
                config.em(EmConfig::map(prior, config.temp_prior()?))
            };
            let (params, t) = run_em(&unlabeled, &em)?;
            trace = Some(t);
            params.combiner().clone()
        }
        FitMethod::Ll => {
            require_labels(data)?;
            let (a, prior) = config.confusion_prior(data, true)?;
            anchor = Some(a);
            Combiner::Ll {
                phi_human: estimate_map(data, &prior)?,
                phi_model: estimate_map(&model_as_voter(data)?, &prior)?,
                class_prior: smoothed_class_prior(data),
            }
        }
        FitMethod::Sp => {
            require_labels(data)?;
            let a = config.anchor_accuracy(data, true);
            prior_from_accuracy(a, k, config.prior_strength)?;
            anchor = Some(a);
            Combiner::Sp {
                sp_diag: fit_sp_diag(data, a, config.prior_strength)?,
                temperature: fit_temperature_map(data, &config.temp_prior()?, tol)?,
            }
        }
        FitMethod::Lr => Combiner::Lr(fit_lr(data, &config.lr())?.weights),
        FitMethod::PlBayes => {
            require_labels(data)?;
            let (a, prior) = config.confusion_prior(data, true)?;
            anchor = Some(a);
            Combiner::PlBayes {
                phi: estimate_posterior_mean(data, &prior)?,
                posterior: posterior_temperature(
                    data,
                    &config.temp_prior()?,
                    config.posterior_nodes,
                )?,
            }
        }
    };

    let mut params = CombinerParams::new(k, combiner)?;
    params.meta = serde_json::json!({
        "fit_method": method,
        "config": config,
        "prior_accuracy_used": anchor,
        "version": VERSION,
        "n_train": data.len(),
        "n_supervised": if method.is_supervised() { data.supervised_count() } else { 0 },
        "em_trace": trace,
    });
    Ok((params, trace))
}

/// Posteriors of the combiner, its calibrated model, the raw model and the
/// labeler's one-hot vote on every row.
pub struct Predictions {
    pub combined: Vec<ProbVector>,
    pub model_calibrated: Vec<ProbVector>,
    pub model_raw: Vec<ProbVector>,
    pub human: Vec<ProbVector>,
}

pub fn predictions(params: &CombinerParams, data: &CombinationDataset) -> Result<Predictions> {
    let k = data.k();
    if params.k() != k {
        return Err(Error::WrongLength {
            expected: k,
            got: params.k(),
        });
    }
    let mut out = Predictions {
        combined: vec![],
        model_calibrated: vec![],
        model_raw: vec![],
        human: vec![],
    };
    for row in data.rows() {
        out.combined
            .push(predict(params, row.human_label, &row.model_probs)?.1);
        out.model_calibrated
            .push(params.calibrated_model(&row.model_probs));
        out.model_raw.push(row.model_probs.clone());
        let mut onehot = vec![0.0; k];
        onehot[row.human_label] = 1.0;
        out.human.push(ProbVector::from_weights(onehot));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub method: String,
    pub n: usize,
    pub bins: usize,
    pub combination: MetricsReport,
    pub model_calibrated: MetricsReport,
    pub model_uncalibrated: MetricsReport,
    pub human: MetricsReport,
    pub version: String,
}

/// Metrics of the combination and of each predictor alone on the labeled
/// rows of `data`.
///
/// `oracle` holds the true `p(y | m)` of every row and feeds the calibration
/// error of the model-only reports. The combination conditions on the vote as
/// well, so its true posterior is only known when `phi_true` is also given.
pub fn evaluate(
    params: &CombinerParams,
    data: &CombinationDataset,
    bins: usize,
    oracle: Option<&[ProbVector]>,
    phi_true: Option<&ConfusionMatrix>,
) -> Result<EvaluationReport> {
    require_labels(data)?;
    let labeled: Vec<usize> = (0..data.len())
        .filter(|&i| data.rows()[i].true_label.is_some())
        .collect();
    let subset = data.subset(&labeled);
    let truth: Vec<usize> = subset.rows().iter().filter_map(|r| r.true_label).collect();
    let oracle: Option<Vec<ProbVector>> = oracle
        .map(|o| {
            if o.len() != data.len() {
                return Err(Error::LengthMismatch {
                    left: data.len(),
                    right: o.len(),
                });
            }
            Ok(labeled.iter().map(|&i| o[i].clone()).collect())
        })
        .transpose()?;
    let joint: Option<Vec<ProbVector>> = match (&oracle, phi_true) {
        (Some(o), Some(phi)) => {
            if phi.k() != data.k() {
                return Err(Error::WrongLength {
                    expected: data.k(),
                    got: phi.k(),
                });
            }
            Some(
                subset
                    .rows()
                    .iter()
                    .zip(o)
                    .map(|(r, p)| combine_calibrated(r.human_label, p, phi))
                    .collect(),
            )
        }
        (None, Some(_)) => return Err(Error::OracleRequired),
        _ => None,
    };
    let p = predictions(params, &subset)?;
    let report =
        |q: &[ProbVector], o: Option<&[ProbVector]>| MetricsReport::compute(q, &truth, bins, o);
    Ok(EvaluationReport {
        method: params.method().to_string(),
        n: truth.len(),
        bins,
        combination: report(&p.combined, joint.as_deref())?,
        model_calibrated: report(&p.model_calibrated, oracle.as_deref())?,
        model_uncalibrated: report(&p.model_raw, oracle.as_deref())?,
        human: report(&p.human, None)?,
        version: VERSION.to_string(),
    })
}

pub fn evaluate_default(
    params: &CombinerParams,
    data: &CombinationDataset,
) -> Result<EvaluationReport> {
    evaluate(params, data, DEFAULT_BINS, None, None)
}

/// Eval-set error of the product rule at a fixed temperature.
pub fn error_at_temperature(
    data: &CombinationDataset,
    phi: &ConfusionMatrix,
    t: Temperature,
) -> Result<f64> {
    require_labels(data)?;
    let mut wrong = 0usize;
    for (h, m, y) in data.supervised() {
        let q = combine_calibrated(h, &temper(m, t), phi);
        wrong += usize::from(q.argmax() != y);
    }
    Ok(wrong as f64 / data.supervised_count() as f64)
}
