//! Combination rules and their fitted parameter sets.
//!
//! The central rule combines a labeler vote `h` with calibrated model
//! probabilities `q` as `p(y = j | h, m) ∝ phi[h][j] * q_j`, which assumes the
//! two predictors are conditionally independent given the true class. The
//! other methods are baselines: a naive-Bayes rule over two hard labels
//! (`LL`), a one-parameter symmetric confusion matrix (`SP`) and multinomial
//! logistic regression on `ln m ⊕ onehot(h)` (`LR`).

use serde::{Deserialize, Serialize};

use crate::calibration::{bayes_calibrated_probs, temper, Temperature, TemperaturePosterior};
use crate::confusion::ConfusionMatrix;
use crate::domain::{CombinationDataset, LabelSpace, ProbVector};
use crate::error::{Error, Result};
use crate::format::to_json_string;
use crate::numeric::{floored_ln, log_sum_exp, softmax_in_place};

/// Method tag stored in parameter files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "PL")]
    Pl,
    #[serde(rename = "PL_EM")]
    PlEm,
    #[serde(rename = "LL")]
    Ll,
    #[serde(rename = "SP")]
    Sp,
    #[serde(rename = "LR")]
    Lr,
    #[serde(rename = "PL_BAYES")]
    PlBayes,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Pl => "PL",
            Method::PlEm => "PL_EM",
            Method::Ll => "LL",
            Method::Sp => "SP",
            Method::Lr => "LR",
            Method::PlBayes => "PL_BAYES",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Multinomial logistic regression weights.
///
/// `w` is `K x 2K` row-major: the first `K` columns multiply `ln m`, the last
/// `K` act on the one-hot labeler vote.
#[derive(Debug, Clone, PartialEq)]
pub struct LrWeights {
    k: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl LrWeights {
    pub fn zeros(k: usize) -> Self {
        Self {
            k,
            w: vec![0.0; 2 * k * k],
            b: vec![0.0; k],
        }
    }

    pub fn from_rows(w: &[Vec<f64>], b: &[f64]) -> Result<Self> {
        let k = b.len();
        LabelSpace::new(k)?;
        if w.len() != k {
            return Err(Error::WrongLength {
                expected: k,
                got: w.len(),
            });
        }
        let mut flat = Vec::with_capacity(2 * k * k);
        for row in w {
            if row.len() != 2 * k {
                return Err(Error::WrongLength {
                    expected: 2 * k,
                    got: row.len(),
                });
            }
            flat.extend_from_slice(row);
        }
        if flat.iter().chain(b).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("LR weights".into()));
        }
        Ok(Self {
            k,
            w: flat,
            b: b.to_vec(),
        })
    }

    /// The logistic-regression point that reproduces the tempered
    /// combination: `W_m = I / T`, `W_h = (ln phi)^T`, `b = 0`.
    pub fn from_pl(phi: &ConfusionMatrix, t: Temperature) -> Self {
        let k = phi.k();
        let mut out = Self::zeros(k);
        for i in 0..k {
            out.w[i * 2 * k + i] = 1.0 / t.value();
            for h in 0..k {
                out.w[i * 2 * k + k + h] = phi.get(h, i).ln();
            }
        }
        out
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn weight(&self, i: usize, c: usize) -> f64 {
        self.w[i * 2 * self.k + c]
    }

    pub fn bias(&self) -> &[f64] {
        &self.b
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.w.chunks(2 * self.k).map(<[f64]>::to_vec).collect()
    }

    fn logits_from_log(&self, h: usize, logm: &[f64]) -> Vec<f64> {
        let k = self.k;
        (0..k)
            .map(|i| {
                let row = &self.w[i * 2 * k..(i + 1) * 2 * k];
                let dot: f64 = row[..k].iter().zip(logm).map(|(w, x)| w * x).sum();
                dot + row[k + h] + self.b[i]
            })
            .collect()
    }

    pub fn posterior(&self, h: usize, m: &ProbVector) -> ProbVector {
        let logm: Vec<f64> = m.as_slice().iter().map(|&p| floored_ln(p)).collect();
        ProbVector::from_log_weights(self.logits_from_log(h, &logm))
    }
}

/// Fitted parameters for one method. The variant carries exactly the fields
/// the method needs.
#[derive(Debug, Clone, PartialEq)]
pub enum Combiner {
    Pl {
        phi: ConfusionMatrix,
        temperature: Temperature,
    },
    PlEm {
        phi: ConfusionMatrix,
        temperature: Temperature,
    },
    Ll {
        phi_human: ConfusionMatrix,
        phi_model: ConfusionMatrix,
        class_prior: ProbVector,
    },
    Sp {
        sp_diag: f64,
        temperature: Temperature,
    },
    Lr(LrWeights),
    PlBayes {
        phi: ConfusionMatrix,
        posterior: TemperaturePosterior,
    },
}

/// A fitted combiner plus a free-form record of how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinerParams {
    space: LabelSpace,
    combiner: Combiner,
    pub meta: serde_json::Value,
}

impl CombinerParams {
    pub fn new(k: usize, combiner: Combiner) -> Result<Self> {
        let space = LabelSpace::new(k)?;
        let check = |got: usize| {
            if got == k {
                Ok(())
            } else {
                Err(Error::WrongLength { expected: k, got })
            }
        };
        match &combiner {
            Combiner::Pl { phi, .. }
            | Combiner::PlEm { phi, .. }
            | Combiner::PlBayes { phi, .. } => check(phi.k())?,
            Combiner::Ll {
                phi_human,
                phi_model,
                class_prior,
            } => {
                check(phi_human.k())?;
                check(phi_model.k())?;
                check(class_prior.len())?;
            }
            Combiner::Sp { sp_diag, .. } => check_sp_diag(*sp_diag, k)?,
            Combiner::Lr(w) => check(w.k())?,
        }
        Ok(Self {
            space,
            combiner,
            meta: serde_json::Value::Null,
        })
    }

    pub fn k(&self) -> usize {
        self.space.k()
    }

    pub fn combiner(&self) -> &Combiner {
        &self.combiner
    }

    pub fn method(&self) -> Method {
        match self.combiner {
            Combiner::Pl { .. } => Method::Pl,
            Combiner::PlEm { .. } => Method::PlEm,
            Combiner::Ll { .. } => Method::Ll,
            Combiner::Sp { .. } => Method::Sp,
            Combiner::Lr(_) => Method::Lr,
            Combiner::PlBayes { .. } => Method::PlBayes,
        }
    }

    /// Temperature used for the model-only calibrated output, if the method
    /// has one.
    pub fn temperature(&self) -> Option<Temperature> {
        match &self.combiner {
            Combiner::Pl { temperature, .. }
            | Combiner::PlEm { temperature, .. }
            | Combiner::Sp { temperature, .. } => Some(*temperature),
            _ => None,
        }
    }

    /// `(phi, T)` for methods that use the tempered product rule with a
    /// single temperature. `SP` yields its implicit symmetric matrix.
    pub fn product_rule(&self) -> Option<(ConfusionMatrix, Temperature)> {
        match &self.combiner {
            Combiner::Pl { phi, temperature } | Combiner::PlEm { phi, temperature } => {
                Some((phi.clone(), *temperature))
            }
            Combiner::Sp {
                sp_diag,
                temperature,
            } => Some((ConfusionMatrix::symmetric(self.k(), *sp_diag), *temperature)),
            _ => None,
        }
    }

    /// Model probabilities after this method's calibration map (identity for
    /// methods without one).
    pub fn calibrated_model(&self, m: &ProbVector) -> ProbVector {
        match &self.combiner {
            Combiner::PlBayes { posterior, .. } => bayes_calibrated_probs(m, posterior),
            _ => match self.temperature() {
                Some(t) => temper(m, t),
                None => m.clone(),
            },
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(to_json_string(&ParamsFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ParamsFile = serde_json::from_str(text)?;
        file.try_into()
    }
}

fn check_sp_diag(value: f64, k: usize) -> Result<()> {
    if value > 1.0 / k as f64 && value < 1.0 {
        Ok(())
    } else {
        Err(Error::SpOutOfRange { value })
    }
}

/// `p(y = j | h, m) ∝ phi[h][j] * temper(m, t)[j]`
pub fn combine_pl(h: usize, m: &ProbVector, phi: &ConfusionMatrix, t: Temperature) -> ProbVector {
    let inv_t = 1.0 / t.value();
    let z = phi
        .row(h)
        .iter()
        .zip(m.as_slice())
        .map(|(&f, &p)| f.ln() + p.ln() * inv_t)
        .collect();
    ProbVector::from_log_weights(z)
}

/// Product rule with already-calibrated model probabilities `q`.
pub fn combine_calibrated(h: usize, q: &ProbVector, phi: &ConfusionMatrix) -> ProbVector {
    let w = phi
        .row(h)
        .iter()
        .zip(q.as_slice())
        .map(|(f, p)| f * p)
        .collect();
    ProbVector::from_weights(w)
}

/// Naive-Bayes combination of two hard labels.
pub fn combine_ll(
    h: usize,
    m_label: usize,
    phi_h: &ConfusionMatrix,
    phi_m: &ConfusionMatrix,
    class_prior: &ProbVector,
) -> ProbVector {
    let w = (0..phi_h.k())
        .map(|j| class_prior[j] * phi_h.get(h, j) * phi_m.get(m_label, j))
        .collect();
    ProbVector::from_weights(w)
}

/// Product rule with the symmetric confusion matrix implied by `sp_diag`.
pub fn combine_sp(h: usize, m: &ProbVector, sp_diag: f64, t: Temperature) -> Result<ProbVector> {
    check_sp_diag(sp_diag, m.len())?;
    Ok(combine_pl(
        h,
        m,
        &ConfusionMatrix::symmetric(m.len(), sp_diag),
        t,
    ))
}

/// Class frequencies smoothed by a symmetric `Dirichlet(1 + 1/K)` and taken
/// at the posterior mode: `(n_j + 1/K) / (n + 1)`.
pub fn smoothed_class_prior(data: &CombinationDataset) -> ProbVector {
    let k = data.k();
    let mut counts = vec![1.0 / k as f64; k];
    for (_, _, y) in data.supervised() {
        counts[y] += 1.0;
    }
    ProbVector::from_weights(counts)
}

/// `(label, posterior)` for one row; ties go to the smallest index.
pub fn predict(params: &CombinerParams, h: usize, m: &ProbVector) -> Result<(usize, ProbVector)> {
    params.space.check(h)?;
    if m.len() != params.k() {
        return Err(Error::WrongLength {
            expected: params.k(),
            got: m.len(),
        });
    }
    let posterior = match &params.combiner {
        Combiner::Pl { phi, temperature } | Combiner::PlEm { phi, temperature } => {
            combine_pl(h, m, phi, *temperature)
        }
        Combiner::Ll {
            phi_human,
            phi_model,
            class_prior,
        } => combine_ll(h, m.argmax(), phi_human, phi_model, class_prior),
        Combiner::Sp {
            sp_diag,
            temperature,
        } => combine_sp(h, m, *sp_diag, *temperature)?,
        Combiner::Lr(w) => w.posterior(h, m),
        Combiner::PlBayes { phi, posterior } => {
            combine_calibrated(h, &bayes_calibrated_probs(m, posterior), phi)
        }
    };
    Ok((posterior.argmax(), posterior))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrConfig {
    pub l2: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for LrConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            max_iters: 2000,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LrFit {
    pub weights: LrWeights,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
}

const NONMONOTONE_MEMORY: usize = 10;

/// Training rows flattened for the LR objective.
struct LrProblem {
    k: usize,
    logm: Vec<f64>,
    human: Vec<usize>,
    truth: Vec<usize>,
    l2: f64,
}

impl LrProblem {
    fn n(&self) -> usize {
        self.truth.len()
    }

    /// Mean cross-entropy plus `l2 * ||W||^2`, and its gradient.
    fn eval(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let k = self.k;
        let nw = 2 * k * k;
        grad.fill(0.0);
        let mut loss = 0.0;
        let mut z = vec![0.0; k];
        for r in 0..self.n() {
            let x = &self.logm[r * k..(r + 1) * k];
            let h = self.human[r];
            for (i, zi) in z.iter_mut().enumerate() {
                let row = &theta[i * 2 * k..(i + 1) * 2 * k];
                *zi = row[..k].iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
                    + row[k + h]
                    + theta[nw + i];
            }
            let y = self.truth[r];
            loss += log_sum_exp(&z) - z[y];
            softmax_in_place(&mut z);
            z[y] -= 1.0;
            for (i, &g) in z.iter().enumerate() {
                let grow = &mut grad[i * 2 * k..(i + 1) * 2 * k];
                for (gw, v) in grow[..k].iter_mut().zip(x) {
                    *gw += g * v;
                }
                grow[k + h] += g;
                grad[nw + i] += g;
            }
        }
        let n = self.n() as f64;
        for g in grad.iter_mut() {
            *g /= n;
        }
        let mut penalty = 0.0;
        for (g, &w) in grad[..nw].iter_mut().zip(&theta[..nw]) {
            *g += 2.0 * self.l2 * w;
            penalty += w * w;
        }
        loss / n + self.l2 * penalty
    }
}

/// Full-batch gradient descent with Barzilai-Borwein trial steps and a
/// nonmonotone Armijo backtracking test against the worst of the last few
/// objective values. Stops when the gradient's max-norm drops below `tol`.
pub fn fit_lr(data: &CombinationDataset, config: &LrConfig) -> Result<LrFit> {
    let k = data.k();
    if data.supervised_count() < k {
        return Err(Error::TooFewRows {
            needed: k,
            got: data.supervised_count(),
        });
    }
    if !(config.l2 >= 0.0) || !config.l2.is_finite() {
        return Err(Error::ConfigInvalid(format!(
            "l2 must be finite and >= 0, got {}",
            config.l2
        )));
    }
    let mut problem = LrProblem {
        k,
        logm: Vec::new(),
        human: Vec::new(),
        truth: Vec::new(),
        l2: config.l2,
    };
    for (h, m, y) in data.supervised() {
        problem
            .logm
            .extend(m.as_slice().iter().map(|&p| floored_ln(p)));
        problem.human.push(h);
        problem.truth.push(y);
    }

    let dim = 2 * k * k + k;
    let mut theta = vec![0.0; dim];
    let mut grad = vec![0.0; dim];
    let mut f = problem.eval(&theta, &mut grad);
    let mut step = 1.0;
    let mut iterations = 0;
    let mut converged = false;
    let mut cand = vec![0.0; dim];
    let mut cand_grad = vec![0.0; dim];
    let mut recent = std::collections::VecDeque::from([f]);

    while iterations < config.max_iters {
        let gmax = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
        if gmax < config.tol {
            converged = true;
            break;
        }
        let gnorm2: f64 = grad.iter().map(|g| g * g).sum();
        let reference = recent.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let fc = loop {
            for ((c, t), g) in cand.iter_mut().zip(&theta).zip(&grad) {
                *c = t - step * g;
            }
            let fc = problem.eval(&cand, &mut cand_grad);
            if fc.is_finite() && fc <= reference - 1e-4 * step * gnorm2 {
                break Some(fc);
            }
            step *= 0.5;
            if step < 1e-20 {
                break None;
            }
        };
        let Some(fc) = fc else { break };
        iterations += 1;

        let (mut ss, mut sy) = (0.0, 0.0);
        for i in 0..dim {
            let s = cand[i] - theta[i];
            ss += s * s;
            sy += s * (cand_grad[i] - grad[i]);
        }
        step = if sy > 0.0 {
            (ss / sy).clamp(1e-10, 1e10)
        } else {
            step * 2.0
        };
        std::mem::swap(&mut theta, &mut cand);
        std::mem::swap(&mut grad, &mut cand_grad);
        f = fc;
        recent.push_back(f);
        if recent.len() > NONMONOTONE_MEMORY {
            recent.pop_front();
        }
    }
    if !f.is_finite() || theta.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(
            "logistic regression objective diverged".into(),
        ));
    }
    let nw = 2 * k * k;
    let weights = LrWeights {
        k,
        w: theta[..nw].to_vec(),
        b: theta[nw..].to_vec(),
    };
    Ok(LrFit {
        weights,
        iterations,
        converged,
        objective: f,
    })
}

/// Objective and gradient at the given weights, for gradient checks.
pub fn lr_objective(data: &CombinationDataset, weights: &LrWeights, l2: f64) -> (f64, LrWeights) {
    let k = data.k();
    let mut problem = LrProblem {
        k,
        logm: Vec::new(),
        human: Vec::new(),
        truth: Vec::new(),
        l2,
    };
    for (h, m, y) in data.supervised() {
        problem
            .logm
            .extend(m.as_slice().iter().map(|&p| floored_ln(p)));
        problem.human.push(h);
        problem.truth.push(y);
    }
    let mut theta = weights.w.clone();
    theta.extend_from_slice(&weights.b);
    let mut grad = vec![0.0; theta.len()];
    let f = problem.eval(&theta, &mut grad);
    let nw = 2 * k * k;
    (
        f,
        LrWeights {
            k,
            w: grad[..nw].to_vec(),
            b: grad[nw..].to_vec(),
        },
    )
}

/// On-disk layout of [`CombinerParams`].
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    method: Method,
    k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phi: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    phi_model: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_prior: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tau_grid: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tau_weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sp_diag: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lr_w: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lr_b: Option<Vec<f64>>,
    #[serde(default)]
    meta: serde_json::Value,
}

impl From<&CombinerParams> for ParamsFile {
    fn from(p: &CombinerParams) -> Self {
        let mut f = ParamsFile {
            method: p.method(),
            k: p.k(),
            phi: None,
            phi_model: None,
            class_prior: None,
            temperature: None,
            tau_grid: None,
            tau_weights: None,
            sp_diag: None,
            lr_w: None,
            lr_b: None,
            meta: p.meta.clone(),
        };
        match &p.combiner {
            Combiner::Pl { phi, temperature } | Combiner::PlEm { phi, temperature } => {
                f.phi = Some(phi.to_rows());
                f.temperature = Some(temperature.value());
            }
            Combiner::Ll {
                phi_human,
                phi_model,
                class_prior,
            } => {
                f.phi = Some(phi_human.to_rows());
                f.phi_model = Some(phi_model.to_rows());
                f.class_prior = Some(class_prior.as_slice().to_vec());
            }
            Combiner::Sp {
                sp_diag,
                temperature,
            } => {
                f.sp_diag = Some(*sp_diag);
                f.temperature = Some(temperature.value());
            }
            Combiner::Lr(w) => {
                f.lr_w = Some(w.rows());
                f.lr_b = Some(w.b.clone());
            }
            Combiner::PlBayes { phi, posterior } => {
                f.phi = Some(phi.to_rows());
                f.tau_grid = Some(posterior.grid().to_vec());
                f.tau_weights = Some(posterior.weights().to_vec());
            }
        }
        f
    }
}

impl TryFrom<ParamsFile> for CombinerParams {
    type Error = Error;

    fn try_from(mut f: ParamsFile) -> Result<Self> {
        let method = f.method;
        let name = method.tag().to_string();
        let missing = |field: &'static str| Error::MethodFieldMissing {
            method: name.clone(),
            field,
        };

        macro_rules! take {
            ($field:ident) => {
                f.$field.take().ok_or_else(|| missing(stringify!($field)))?
            };
        }

        let combiner = match method {
            Method::Pl | Method::PlEm => {
                let phi = ConfusionMatrix::from_rows(&take!(phi))?;
                let temperature = Temperature::new(take!(temperature))?;
                if method == Method::Pl {
                    Combiner::Pl { phi, temperature }
                } else {
                    Combiner::PlEm { phi, temperature }
                }
            }
            Method::Ll => Combiner::Ll {
                phi_human: ConfusionMatrix::from_rows(&take!(phi))?,
                phi_model: ConfusionMatrix::from_rows(&take!(phi_model))?,
                class_prior: ProbVector::new(&take!(class_prior), f.k)?,
            },
            Method::Sp => Combiner::Sp {
                sp_diag: take!(sp_diag),
                temperature: Temperature::new(take!(temperature))?,
            },
            Method::Lr => Combiner::Lr(LrWeights::from_rows(&take!(lr_w), &take!(lr_b))?),
            Method::PlBayes => Combiner::PlBayes {
                phi: ConfusionMatrix::from_rows(&take!(phi))?,
                posterior: TemperaturePosterior::new(take!(tau_grid), take!(tau_weights))?,
            },
        };

        let leftovers: [(&'static str, bool); 10] = [
            ("phi", f.phi.is_some()),
            ("phi_model", f.phi_model.is_some()),
            ("class_prior", f.class_prior.is_some()),
            ("temperature", f.temperature.is_some()),
            ("tau_grid", f.tau_grid.is_some()),
            ("tau_weights", f.tau_weights.is_some()),
            ("sp_diag", f.sp_diag.is_some()),
            ("lr_w", f.lr_w.is_some()),
            ("lr_b", f.lr_b.is_some()),
            ("k", false),
        ];
        if let Some((field, _)) = leftovers.iter().find(|(_, present)| *present) {
            return Err(Error::UnexpectedField {
                method: name,
                field,
            });
        }
        let mut params = CombinerParams::new(f.k, combiner)?;
        params.meta = f.meta;
        Ok(params)
    }
}
