//! Synthetic data with known ground truth.
//!
//! Each row draws a true posterior `p ~ Dirichlet(alpha)`, a label
//! `y ~ Categorical(p)` and a labeler vote from column `y` of `phi_star`. The
//! model reports `m ∝ p^t_star`, so `temper(m, t_star)` recovers `p`. The
//! vote is conditionally independent of `m` given `y` unless `rho > 0`, in
//! which case it copies the model's argmax with probability `rho`.

use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::combiner::predict;
use crate::confusion::ConfusionMatrix;
use crate::domain::{CombinationDataset, Example, ProbVector};
use crate::error::{Error, Result};
use crate::format::format_float;
use crate::metrics::error_rate;
use crate::numeric::{mix_seed, EPS};
use crate::pipeline::{fit, FitConfig, FitMethod};

pub const DEFAULT_CONCENTRATION: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub k: usize,
    pub n: usize,
    pub class_prior: Vec<f64>,
    pub phi_star: ConfusionMatrix,
    pub t_star: f64,
    /// Total Dirichlet concentration; `alpha = class_prior * concentration`.
    #[serde(default = "default_concentration")]
    pub concentration: f64,
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_concentration() -> f64 {
    DEFAULT_CONCENTRATION
}

impl SyntheticConfig {
    /// Uniform classes and a symmetric `phi_star` with the given diagonal.
    pub fn symmetric(k: usize, n: usize, diag: f64, t_star: f64, seed: u64) -> Self {
        Self {
            k,
            n,
            class_prior: vec![1.0 / k as f64; k],
            phi_star: ConfusionMatrix::symmetric(k, diag),
            t_star,
            concentration: DEFAULT_CONCENTRATION,
            rho: 0.0,
            seed,
        }
    }

    pub fn dirichlet_alpha(&self) -> Vec<f64> {
        self.class_prior
            .iter()
            .map(|p| p * self.concentration)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ConfigInvalid(msg));
        if self.k < 2 {
            return Err(Error::InvalidLabelSpace(self.k));
        }
        if self.n == 0 {
            return bad("n must be positive".into());
        }
        if self.class_prior.len() != self.k {
            return bad(format!(
                "class_prior has {} entries, expected {}",
                self.class_prior.len(),
                self.k
            ));
        }
        if self
            .class_prior
            .iter()
            .any(|p| !(*p > 0.0) || !p.is_finite())
        {
            return bad("class_prior entries must be positive".into());
        }
        if (self.class_prior.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return bad("class_prior must sum to 1".into());
        }
        if self.phi_star.k() != self.k {
            return bad(format!(
                "phi_star is {0}x{0}, expected K={1}",
                self.phi_star.k(),
                self.k
            ));
        }
        if !(self.t_star > 0.0 && self.t_star.is_finite()) {
            return bad(format!("t_star must be positive, got {}", self.t_star));
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return bad(format!(
                "concentration must be positive, got {}",
                self.concentration
            ));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        Ok(())
    }
}

/// A generated dataset together with the true posterior of every row.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub data: CombinationDataset,
    pub oracle: Vec<ProbVector>,
}

fn categorical(rng: &mut ChaCha8Rng, weights: impl Iterator<Item = f64> + Clone) -> usize {
    let total: f64 = weights.clone().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        if w > 0.0 {
            last = i;
        }
        acc += w;
        if u < acc {
            return i;
        }
    }
    last
}

struct RowSampler {
    gammas: Vec<Gamma<f64>>,
    floor: f64,
    t_star: f64,
    phi: ConfusionMatrix,
    rho: f64,
    seed: u64,
}

impl RowSampler {
    fn new(config: &SyntheticConfig) -> Result<Self> {
        let gammas = config
            .dirichlet_alpha()
            .into_iter()
            .map(|a| Gamma::new(a, 1.0).map_err(|e| Error::ConfigInvalid(e.to_string())))
            .collect::<Result<_>>()?;
        Ok(Self {
            gammas,
            // Keeps every reported probability at or above the global floor,
            // so tempering inverts exactly.
            floor: EPS.powf(1.0 / config.t_star.max(1.0)),
            t_star: config.t_star,
            phi: config.phi_star.clone(),
            rho: config.rho,
            seed: config.seed,
        })
    }

    fn row(&self, index: usize) -> (Example, ProbVector) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let p = loop {
            let g: Vec<f64> = self.gammas.iter().map(|d| d.sample(&mut rng)).collect();
            if g.iter().sum::<f64>() > 0.0 {
                break g;
            }
        };
        let total: f64 = p.iter().sum();
        let p: Vec<f64> = p.iter().map(|x| (x / total).max(self.floor)).collect();
        let total: f64 = p.iter().sum();
        let p = ProbVector::from_normalized(p.into_iter().map(|x| x / total).collect());

        let y = categorical(&mut rng, p.as_slice().iter().copied());
        let m = ProbVector::from_log_weights(
            p.as_slice().iter().map(|x| self.t_star * x.ln()).collect(),
        );
        let copy = rng.random::<f64>() < self.rho;
        let vote = categorical(&mut rng, self.phi.column(y).into_iter());
        let h = if copy { m.argmax() } else { vote };
        (Example::new(h, m, Some(y)), p)
    }
}

/// Rows are generated from independent per-row streams, so the output does
/// not depend on thread count.
pub fn generate(config: &SyntheticConfig) -> Result<Synthetic> {
    config.validate()?;
    let sampler = RowSampler::new(config)?;
    let pairs: Vec<(Example, ProbVector)> = if config.n >= 4096 {
        (0..config.n)
            .into_par_iter()
            .map(|i| sampler.row(i))
            .collect()
    } else {
        (0..config.n).map(|i| sampler.row(i)).collect()
    };
    let (rows, oracle): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(Synthetic {
        data: CombinationDataset::new(config.k, rows)?,
        oracle,
    })
}

/// `row,p_0,...,p_{K-1}`
pub fn write_oracle_csv<W: Write>(oracle: &[ProbVector], out: &mut W) -> Result<()> {
    let k = oracle.first().map_or(0, ProbVector::len);
    let mut header = vec!["row".to_string()];
    header.extend((0..k).map(|j| format!("p_{j}")));
    writeln!(out, "{}", header.join(","))?;
    for (i, p) in oracle.iter().enumerate() {
        let cells: Vec<String> = p.as_slice().iter().map(|&x| format_float(x)).collect();
        writeln!(out, "{i},{}", cells.join(","))?;
    }
    Ok(())
}

/// Inverse of [`write_oracle_csv`]. Rows must appear in index order.
pub fn read_oracle_csv<R: std::io::Read>(reader: R) -> Result<Vec<ProbVector>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let k = rdr.headers()?.len().saturating_sub(1);
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_err = |message: String| Error::Parse { line, message };
        let index: usize = record[0]
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("bad row index: {e}")))?;
        if index != out.len() {
            return Err(parse_err(format!(
                "expected row {}, found {index}",
                out.len()
            )));
        }
        let raw = record
            .iter()
            .skip(1)
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| parse_err(format!("bad probability `{s}`: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(ProbVector::new(&raw, k).map_err(|e| parse_err(e.to_string()))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub size: usize,
    pub mean_error: f64,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub std_error: f64,
    pub errors: Vec<f64>,
}

fn cell_seed(seed: u64, size: usize, replicate: usize) -> u64 {
    mix_seed(mix_seed(seed ^ size as u64).wrapping_add(replicate as u64))
}

/// Eval error of the combiner fit on `seed_index`'s subsample of `size` rows.
pub fn curve_cell(
    train: &CombinationDataset,
    eval: &CombinationDataset,
    method: FitMethod,
    size: usize,
    seed: u64,
    replicate: usize,
    config: &FitConfig,
) -> Result<f64> {
    if size > train.len() {
        return Err(Error::SizeTooLarge {
            size,
            available: train.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(seed, size, replicate));
    let mut idx = sample(&mut rng, train.len(), size).into_vec();
    idx.sort_unstable();
    let (params, _) = fit(&train.subset(&idx), method, config)?;
    let mut preds = Vec::with_capacity(eval.supervised_count());
    let mut truth = Vec::with_capacity(eval.supervised_count());
    for (h, m, y) in eval.supervised() {
        preds.push(predict(&params, h, m)?.0);
        truth.push(y);
    }
    error_rate(&preds, &truth)
}

/// Mean and spread of eval error over `seeds` subsamples for each size.
pub fn learning_curve(
    train: &CombinationDataset,
    eval: &CombinationDataset,
    method: FitMethod,
    sizes: &[usize],
    seeds: usize,
    seed: u64,
    config: &FitConfig,
) -> Result<Vec<CurvePoint>> {
    if eval.supervised_count() == 0 {
        return Err(Error::NoSupervisedRows);
    }
    if seeds == 0 {
        return Err(Error::ConfigInvalid("need at least one seed".into()));
    }
    if let Some(&size) = sizes.iter().find(|&&s| s > train.len()) {
        return Err(Error::SizeTooLarge {
            size,
            available: train.len(),
        });
    }
    let cells: Vec<(usize, usize)> = sizes
        .iter()
        .flat_map(|&s| (0..seeds).map(move |r| (s, r)))
        .collect();
    let errors: Vec<f64> = cells
        .par_iter()
        .map(|&(s, r)| curve_cell(train, eval, method, s, seed, r, config))
        .collect::<Result<_>>()?;
    Ok(sizes
        .iter()
        .zip(errors.chunks(seeds))
        .map(|(&size, errs)| {
            let mean = errs.iter().sum::<f64>() / errs.len() as f64;
            let std = if errs.len() > 1 {
                (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (errs.len() - 1) as f64)
                    .sqrt()
            } else {
                0.0
            };
            CurvePoint {
                size,
                mean_error: mean,
                std_error: std,
                errors: errs.to_vec(),
            }
        })
        .collect())
}
