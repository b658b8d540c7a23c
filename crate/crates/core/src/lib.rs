//! Combining a probabilistic classifier with a categorical labeler.
//!
//! The model's probability vector is calibrated by temperature scaling and
//! multiplied by the labeler's confusion-matrix row for the observed vote.
//! Parameters can be fit from labeled rows (maximum likelihood, MAP, or a
//! Bayesian treatment of the temperature) or without any ground truth by EM.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod calibration;
pub mod combiner;
pub mod confusion;
pub mod domain;
pub mod em;
pub mod error;
pub mod format;
pub mod metrics;
pub mod numeric;
pub mod optimize;
pub mod pipeline;
pub mod simulate;

pub use calibration::{LogTempPrior, Temperature, TemperaturePosterior};
pub use combiner::{predict, Combiner, CombinerParams, Method};
pub use confusion::{ConfusionMatrix, DirichletPrior};
pub use domain::{CombinationDataset, DataFormat, Example, LabelSpace, ProbVector};
pub use error::{Error, Result};
pub use pipeline::{fit, FitConfig, FitMethod};
