//! Value types for combination data and their file formats.
//!
//! Labels are 0-based everywhere, including on disk. The CSV layout is
//!
//! ```text
//! human_label,true_label,p_0,...,p_{K-1}
//! ```
//!
//! with an empty `true_label` for rows without ground truth. JSONL rows are
//! objects `{"h": int, "y": int | null, "m": [K floats]}`; extra keys are
//! ignored so rows may carry metadata.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::format_float;
use crate::numeric::{argmax, floor_normalize, EPS};

/// Allowed deviation of a raw probability vector's sum from 1.
pub const SUM_TOLERANCE: f64 = 1e-6;

/// Default slack for tiny negative entries produced by upstream rounding.
pub const NEGATIVE_TOLERANCE: f64 = 1e-9;

/// Number of classes `K`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    k: usize,
}

impl LabelSpace {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidLabelSpace(k));
        }
        Ok(Self { k })
    }

    pub fn k(self) -> usize {
        self.k
    }

    pub fn check(self, label: usize) -> Result<usize> {
        if label < self.k {
            Ok(label)
        } else {
            Err(Error::LabelOutOfRange { label, k: self.k })
        }
    }
}

/// A probability vector over the label space: nonnegative, sums to one.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validate a raw vector; see [`validate_prob_vector`].
    pub fn new(raw: &[f64], k: usize) -> Result<Self> {
        validate_prob_vector(raw, k, NEGATIVE_TOLERANCE)
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    /// Normalize nonnegative weights. The caller guarantees a positive total.
    pub(crate) fn from_weights(mut weights: Vec<f64>) -> Self {
        let total: f64 = weights.iter().sum();
        debug_assert!(total > 0.0 && total.is_finite());
        for w in &mut weights {
            *w /= total;
        }
        Self(weights)
    }

    /// Softmax of log-weights.
    pub(crate) fn from_log_weights(mut z: Vec<f64>) -> Self {
        crate::numeric::softmax_in_place(&mut z);
        Self(z)
    }

    /// Wrap a vector that is already normalized (internal use only).
    pub(crate) fn from_normalized(v: Vec<f64>) -> Self {
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }

    /// Predicted label; ties go to the smallest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn confidence(&self) -> f64 {
        self.0[self.argmax()]
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Check a raw vector and return it floored at `EPS` and renormalized.
///
/// A vector that already sums to one within a few ulps with no entry below
/// `EPS` is returned unchanged.
///
/// Entries below `-tolerance` are rejected, as is any vector whose sum is more
/// than `1e-6` away from one.
pub fn validate_prob_vector(raw: &[f64], k: usize, tolerance: f64) -> Result<ProbVector> {
    LabelSpace::new(k)?;
    if raw.len() != k {
        return Err(Error::WrongLength {
            expected: k,
            got: raw.len(),
        });
    }
    for (index, &value) in raw.iter().enumerate() {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "probability entry {index} is {value}"
            )));
        }
        if value < -tolerance {
            return Err(Error::NegativeEntry { index, value });
        }
    }
    let sum: f64 = raw.iter().map(|x| x.max(0.0)).sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::BadSum { sum });
    }
    let mut v = raw.to_vec();
    // Already-normalized input passes through bit-for-bit, so a saved dataset
    // reloads unchanged.
    let exact = 8.0 * k as f64 * f64::EPSILON;
    if (sum - 1.0).abs() > exact || v.iter().any(|&x| x < EPS) {
        floor_normalize(&mut v);
    }
    debug_assert!(v.iter().all(|&x| x >= EPS));
    Ok(ProbVector(v))
}

/// One observation: the labeler's vote, the model's probabilities and, when
/// known, the true class.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub human_label: usize,
    pub model_probs: ProbVector,
    pub true_label: Option<usize>,
}

impl Example {
    pub fn new(human_label: usize, model_probs: ProbVector, true_label: Option<usize>) -> Self {
        Self {
            human_label,
            model_probs,
            true_label,
        }
    }
}

/// Validated, immutable collection of [`Example`] rows sharing one label space.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinationDataset {
    space: LabelSpace,
    rows: Vec<Example>,
    supervised_count: usize,
}

impl CombinationDataset {
    pub fn new(k: usize, rows: Vec<Example>) -> Result<Self> {
        let space = LabelSpace::new(k)?;
        for row in &rows {
            space.check(row.human_label)?;
            if let Some(y) = row.true_label {
                space.check(y)?;
            }
            if row.model_probs.len() != k {
                return Err(Error::WrongLength {
                    expected: k,
                    got: row.model_probs.len(),
                });
            }
        }
        let supervised_count = rows.iter().filter(|r| r.true_label.is_some()).count();
        Ok(Self {
            space,
            rows,
            supervised_count,
        })
    }

    pub fn space(&self) -> LabelSpace {
        self.space
    }

    pub fn k(&self) -> usize {
        self.space.k()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Example] {
        &self.rows
    }

    pub fn supervised_count(&self) -> usize {
        self.supervised_count
    }

    pub fn is_fully_supervised(&self) -> bool {
        self.supervised_count == self.rows.len()
    }

    /// `(human, probs, truth)` for rows carrying a true label.
    pub fn supervised(&self) -> impl Iterator<Item = (usize, &ProbVector, usize)> + '_ {
        self.rows
            .iter()
            .filter_map(|r| r.true_label.map(|y| (r.human_label, &r.model_probs, y)))
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let rows: Vec<Example> = indices.iter().map(|&i| self.rows[i].clone()).collect();
        let supervised_count = rows.iter().filter(|r| r.true_label.is_some()).count();
        Self {
            space: self.space,
            rows,
            supervised_count,
        }
    }

    /// Copy with every true label removed.
    pub fn without_truth(&self) -> Self {
        let rows = self
            .rows
            .iter()
            .map(|r| Example {
                true_label: None,
                ..r.clone()
            })
            .collect();
        Self {
            space: self.space,
            rows,
            supervised_count: 0,
        }
    }

    /// Accuracy of `argmax m` on supervised rows, if any.
    pub fn model_accuracy(&self) -> Option<f64> {
        accuracy_of(self.supervised().map(|(_, m, y)| m.argmax() == y))
    }

    /// Accuracy of the human label on supervised rows, if any.
    pub fn human_accuracy(&self) -> Option<f64> {
        accuracy_of(self.supervised().map(|(h, _, y)| h == y))
    }
}

fn accuracy_of(hits: impl Iterator<Item = bool>) -> Option<f64> {
    let (mut n, mut ok) = (0usize, 0usize);
    for hit in hits {
        n += 1;
        ok += usize::from(hit);
    }
    (n > 0).then(|| ok as f64 / n as f64)
}

/// On-disk dataset encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Jsonl,
}

impl DataFormat {
    /// `.jsonl` / `.ndjson` select JSONL; everything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => DataFormat::Jsonl,
            _ => DataFormat::Csv,
        }
    }
}

impl std::str::FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(DataFormat::Csv),
            "jsonl" => Ok(DataFormat::Jsonl),
            other => Err(Error::ConfigInvalid(format!(
                "unknown data format `{other}`"
            ))),
        }
    }
}

pub fn load_dataset(path: &Path, format: DataFormat) -> Result<CombinationDataset> {
    let file = File::open(path)?;
    match format {
        DataFormat::Csv => read_csv(BufReader::new(file)),
        DataFormat::Jsonl => read_jsonl(BufReader::new(file)),
    }
}

pub fn save_dataset(data: &CombinationDataset, path: &Path, format: DataFormat) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    match format {
        DataFormat::Csv => write_csv(data, &mut out)?,
        DataFormat::Jsonl => write_jsonl(data, &mut out)?,
    }
    out.flush()?;
    Ok(())
}

fn parse_error(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

pub fn read_csv<R: std::io::Read>(reader: R) -> Result<CombinationDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 4 || &header[0] != "human_label" || &header[1] != "true_label" {
        return Err(parse_error(
            1,
            "header must start with `human_label,true_label,p_0,p_1`",
        ));
    }
    for (j, name) in header.iter().skip(2).enumerate() {
        if name != format!("p_{j}") {
            return Err(parse_error(
                1,
                format!("expected column `p_{j}`, found `{name}`"),
            ));
        }
    }
    let k = header.len() - 2;
    let space = LabelSpace::new(k)?;

    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(Error::InconsistentK {
                line,
                expected: k,
                got: record.len().saturating_sub(2),
            });
        }
        let human = parse_label(&record[0], line, space)?;
        let truth = match record[1].trim() {
            "" => None,
            s => Some(parse_label(s, line, space)?),
        };
        let raw = record
            .iter()
            .skip(2)
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| parse_error(line, format!("bad probability `{s}`: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        let probs = ProbVector::new(&raw, k).map_err(|e| parse_error(line, e.to_string()))?;
        rows.push(Example::new(human, probs, truth));
    }
    CombinationDataset::new(k, rows)
}

fn parse_label(s: &str, line: u64, space: LabelSpace) -> Result<usize> {
    let label: usize = s
        .trim()
        .parse()
        .map_err(|e| parse_error(line, format!("bad label `{s}`: {e}")))?;
    space
        .check(label)
        .map_err(|e| parse_error(line, e.to_string()))
}

#[derive(Deserialize)]
struct JsonRow {
    h: usize,
    y: Option<usize>,
    m: Vec<f64>,
}

pub fn read_jsonl<R: BufRead>(reader: R) -> Result<CombinationDataset> {
    let mut k: Option<usize> = None;
    let mut rows = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx as u64 + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonRow =
            serde_json::from_str(&line).map_err(|e| parse_error(line_no, e.to_string()))?;
        let k = *k.get_or_insert(row.m.len());
        if row.m.len() != k {
            return Err(Error::InconsistentK {
                line: line_no,
                expected: k,
                got: row.m.len(),
            });
        }
        let space = LabelSpace::new(k).map_err(|e| parse_error(line_no, e.to_string()))?;
        space
            .check(row.h)
            .map_err(|e| parse_error(line_no, e.to_string()))?;
        if let Some(y) = row.y {
            space
                .check(y)
                .map_err(|e| parse_error(line_no, e.to_string()))?;
        }
        let probs = ProbVector::new(&row.m, k).map_err(|e| parse_error(line_no, e.to_string()))?;
        rows.push(Example::new(row.h, probs, row.y));
    }
    let k = k.ok_or(Error::EmptyDataset)?;
    CombinationDataset::new(k, rows)
}

pub fn write_csv<W: Write>(data: &CombinationDataset, out: &mut W) -> Result<()> {
    let mut header = String::from("human_label,true_label");
    for j in 0..data.k() {
        header.push_str(&format!(",p_{j}"));
    }
    writeln!(out, "{header}")?;
    for row in data.rows() {
        let truth = row.true_label.map(|y| y.to_string()).unwrap_or_default();
        write!(out, "{},{}", row.human_label, truth)?;
        for &p in row.model_probs.as_slice() {
            write!(out, ",{}", format_float(p))?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn write_jsonl<W: Write>(data: &CombinationDataset, out: &mut W) -> Result<()> {
    for row in data.rows() {
        let y = row
            .true_label
            .map(|y| y.to_string())
            .unwrap_or_else(|| "null".into());
        let m: Vec<String> = row
            .model_probs
            .as_slice()
            .iter()
            .map(|&p| format_float(p))
            .collect();
        writeln!(
            out,
            "{{\"h\":{},\"y\":{},\"m\":[{}]}}",
            row.human_label,
            y,
            m.join(",")
        )?;
    }
    Ok(())
}

/// Seeded shuffle into `(train, eval)` with `|eval| = round(eval_fraction * n)`.
///
/// Each side keeps the original row order.
pub fn split_dataset(
    data: &CombinationDataset,
    eval_fraction: f64,
    seed: u64,
) -> Result<(CombinationDataset, CombinationDataset)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::ConfigInvalid(format!(
            "eval_fraction must lie in (0, 1), got {eval_fraction}"
        )));
    }
    let n = data.len();
    let n_eval = (eval_fraction * n as f64).round() as usize;
    if n_eval == 0 || n_eval >= n {
        return Err(Error::EmptySplit { n, eval: n_eval });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (eval_idx, train_idx) = order.split_at_mut(n_eval);
    eval_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((data.subset(train_idx), data.subset(eval_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_vector_passes_through() {
        let p = ProbVector::new(&[0.5, 0.5], 2).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn zero_entry_is_floored() {
        let p = ProbVector::new(&[1.0, 0.0], 2).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-11);
        assert!(p[1] >= EPS && p[1] < 1.01e-12);
        assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bad_sum_rejected() {
        let err = ProbVector::new(&[0.3, 0.3, 0.3], 3).unwrap_err();
        assert!(matches!(err, Error::BadSum { .. }));
    }

    #[test]
    fn negative_and_length_errors() {
        assert!(matches!(
            ProbVector::new(&[1.1, -0.1], 2).unwrap_err(),
            Error::NegativeEntry { index: 1, .. }
        ));
        assert!(matches!(
            ProbVector::new(&[0.5, 0.5], 3).unwrap_err(),
            Error::WrongLength {
                expected: 3,
                got: 2
            }
        ));
        assert!(matches!(
            ProbVector::new(&[1.0], 1).unwrap_err(),
            Error::InvalidLabelSpace(1)
        ));
    }

    #[test]
    fn near_one_sum_is_renormalized() {
        let p = ProbVector::new(&[0.6, 0.4 + 5e-7], 2).unwrap();
        assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn csv_schema_example() {
        let text = "human_label,true_label,p_0,p_1\n0,1,0.2,0.8\n";
        let data = read_csv(text.as_bytes()).unwrap();
        assert_eq!(data.k(), 2);
        assert_eq!(data.len(), 1);
        assert_eq!(data.supervised_count(), 1);
        assert_eq!(data.rows()[0].true_label, Some(1));
    }

    #[test]
    fn csv_empty_truth_is_unsupervised() {
        let text = "human_label,true_label,p_0,p_1\n0,,0.2,0.8\n";
        let data = read_csv(text.as_bytes()).unwrap();
        assert_eq!(data.supervised_count(), 0);
    }

    #[test]
    fn csv_label_out_of_range_reports_line() {
        let text = "human_label,true_label,p_0,p_1\n0,1,0.2,0.8\n5,0,0.2,0.8\n";
        match read_csv(text.as_bytes()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_inconsistent_k() {
        let text = "human_label,true_label,p_0,p_1\n0,1,0.2,0.3,0.5\n";
        assert!(matches!(
            read_csv(text.as_bytes()).unwrap_err(),
            Error::InconsistentK {
                line: 2,
                expected: 2,
                got: 3
            }
        ));
    }

    #[test]
    fn jsonl_reads_nulls_and_metadata() {
        let text = "{\"h\":1,\"y\":null,\"m\":[0.1,0.9],\"id\":\"img-7\"}\n\n{\"h\":0,\"y\":0,\"m\":[0.7,0.3]}\n";
        let data = read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(data.len(), 2);
        assert_eq!(data.supervised_count(), 1);
    }

    #[test]
    fn jsonl_inconsistent_k() {
        let text = "{\"h\":1,\"y\":0,\"m\":[0.1,0.9]}\n{\"h\":0,\"y\":0,\"m\":[0.7,0.2,0.1]}\n";
        assert!(matches!(
            read_jsonl(text.as_bytes()).unwrap_err(),
            Error::InconsistentK { line: 2, .. }
        ));
    }

    fn toy(n: usize) -> CombinationDataset {
        let rows = (0..n)
            .map(|i| {
                Example::new(
                    i % 2,
                    ProbVector::new(&[0.25, 0.75], 2).unwrap(),
                    Some(i % 2),
                )
            })
            .collect();
        CombinationDataset::new(2, rows).unwrap()
    }

    #[test]
    fn split_sizes() {
        let (train, eval) = split_dataset(&toy(10), 0.3, 1).unwrap();
        assert_eq!((train.len(), eval.len()), (7, 3));
        let (train, eval) = split_dataset(&toy(2), 0.5, 1).unwrap();
        assert_eq!((train.len(), eval.len()), (1, 1));
    }

    #[test]
    fn split_rejects_empty_side() {
        assert!(matches!(
            split_dataset(&toy(2), 0.1, 1).unwrap_err(),
            Error::EmptySplit { .. }
        ));
    }
}
