use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use confide::analysis::{cmi_discrete, theorem1_report, theorem2_report};
use confide::domain::{load_dataset, save_dataset, split_dataset};
use confide::format::{format_float, to_json_string};
use confide::metrics::{reliability_bins, DEFAULT_BINS};
use confide::pipeline::{evaluate, predictions, VERSION};
use confide::simulate::{
    generate, learning_curve, read_oracle_csv, write_oracle_csv, SyntheticConfig,
};
use confide::{
    fit, CombinationDataset, CombinerParams, ConfusionMatrix, DataFormat, Error, ProbVector, Result,
};
use serde::Serialize;
use serde_json::Value;

use crate::args::{
    required, CombineArgs, DiagnoseArgs, EvaluateArgs, FitArgs, LearningCurveArgs, SimulateArgs,
    TheoryArgs,
};

/// Wrapper for every JSON report so a run can be reproduced from its output.
#[derive(Serialize)]
struct Report<'a, C: Serialize, R: Serialize> {
    command: &'static str,
    version: &'static str,
    config: &'a C,
    result: R,
}

fn emit<C: Serialize, R: Serialize>(
    command: &'static str,
    config: &C,
    result: R,
    out: Option<&Path>,
) -> Result<()> {
    let text = to_json_string(&Report {
        command,
        version: VERSION,
        config,
        result,
    })?;
    write_text(out, &text)
}

fn write_text(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text)?,
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn load(path: &Path) -> Result<CombinationDataset> {
    load_dataset(path, DataFormat::from_path(path))
}

fn load_params(path: &Path) -> Result<CombinerParams> {
    CombinerParams::from_json(&fs::read_to_string(path)?)
}

fn load_oracle(path: &Path, data: &CombinationDataset) -> Result<Vec<ProbVector>> {
    let oracle = read_oracle_csv(BufReader::new(File::open(path)?))?;
    if oracle.len() != data.len() {
        return Err(Error::LengthMismatch {
            left: data.len(),
            right: oracle.len(),
        });
    }
    if let Some(p) = oracle.first().filter(|p| p.len() != data.k()) {
        return Err(Error::WrongLength {
            expected: data.k(),
            got: p.len(),
        });
    }
    Ok(oracle)
}

fn oracle_path(data: &Path) -> PathBuf {
    let stem = data.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    data.with_file_name(format!("{stem}.oracle.csv"))
}

pub fn simulate(args: &SimulateArgs, log: &dyn Fn(&str)) -> Result<()> {
    let k = args.k.unwrap_or(10);
    let phi_star = match (&args.phi_star, args.phi_diag) {
        (Some(_), Some(_)) => {
            return Err(Error::ConfigInvalid(
                "give phi_star or phi_diag, not both".into(),
            ))
        }
        (Some(rows), None) => ConfusionMatrix::from_rows(rows)?,
        (None, diag) => {
            let diag = diag.unwrap_or(0.95);
            if !(0.0..=1.0).contains(&diag) {
                return Err(Error::ConfigInvalid(format!(
                    "phi_diag must lie in [0, 1], got {diag}"
                )));
            }
            ConfusionMatrix::symmetric(k, diag)
        }
    };
    let mut config = SyntheticConfig::symmetric(
        k,
        args.n.unwrap_or(10_000),
        0.95,
        args.t_star.unwrap_or(2.5),
        0,
    );
    config.phi_star = phi_star;
    if let Some(prior) = &args.class_prior {
        config.class_prior = prior.clone();
    }
    config.concentration = args.concentration.unwrap_or(config.concentration);
    config.rho = args.rho.unwrap_or(0.0);
    config.seed = args.seed.unwrap_or(0);

    let out = required(&args.out, "out")?;
    let synthetic = generate(&config)?;
    log(&format!("generated {} rows", synthetic.data.len()));
    save_dataset(&synthetic.data, out, DataFormat::from_path(out))?;
    let oracle_out = args.oracle_out.clone().unwrap_or_else(|| oracle_path(out));
    let mut w = BufWriter::new(File::create(&oracle_out)?);
    write_oracle_csv(&synthetic.oracle, &mut w)?;
    w.flush()?;
    emit("simulate", args, &config, None)
}

pub fn fit_cmd(args: &FitArgs, log: &dyn Fn(&str)) -> Result<()> {
    let method = *required(&args.method, "method")?;
    let data = load(required(&args.train, "train")?)?;
    let out = required(&args.out, "out")?;
    let config = args.fit.to_config()?;
    log(&format!("fitting {method} on {} rows", data.len()));
    let (params, trace) = fit(&data, method, &config)?;
    if let Some(trace) = trace {
        log(&format!(
            "em: {} iterations, converged={}",
            trace.iterations, trace.converged
        ));
    }
    fs::write(out, params.to_json()?)?;
    Ok(())
}

pub fn combine(args: &CombineArgs) -> Result<()> {
    let params = load_params(required(&args.params, "params")?)?;
    let data = load(required(&args.data, "data")?)?;
    let p = predictions(&params, &data)?;
    let mut text = String::from("row,label");
    for j in 0..data.k() {
        text.push_str(&format!(",q_{j}"));
    }
    text.push('\n');
    for (i, q) in p.combined.iter().enumerate() {
        text.push_str(&format!("{i},{}", q.argmax()));
        for &x in q.as_slice() {
            text.push(',');
            text.push_str(&format_float(x));
        }
        text.push('\n');
    }
    write_text(args.out.as_deref(), &text)
}

pub fn evaluate_cmd(args: &EvaluateArgs) -> Result<()> {
    let params = load_params(required(&args.params, "params")?)?;
    let data = load(required(&args.data, "data")?)?;
    let bins = args.bins.unwrap_or(DEFAULT_BINS);
    let oracle = args
        .oracle
        .as_deref()
        .map(|p| load_oracle(p, &data))
        .transpose()?;
    let phi_true = args.phi_true.as_deref().map(read_phi_true).transpose()?;
    let report = evaluate(&params, &data, bins, oracle.as_deref(), phi_true.as_ref())?;
    if let Some(path) = &args.reliability_out {
        let labeled: Vec<usize> = (0..data.len())
            .filter(|&i| data.rows()[i].true_label.is_some())
            .collect();
        let subset = data.subset(&labeled);
        let truth: Vec<usize> = subset.rows().iter().filter_map(|r| r.true_label).collect();
        let q = predictions(&params, &subset)?.combined;
        let mut text =
            String::from("bin,count,min_confidence,max_confidence,mean_confidence,accuracy\n");
        for b in reliability_bins(&q, &truth, bins)? {
            text.push_str(&format!(
                "{},{},{},{},{},{}\n",
                b.bin,
                b.count,
                format_float(b.min_confidence),
                format_float(b.max_confidence),
                format_float(b.mean_confidence),
                format_float(b.accuracy)
            ));
        }
        fs::write(path, text)?;
    }
    emit("evaluate", args, report, args.out.as_deref())
}

pub fn learning_curve_cmd(args: &LearningCurveArgs, log: &dyn Fn(&str)) -> Result<()> {
    let method = *required(&args.method, "method")?;
    let seed = args.seed.unwrap_or(0);
    let (train, eval) = match (&args.data, &args.train, &args.eval) {
        (Some(data), None, None) => {
            split_dataset(&load(data)?, args.eval_fraction.unwrap_or(0.5), seed)?
        }
        (None, Some(train), Some(eval)) => (load(train)?, load(eval)?),
        _ => {
            return Err(Error::ConfigInvalid(
                "give either --data or both --train and --eval".into(),
            ))
        }
    };
    let sizes = args
        .sizes
        .clone()
        .unwrap_or_else(|| vec![10, 30, 100, 300, 1000]);
    let seeds = args.seeds.unwrap_or(25);
    if seeds == 0 || sizes.is_empty() {
        return Err(Error::ConfigInvalid(
            "need at least one size and one seed".into(),
        ));
    }
    log(&format!(
        "{} cells over {} train rows",
        sizes.len() * seeds,
        train.len()
    ));
    let curve = learning_curve(
        &train,
        &eval,
        method,
        &sizes,
        seeds,
        seed,
        &args.fit.to_config()?,
    )?;
    let mut text = String::from("method,size,mean_error,std_error,seeds\n");
    for point in &curve {
        text.push_str(&format!(
            "{method},{},{},{},{seeds}\n",
            point.size,
            format_float(point.mean_error),
            format_float(point.std_error)
        ));
    }
    write_text(args.out.as_deref(), &text)
}

pub fn diagnose(args: &DiagnoseArgs) -> Result<()> {
    let data = load(required(&args.data, "data")?)?;
    emit("diagnose", args, cmi_discrete(&data)?, args.out.as_deref())
}

fn read_phi_true(path: &Path) -> Result<ConfusionMatrix> {
    let value: Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let matrix = match value {
        Value::Object(mut map) => map
            .remove("phi_star")
            .or_else(|| {
                map.get_mut("result")
                    .and_then(|r| r.get_mut("phi_star"))
                    .map(Value::take)
            })
            .ok_or_else(|| {
                Error::ConfigInvalid(format!("{} has no `phi_star` key", path.display()))
            })?,
        other => other,
    };
    Ok(serde_json::from_value(matrix)?)
}

#[derive(Serialize)]
struct TheoryResult {
    accuracy_bounds: confide::analysis::BoundReport,
    weak_bound_respected: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    calibration_bound: Option<confide::analysis::Theorem2Report>,
}

pub fn theory(args: &TheoryArgs) -> Result<()> {
    let params = load_params(required(&args.params, "params")?)?;
    let data = load(required(&args.data, "data")?)?;
    let (phi, t) = params.product_rule().ok_or_else(|| {
        Error::ConfigInvalid(format!(
            "{} is not a product-rule combiner",
            params.method()
        ))
    })?;
    let accuracy_bounds = theorem1_report(&data, &phi, t)?;
    let calibration_bound = match (&args.oracle, &args.phi_true) {
        (Some(oracle), Some(phi_true)) => {
            let oracle = load_oracle(oracle, &data)?;
            Some(theorem2_report(
                &data,
                Some(&oracle),
                &read_phi_true(phi_true)?,
                &phi,
                t,
            )?)
        }
        (None, None) => None,
        (Some(_), None) => return Err(Error::ConfigInvalid("--oracle needs --phi-true".into())),
        (None, Some(_)) => return Err(Error::OracleRequired),
    };
    let result = TheoryResult {
        weak_bound_respected: accuracy_bounds.accuracy_respects_weak(),
        accuracy_bounds,
        calibration_bound,
    };
    emit("theory", args, result, args.out.as_deref())
}
