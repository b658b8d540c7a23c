use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use confide::domain::{load_dataset, save_dataset};
use confide::DataFormat;
use serde_json::Value;

fn confide(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_confide"))
        .current_dir(dir)
        .args(args)
        .env_remove("CONFIDE_THREADS")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Vec<u8> {
    let out = confide(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out.stdout
}

/// Asserts failure and returns the single JSON error object from stderr.
fn fails(dir: &Path, args: &[&str]) -> Value {
    let out = confide(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    serde_json::from_slice(&out.stderr).expect("stderr holds exactly one JSON object")
}

fn json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn read_json(path: &Path) -> Value {
    json(&fs::read(path).unwrap())
}

fn simulate(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = vec![
        "simulate",
        "--k",
        "4",
        "--n",
        "3000",
        "--phi-diag",
        "0.85",
        "--t-star",
        "2",
        "--out",
        out,
    ];
    args.extend_from_slice(extra);
    ok(dir, &args);
}

#[test]
fn config_file_pipeline_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.json"), r#"{"k": 3, "n": 500, "t_star": 2.0, "phi_star": [[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]], "seed": 3}"#)
        .unwrap();
    let report = json(&ok(
        d,
        &[
            "simulate", "--config", "c.json", "--n", "800", "--out", "d.csv",
        ],
    ));
    assert_eq!(report["result"]["n"], 800);
    assert_eq!(report["result"]["seed"], 3);
    assert_eq!(
        load_dataset(&d.join("d.csv"), DataFormat::Csv)
            .unwrap()
            .len(),
        800
    );
    assert!(d.join("d.oracle.csv").exists());

    ok(
        d,
        &[
            "fit", "--method", "pl-map", "--train", "d.csv", "--out", "p.json",
        ],
    );
    let report = json(&ok(
        d,
        &[
            "evaluate", "--params", "p.json", "--data", "d.csv", "--bins", "10",
        ],
    ));
    assert_eq!(report["result"]["bins"], 10);
    for key in [
        "combination",
        "model_calibrated",
        "model_uncalibrated",
        "human",
    ] {
        assert!(report["result"][key]["error_rate"].is_number(), "{key}");
    }
    assert_eq!(report["version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn fit_writes_phi_temperature_and_meta() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "d.csv", &[]);
    ok(
        d,
        &[
            "fit",
            "--method",
            "pl-map",
            "--train",
            "d.csv",
            "--out",
            "p.json",
            "--prior-accuracy",
            "0.9",
            "--prior-strength",
            "10",
            "--temp-mu",
            "0.5",
            "--temp-sigma",
            "0.5",
        ],
    );
    let p = read_json(&d.join("p.json"));
    assert_eq!(p["method"], "PL");
    assert_eq!(p["phi"].as_array().unwrap().len(), 4);
    assert!(p["temperature"].as_f64().unwrap() > 0.0);
    assert_eq!(p["meta"]["config"]["prior_accuracy"], 0.9);
    assert_eq!(p["meta"]["fit_method"], "pl-map");
}

#[test]
fn em_fits_without_labels() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "d.csv", &[]);
    let unlabeled = load_dataset(&d.join("d.csv"), DataFormat::Csv)
        .unwrap()
        .without_truth();
    save_dataset(&unlabeled, &d.join("u.jsonl"), DataFormat::Jsonl).unwrap();
    ok(
        d,
        &[
            "fit",
            "--method",
            "pl-em-map",
            "--train",
            "u.jsonl",
            "--out",
            "p.json",
        ],
    );
    let p = read_json(&d.join("p.json"));
    assert_eq!(p["method"], "PL_EM");
    assert!(p["meta"]["em_trace"]["iterations"].as_u64().unwrap() >= 1);

    let err = fails(
        d,
        &[
            "fit", "--method", "pl-map", "--train", "u.jsonl", "--out", "q.json",
        ],
    );
    assert_eq!(err["error"], "NoSupervisedRows");
}

#[test]
fn lr_on_tiny_file_reports_too_few_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("tiny.csv"),
        "human_label,true_label,p_0,p_1,p_2\n0,0,0.7,0.2,0.1\n1,1,0.2,0.6,0.2\n",
    )
    .unwrap();
    let err = fails(
        d,
        &[
            "fit", "--method", "lr", "--train", "tiny.csv", "--out", "p.json",
        ],
    );
    assert_eq!(err["error"], "TooFewRows");
    assert!(err["message"].is_string());
    assert!(!d.join("p.json").exists());
}

#[test]
fn evaluate_reductions_at_extreme_confusion() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("d.csv"), "human_label,true_label,p_0,p_1\n0,0,0.9,0.1\n1,0,0.6,0.4\n1,1,0.3,0.7\n0,1,0.8,0.2\n0,0,0.55,0.45\n")
        .unwrap();
    fs::write(
        d.join("u.json"),
        r#"{"method": "PL", "k": 2, "phi": [[0.5, 0.5], [0.5, 0.5]], "temperature": 1.5}"#,
    )
    .unwrap();
    fs::write(
        d.join("i.json"),
        r#"{"method": "PL", "k": 2, "phi": [[1.0, 0.0], [0.0, 1.0]], "temperature": 1.5}"#,
    )
    .unwrap();

    let r = json(&ok(
        d,
        &[
            "evaluate", "--params", "u.json", "--data", "d.csv", "--bins", "2",
        ],
    ));
    assert_eq!(r["result"]["combination"], r["result"]["model_calibrated"]);
    let r = json(&ok(
        d,
        &[
            "evaluate", "--params", "i.json", "--data", "d.csv", "--bins", "2",
        ],
    ));
    assert_eq!(
        r["result"]["combination"]["error_rate"],
        r["result"]["human"]["error_rate"]
    );
}

#[test]
fn combination_nll_beats_each_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let regime = [
        "--k",
        "10",
        "--phi-diag",
        "0.95",
        "--t-star",
        "2.5",
        "--concentration",
        "0.2",
    ];
    let mut train = vec![
        "simulate",
        "--seed",
        "1",
        "--n",
        "1000",
        "--out",
        "train.csv",
    ];
    train.extend_from_slice(&regime);
    let mut eval = vec![
        "simulate", "--seed", "2", "--n", "5000", "--out", "eval.csv",
    ];
    eval.extend_from_slice(&regime);
    ok(d, &train);
    ok(d, &eval);
    ok(
        d,
        &[
            "fit",
            "--method",
            "pl-map",
            "--train",
            "train.csv",
            "--out",
            "p.json",
        ],
    );
    let r = json(&ok(
        d,
        &["evaluate", "--params", "p.json", "--data", "eval.csv"],
    ));
    let nll = |key: &str| r["result"][key]["nll"].as_f64().unwrap();
    assert!(nll("combination") <= nll("model_calibrated"));
    assert!(nll("combination") <= nll("model_uncalibrated"));
    assert!(nll("combination") <= nll("human"));
}

#[test]
fn learning_curve_has_one_row_per_size() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "train.csv", &["--seed", "1"]);
    simulate(d, "eval.csv", &["--seed", "2"]);
    let out = ok(
        d,
        &[
            "learning-curve",
            "--method",
            "pl-map",
            "--train",
            "train.csv",
            "--eval",
            "eval.csv",
            "--sizes",
            "10,30,100,300,1000",
            "--seeds",
            "25",
            "--out",
            "curve.csv",
        ],
    );
    assert!(out.is_empty());
    let text = fs::read_to_string(d.join("curve.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,size,mean_error,std_error,seeds");
    let sizes: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(sizes, ["10", "30", "100", "300", "1000"]);
    for line in &lines[1..] {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 5);
        assert!(cells[2].parse::<f64>().unwrap() >= 0.0 && cells[3].parse::<f64>().unwrap() >= 0.0);
    }

    let err = fails(
        d,
        &[
            "learning-curve",
            "--method",
            "pl-map",
            "--train",
            "train.csv",
            "--eval",
            "eval.csv",
            "--sizes",
            "5000",
        ],
    );
    assert_eq!(err["error"], "SizeTooLarge");
}

#[test]
fn theory_reports_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let sim = ok(
        d,
        &[
            "simulate",
            "--seed",
            "4",
            "--k",
            "4",
            "--n",
            "4000",
            "--phi-diag",
            "0.85",
            "--t-star",
            "2",
            "--out",
            "eval.csv",
        ],
    );
    fs::write(d.join("sim.json"), sim).unwrap();
    simulate(d, "train.csv", &["--seed", "5"]);
    ok(
        d,
        &[
            "fit",
            "--method",
            "pl-map",
            "--train",
            "train.csv",
            "--out",
            "p.json",
        ],
    );

    let r = json(&ok(
        d,
        &["theory", "--params", "p.json", "--data", "eval.csv"],
    ));
    let t1 = &r["result"]["accuracy_bounds"];
    let (acc, weak, slack) = (
        t1["empirical_accuracy"].as_f64().unwrap(),
        t1["bound_weak"].as_f64().unwrap(),
        t1["slack"].as_f64().unwrap(),
    );
    assert!(acc >= weak - slack);
    assert_eq!(r["result"]["weak_bound_respected"], true);
    assert!(r["result"].get("calibration_bound").is_none());

    let r = json(&ok(
        d,
        &[
            "theory",
            "--params",
            "p.json",
            "--data",
            "eval.csv",
            "--oracle",
            "eval.oracle.csv",
            "--phi-true",
            "sim.json",
        ],
    ));
    assert_eq!(r["result"]["calibration_bound"]["holds"], true);

    fs::write(
        d.join("lr.json"),
        r#"{"method": "LR", "k": 2, "lr_w": [[0, 0, 0, 0], [0, 0, 0, 0]], "lr_b": [0, 0]}"#,
    )
    .unwrap();
    assert_eq!(
        fails(d, &["theory", "--params", "lr.json", "--data", "eval.csv"])["error"],
        "ConfigInvalid"
    );
}

#[test]
fn combine_and_diagnose_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    simulate(d, "d.csv", &[]);
    ok(
        d,
        &[
            "fit", "--method", "sp", "--train", "d.csv", "--out", "p.json",
        ],
    );
    let text =
        String::from_utf8(ok(d, &["combine", "--params", "p.json", "--data", "d.csv"])).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "row,label,q_0,q_1,q_2,q_3");
    assert_eq!(lines.len(), 3001);
    let cells: Vec<f64> = lines[1]
        .split(',')
        .skip(2)
        .map(|c| c.parse().unwrap())
        .collect();
    assert!((cells.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let r = json(&ok(d, &["diagnose", "--data", "d.csv"]));
    assert!(r["result"]["cmi"].as_f64().unwrap() >= 0.0);
    assert_eq!(r["result"]["per_class_shift"].as_array().unwrap().len(), 4);
}

#[test]
fn failures_are_single_json_objects() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("bad.json"),
        r#"{"method": "pl-map", "prior_strenght": 3}"#,
    )
    .unwrap();
    let err = fails(
        d,
        &[
            "fit", "--config", "bad.json", "--train", "x.csv", "--out", "p.json",
        ],
    );
    assert_eq!(err["error"], "ConfigInvalid");
    assert!(err["message"].as_str().unwrap().contains("prior_strenght"));

    assert_eq!(
        fails(d, &["fit", "--method", "nope"])["error"],
        "UsageError"
    );
    assert_eq!(
        fails(
            d,
            &["evaluate", "--data", "missing.csv", "--params", "p.json"]
        )["error"],
        "Io"
    );
    assert_eq!(fails(d, &["diagnose"])["error"], "ConfigInvalid");

    fs::write(
        d.join("d.csv"),
        "human_label,true_label,p_0,p_1\n0,0,0.7,0.2\n",
    )
    .unwrap();
    let err = fails(d, &["diagnose", "--data", "d.csv"]);
    assert_eq!(err["error"], "ParseError");
    assert!(err["message"].as_str().unwrap().contains("line 2"), "{err}");

    let out = Command::new(env!("CARGO_BIN_EXE_confide"))
        .current_dir(d)
        .args(["diagnose", "--data", "d.csv"])
        .env("CONFIDE_THREADS", "0")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert_eq!(json(&out.stderr)["error"], "ConfigInvalid");
}
