#![allow(dead_code)]

use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// (subcommand, directory of its report) in pipeline order.
pub const STAGES: [(&str, &str); 7] = [
    ("generate", "cohort"),
    ("curate", "curate"),
    ("train-detector", "detect"),
    ("train-classifier", "classify"),
    ("infer", "infer"),
    ("eval", "eval"),
    ("reader-study", "reader_study"),
];

pub fn klgrade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_klgrade"))
        .args(args)
        .env("KLP_THREADS", "1")
        .output()
        .expect("klgrade binary runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A pipeline small enough for tests: 150 patients with most of them in
/// the test split, so the 204-case reader study fits.
pub fn tiny_config(output_dir: &Path, reader_noise: bool) -> String {
    serde_json::json!({
        "output_dir": output_dir,
        "phantom": {"n_patients": 150},
        "curate": {"split_fractions": [0.1, 0.1, 0.8]},
        "detect": {
            "model": {"input_size": 128, "grid": 4, "max_epochs": 2, "patience": 2},
            "train_knees": 8, "val_knees": 4, "test_knees": 6
        },
        "classify": {
            "model": {
                "input_size": 32, "branch_widths": [4, 8], "trunk_widths": [8], "hidden": 8,
                "max_epochs": 2, "warmup_epochs": 1, "restarts": 2, "epoch_size": 32,
                "learning_rate": 0.001
            }
        },
        "eval": {"reader_noise": reader_noise},
        "seeds": {"base": 7}
    })
    .to_string()
}

pub fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn schema() -> Value {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas/report.schema.json");
    serde_json::from_str(&std::fs::read_to_string(p).expect("schema file")).expect("schema is JSON")
}

/// Validates a report against the published schema; returns the messages.
pub fn schema_errors(report: &Value) -> Vec<String> {
    let validator = jsonschema::validator_for(&schema()).expect("schema compiles");
    validator.iter_errors(report).map(|e| format!("{} at {}", e, e.instance_path)).collect()
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display())))
        .unwrap()
}

pub fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    rdr.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect()
}
