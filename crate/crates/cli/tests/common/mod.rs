#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use dynflow_cli::ExperimentConfig;
use serde_json::Value;

pub fn config(text: &str) -> ExperimentConfig {
    ExperimentConfig::parse(text).unwrap()
}

pub fn harmonic(extra: &str) -> ExperimentConfig {
    config(&format!(
        "system = \"harmonic_oscillator\"\nz0 = [1.0, 0.0]\nT = 3.141592653589793\n{extra}"
    ))
}

/// Runs the binary and returns its exit code.
pub fn run_bin(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_dynflow"))
        .args(args)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

pub fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// CSV body as rows of numbers; empty and non-numeric cells become NaN.
pub fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let text = read(path);
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines
        .map(|l| l.split(',').map(|c| c.parse().unwrap_or(f64::NAN)).collect())
        .collect();
    (header, rows)
}

fn strip_wall(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("wall_time");
            map.values_mut().for_each(strip_wall);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_wall),
        _ => {}
    }
}

/// File contents with wall-time data removed: `wall_time` keys in JSON and
/// the `wall_ms` column in CSV.
pub fn without_wall_time(path: &Path) -> String {
    let text = read(path);
    let name = path.file_name().unwrap().to_string_lossy();
    if name.ends_with(".json") {
        let mut v: Value = serde_json::from_str(&text).unwrap();
        strip_wall(&mut v);
        return v.to_string();
    }
    let mut lines = text.lines();
    let Some(first) = lines.next() else { return text };
    let Some(col) = first.split(',').position(|c| c == "wall_ms") else {
        return text;
    };
    std::iter::once(first)
        .chain(lines)
        .map(|l| {
            let mut cells: Vec<&str> = l.split(',').collect();
            cells.remove(col);
            cells.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Every file of `dir`, keyed by name, with wall-time data removed.
pub fn dir_contents(dir: &Path) -> BTreeMap<String, String> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                without_wall_time(&p),
            )
        })
        .collect()
}
