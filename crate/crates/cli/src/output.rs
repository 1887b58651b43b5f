//! CSV and JSON writers. Floats use Rust's shortest round-trip formatting,
//! so identical runs produce identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dynflow::training::TrainRecord;
use serde::Serialize;

use crate::CliError;

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf, CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_text(dir, name, &text)
}

pub fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}_{i}")).collect()
}

/// Header row plus one row per record; `None` cells are left empty.
pub fn csv(header: &[String], rows: impl IntoIterator<Item = Vec<Option<f64>>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row
            .iter()
            .map(|c| c.map(|v| v.to_string()).unwrap_or_default())
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// `iter, phase, L, L_1..D, wall_ms`.
pub fn history_csv(history: &[TrainRecord], dim: usize) -> String {
    let mut out = String::from("iter,phase,L");
    for name in numbered("L", dim) {
        out.push(',');
        out.push_str(&name);
    }
    out.push_str(",wall_ms\n");
    for r in history {
        let _ = write!(out, "{},{},{}", r.iter, r.phase, r.loss);
        for i in 0..dim {
            out.push(',');
            if let Some(c) = r.loss_components.get(i) {
                let _ = write!(out, "{c}");
            }
        }
        let _ = writeln!(out, ",{}", r.wall_time * 1e3);
    }
    out
}

/// Replaces non-finite values by `None`, which JSON writes as `null`.
pub fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}
