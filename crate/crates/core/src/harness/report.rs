//! Files written by a run.
//!
//! * `metrics.jsonl`: one [`StepRecord`] per line.
//! * `summary.json`: the [`Summary`].
//! * `scales.csv`: `step` followed by one scale exponent column per parameter.
//! * `diagnostics.txt`: only for aborted runs.
//! * `checkpoint/`: final parameters, one file pair per parameter path.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::train::{RunResult, StepRecord, Summary};
use crate::error::{Error, Result};
use crate::nn::save_params;

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn json<T: serde::Serialize>(path: &Path, v: &T, pretty: bool) -> Result<String> {
    let r = if pretty { serde_json::to_string_pretty(v) } else { serde_json::to_string(v) };
    r.map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn metrics_jsonl(path: &Path, records: &[StepRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&json(path, r, false)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn scales_csv(paths: &[String], records: &[StepRecord]) -> String {
    let mut out = String::from("step");
    for p in paths {
        out.push(',');
        out.push_str(p);
    }
    out.push('\n');
    for r in records {
        let _ = write!(out, "{}", r.step);
        for p in paths {
            out.push(',');
            if let Some(Some(e)) = r.scale_exponents.get(p) {
                let _ = write!(out, "{e}");
            }
        }
        out.push('\n');
    }
    out
}

pub fn write_summary(dir: &Path, summary: &Summary) -> Result<()> {
    let path = dir.join("summary.json");
    let text = json(&path, summary, true)?;
    write(&path, &(text + "\n"))
}

pub fn write_run(dir: &Path, run: &RunResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics = dir.join("metrics.jsonl");
    write(&metrics, &metrics_jsonl(&metrics, &run.records)?)?;
    write_summary(dir, &run.summary)?;
    write(&dir.join("scales.csv"), &scales_csv(&run.paths, &run.records))?;
    let diag = dir.join("diagnostics.txt");
    match &run.diagnostics {
        Some(text) => write(&diag, text)?,
        None if diag.exists() => fs::remove_file(&diag).map_err(|e| Error::io(&diag, e))?,
        None => {}
    }
    save_params(&dir.join("checkpoint"), &run.paths, &run.params)
}
