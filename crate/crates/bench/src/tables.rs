//! CSV and JSON result files: writers for the experiment outputs and readers
//! for the `plot` command.
//!
//! Floats are written in Rust's shortest round-trip form, so reading a table
//! back yields the exact values that were aggregated. Undefined values are
//! empty cells.

use std::fmt::Display;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};
use crate::experiment::{ExperimentResult, MethodSummary, Summary};
use crate::sweep::CurveRow;

pub const RUNS_CSV: &str = "runs.csv";
pub const AGGREGATE_CSV: &str = "aggregate.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SAMPLES_CSV: &str = "samples.csv";
pub const LEVELS_CSV: &str = "ece_levels.csv";

/// `curves_<level>.csv`, with the level in shortest decimal form.
pub fn curves_file(level: f64) -> String {
    format!("curves_{level}.csv")
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn out_err(path: &Path) -> impl FnOnce(std::io::Error) -> BenchError + '_ {
    move |source| BenchError::Output {
        path: path.to_path_buf(),
        source,
    }
}

/// Creates `dir` and checks that a file can be written there.
pub fn ensure_writable(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(out_err(dir))?;
    let probe = dir.join(".caldrop-write-probe");
    File::create(&probe).map_err(out_err(&probe))?;
    std::fs::remove_file(&probe).map_err(out_err(&probe))
}

fn write_csv<R, I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let to_io = |e: csv::Error| BenchError::Output {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(to_io)?;
    w.write_record(header).map_err(to_io)?;
    for r in rows {
        w.write_record(r).map_err(to_io)?;
    }
    w.flush().map_err(out_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = File::create(path).map_err(out_err(path))?;
    f.write_all(text.as_bytes()).map_err(out_err(path))
}

fn row<const N: usize>(cells: [&dyn Display; N]) -> Vec<String> {
    cells.iter().map(|c| c.to_string()).collect()
}

pub fn write_runs(path: &Path, result: &ExperimentResult) -> Result<()> {
    let mut rows = Vec::new();
    for r in &result.runs {
        for (outcome, spec) in r.outcomes.iter().zip(&result.methods) {
            if let Ok(m) = outcome {
                rows.push(row([
                    &r.run,
                    &spec.name,
                    &m.accuracy,
                    &cell(m.group.mu_correct),
                    &cell(m.group.mu_incorrect),
                    &cell(m.group.distance),
                    &m.ece.ece,
                ]));
            }
        }
    }
    write_csv(
        path,
        &["run", "method", "accuracy", "mu1", "mu2", "distance", "ece"],
        rows,
    )
}

pub fn write_samples(path: &Path, result: &ExperimentResult) -> Result<()> {
    let mut rows = Vec::new();
    for r in &result.runs {
        for (outcome, spec) in r.outcomes.iter().zip(&result.methods) {
            if let Ok(m) = outcome {
                for s in &m.samples {
                    rows.push(row([
                        &r.run,
                        &spec.name,
                        &s.pe,
                        &s.pe_normalized,
                        &s.confidence,
                        &u8::from(s.correct),
                    ]));
                }
            }
        }
    }
    write_csv(
        path,
        &[
            "run",
            "method",
            "pe",
            "pe_normalized",
            "confidence",
            "correct",
        ],
        rows,
    )
}

pub fn write_aggregate(path: &Path, methods: &[MethodSummary]) -> Result<()> {
    let mut rows = Vec::new();
    for m in methods {
        for (name, s) in [
            ("accuracy", &m.accuracy),
            ("mu1", &m.mu1),
            ("mu2", &m.mu2),
            ("distance", &m.distance),
            ("ece", &m.ece),
        ] {
            rows.push(row([&m.method, &name, &cell(s.mean), &cell(s.std), &s.n]));
        }
    }
    write_csv(path, &["method", "metric", "mean", "std", "n"], rows)
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary).expect("summary serializes");
    text.push('\n');
    write_text(path, &text)
}

pub fn write_curves(path: &Path, rows: &[CurveRow]) -> Result<()> {
    write_csv(
        path,
        &[
            "threshold",
            "method",
            "uacc",
            "usen",
            "uspe",
            "upre",
            "ece",
            "ece_certain",
            "tu",
            "tc",
            "fu",
            "fc",
            "uncertain",
            "total",
        ],
        rows.iter().map(|r| {
            row([
                &r.threshold,
                &r.method,
                &cell(r.uacc),
                &cell(r.usen),
                &cell(r.uspe),
                &cell(r.upre),
                &cell(r.ece),
                &cell(r.ece_certain),
                &r.tu,
                &r.tc,
                &r.fu,
                &r.fc,
                &r.uncertain,
                &r.total,
            ])
        }),
    )
}

/// One row of `ece_levels.csv`: overall ECE of a method at one dataset level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub level: f64,
    pub method: String,
    pub ece_mean: Option<f64>,
    pub ece_std: Option<f64>,
    pub accuracy_mean: Option<f64>,
    pub n: usize,
}

pub fn write_levels(path: &Path, rows: &[LevelRow]) -> Result<()> {
    write_csv(
        path,
        &[
            "level",
            "method",
            "ece_mean",
            "ece_std",
            "accuracy_mean",
            "n",
        ],
        rows.iter().map(|r| {
            row([
                &r.level,
                &r.method,
                &cell(r.ece_mean),
                &cell(r.ece_std),
                &cell(r.accuracy_mean),
                &r.n,
            ])
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct RunRow {
    pub run: usize,
    pub method: String,
    pub accuracy: f64,
    pub mu1: Option<f64>,
    pub mu2: Option<f64>,
    pub distance: Option<f64>,
    pub ece: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct SampleRow {
    pub run: usize,
    pub method: String,
    pub pe: f64,
    pub pe_normalized: f64,
    pub confidence: f64,
    pub correct: u8,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CurveRecord {
    pub threshold: f64,
    pub method: String,
    pub uacc: Option<f64>,
    pub usen: Option<f64>,
    pub uspe: Option<f64>,
    pub upre: Option<f64>,
    pub ece: Option<f64>,
    pub ece_certain: Option<f64>,
    pub uncertain: usize,
    pub total: usize,
}

/// Reads a CSV table; a malformed row is reported by file and line.
pub fn read_table<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|source| BenchError::Input {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rdr = csv::Reader::from_reader(file);
    rdr.deserialize()
        .map(|rec| {
            rec.map_err(|e| BenchError::Table {
                path: path.to_path_buf(),
                row: e.position().map_or(0, |p| p.line() as usize),
                msg: match e.kind() {
                    csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
                    _ => e.to_string(),
                },
            })
        })
        .collect()
}

/// `curves_<level>.csv` files in `dir`, sorted by level.
pub fn find_curve_files(dir: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let entries = std::fs::read_dir(dir).map_err(|source| BenchError::Input {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut found = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|source| BenchError::Input {
                path: dir.to_path_buf(),
                source,
            })?
            .path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(level) = name
            .strip_prefix("curves_")
            .and_then(|s| s.strip_suffix(".csv"))
            .and_then(|s| s.parse::<f64>().ok())
        {
            found.push((level, path));
        }
    }
    found.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(found)
}

/// Distinct values of `key` in order of first appearance.
pub fn first_seen<'a, T>(rows: &'a [T], key: impl Fn(&'a T) -> &'a str) -> Vec<&'a str> {
    let mut out: Vec<&str> = Vec::new();
    for r in rows {
        let k = key(r);
        if !out.contains(&k) {
            out.push(k);
        }
    }
    out
}
