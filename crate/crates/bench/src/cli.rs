//! The `caldrop` command line.

use std::path::{Path, PathBuf};

use caldrop_core::metrics::{EceReport, GroupStats};
use caldrop_core::{split, Dataset, DatasetMeta};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{ExperimentConfig, MethodSpec};
use crate::error::{BenchError, Result};
use crate::experiment::{
    check_failures, run_experiment, run_seeds, summarize, summarize_experiment, train_method,
    ExperimentResult, Model, RunOptions,
};
use crate::plot::plot_dir;
use crate::sweep::{sweep_thresholds, MethodSamples};
use crate::tables::{
    curves_file, ensure_writable, write_aggregate, write_curves, write_levels, write_runs,
    write_samples, write_summary, write_text, LevelRow, AGGREGATE_CSV, LEVELS_CSV, RUNS_CSV,
    SAMPLES_CSV, SUMMARY_JSON,
};

#[derive(Debug, Parser)]
#[command(
    name = "caldrop",
    version,
    about = "Calibration-aware MC-Dropout experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (JSON); built-in defaults when omitted
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Number of runs, overriding the config
    #[arg(long, global = true, value_name = "N")]
    pub runs: Option<usize>,
    /// Worker threads (0 = all cores)
    #[arg(long, global = true, value_name = "N", default_value_t = 0)]
    pub jobs: usize,
    /// Output directory, overriding the config
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Restrict to these methods (comma separated or repeated)
    #[arg(long, global = true, value_name = "NAME", value_delimiter = ',')]
    pub method: Vec<String>,
    /// No progress output
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured dataset and its train/test split as CSV
    GenerateData,
    /// Train one method on a dataset CSV and write model.json
    Train {
        #[arg(long, value_name = "CSV")]
        data: PathBuf,
    },
    /// Evaluate a saved model on a dataset CSV
    Evaluate {
        #[arg(long, value_name = "JSON")]
        model: PathBuf,
        #[arg(long, value_name = "CSV")]
        data: PathBuf,
    },
    /// Full multi-run experiment with tables and plots
    Run,
    /// The experiment at every configured dataset level
    Sweep,
    /// Render SVG plots from the tables in the output directory
    Plot,
}

impl Cli {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.common.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.common.seed {
            cfg.master_seed = s;
        }
        if let Some(r) = self.common.runs {
            cfg.n_runs = r;
        }
        if let Some(o) = &self.common.out {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            jobs: self.common.jobs,
            quiet: self.common.quiet,
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = cli.config()?;
    let out = cfg.output_dir.clone();
    if !matches!(cli.command, Command::Plot) {
        ensure_writable(&out)?;
    }
    match &cli.command {
        Command::GenerateData => generate_data(&cfg, &out),
        Command::Train { data } => {
            let method = single_method(&cfg, &cli.common.method)?;
            let train_set = read_dataset(data)?;
            let model = train_method(&method, &train_set, cfg.master_seed)?;
            write_text(&out.join("model.json"), &model.to_json()?)
        }
        Command::Evaluate { model, data } => evaluate(&cfg, model, data, &out),
        Command::Run => {
            let methods = cfg.select_methods(&cli.common.method)?;
            let result = run_experiment(&cfg, &cfg.dataset, &methods, &cli.options())?;
            write_run_outputs(&cfg, &result, &out)?;
            plot_dir(&out, cfg.histogram_bins)?;
            check_failures(&result, cfg.max_failure_fraction)
        }
        Command::Sweep => sweep(&cfg, &cli.common.method, &cli.options(), &out),
        Command::Plot => plot_dir(&out, cfg.histogram_bins).map(drop),
    }
}

fn single_method(cfg: &ExperimentConfig, filter: &[String]) -> Result<MethodSpec> {
    let mut methods = cfg.select_methods(filter)?;
    if methods.len() != 1 && !filter.is_empty() {
        return Err(BenchError::Config(
            "train takes exactly one --method".into(),
        ));
    }
    Ok(methods.swap_remove(0))
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|source| BenchError::Input {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Dataset::read_csv(std::io::BufReader::new(file), None)?)
}

fn write_dataset(path: &Path, d: &Dataset) -> Result<()> {
    let mut buf = Vec::new();
    d.write_csv(&mut buf).expect("writing to memory");
    write_text(path, &String::from_utf8(buf).expect("ascii"))
}

/// Writes `data.csv`, `train.csv`, `test.csv`, and `dataset.json`. The data
/// are those of run 0 of an experiment with the same seed.
fn generate_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let [data_seed, split_seed, ..] = run_seeds(cfg.master_seed, 0);
    let d = cfg.dataset.generate(data_seed)?;
    let (train, test) = split(&d, cfg.test_fraction, split_seed)?;
    write_dataset(&out.join("data.csv"), &d)?;
    write_dataset(&out.join("train.csv"), &train)?;
    write_dataset(&out.join("test.csv"), &test)?;
    let meta: &DatasetMeta = &d.meta;
    let mut json = serde_json::to_string_pretty(meta).expect("meta serializes");
    json.push('\n');
    write_text(&out.join("dataset.json"), &json)
}

#[derive(Serialize)]
struct EvalMetrics<'a> {
    n: usize,
    accuracy: f64,
    group: &'a GroupStats,
    ece: &'a EceReport<f64>,
}

/// Writes `predictions.csv` (one row per point) and `metrics.json`.
fn evaluate(cfg: &ExperimentConfig, model_path: &Path, data: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(model_path).map_err(|source| BenchError::Input {
        path: model_path.to_path_buf(),
        source,
    })?;
    let model = Model::from_json(&text)?;
    let d = read_dataset(data)?;
    let preds = model.predict(&d.features::<f64>(), cfg.test_t, cfg.master_seed)?;
    let run = summarize("model", &preds, &d.labels, cfg.ece_bins)?;

    let mut csv = String::from("pe,pe_normalized,confidence,predicted,label,correct\n");
    for (p, &y) in preds.iter().zip(&d.labels) {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.pe,
            p.pe_normalized,
            p.confidence(),
            p.predicted_class,
            y,
            u8::from(p.predicted_class == y)
        ));
    }
    write_text(&out.join("predictions.csv"), &csv)?;

    let metrics = EvalMetrics {
        n: d.len(),
        accuracy: run.accuracy,
        group: &run.group,
        ece: &run.ece,
    };
    let mut json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    json.push('\n');
    write_text(&out.join("metrics.json"), &json)
}

/// Every table of a single-level experiment.
pub fn write_run_outputs(
    cfg: &ExperimentConfig,
    result: &ExperimentResult,
    out: &Path,
) -> Result<()> {
    let summary = summarize_experiment(cfg, result);
    write_runs(&out.join(RUNS_CSV), result)?;
    write_samples(&out.join(SAMPLES_CSV), result)?;
    write_aggregate(&out.join(AGGREGATE_CSV), &summary.methods)?;
    write_summary(&out.join(SUMMARY_JSON), &summary)?;
    let curves = sweep_thresholds(
        &MethodSamples::from_experiment(result),
        &cfg.threshold_grid,
        cfg.ece_bins,
    )?;
    write_curves(&out.join(curves_file(result.level())), &curves)
}

/// Runs the experiment at each level, writing `runs_<level>.csv`,
/// `summary_<level>.json`, `curves_<level>.csv`, and `ece_levels.csv`.
fn sweep(cfg: &ExperimentConfig, filter: &[String], opts: &RunOptions, out: &Path) -> Result<()> {
    let methods = cfg.select_methods(filter)?;
    let mut level_rows = Vec::new();
    let mut failure = Ok(());
    for level in cfg.levels() {
        let dataset = cfg.dataset.with_level(level);
        let result = run_experiment(cfg, &dataset, &methods, opts)?;
        let summary = summarize_experiment(cfg, &result);
        write_runs(&out.join(format!("runs_{level}.csv")), &result)?;
        write_summary(&out.join(format!("summary_{level}.json")), &summary)?;
        let curves = sweep_thresholds(
            &MethodSamples::from_experiment(&result),
            &cfg.threshold_grid,
            cfg.ece_bins,
        )?;
        write_curves(&out.join(curves_file(level)), &curves)?;
        for m in &summary.methods {
            level_rows.push(LevelRow {
                level,
                method: m.method.clone(),
                ece_mean: m.ece.mean,
                ece_std: m.ece.std,
                accuracy_mean: m.accuracy.mean,
                n: m.ece.n,
            });
        }
        if failure.is_ok() {
            failure = check_failures(&result, cfg.max_failure_fraction);
        }
    }
    write_levels(&out.join(LEVELS_CSV), &level_rows)?;
    plot_dir(out, cfg.histogram_bins)?;
    failure
}
