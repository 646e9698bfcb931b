//! Uncertainty-accuracy and ECE curves over a grid of uncertainty thresholds.

use caldrop_core::metrics::{ece_report, uncertainty_confusion, uncertainty_metrics};
use serde::Serialize;

use crate::experiment::{ExperimentResult, Sample, Stat};

/// Per-sample results of one method, grouped by run.
#[derive(Debug, Clone)]
pub struct MethodSamples<'a> {
    pub method: String,
    pub runs: Vec<&'a [Sample]>,
}

impl<'a> MethodSamples<'a> {
    pub fn from_experiment(result: &'a ExperimentResult) -> Vec<Self> {
        result
            .methods
            .iter()
            .enumerate()
            .map(|(i, m)| MethodSamples {
                method: m.name.clone(),
                runs: result
                    .method_runs(i)
                    .map(|r| r.samples.as_slice())
                    .collect(),
            })
            .collect()
    }
}

/// One threshold of one method's curve.
///
/// The rate columns are means over runs of the per-run value (runs where it is
/// undefined are skipped; `None` when no run defines it). The count columns
/// pool every run. `ece` is the overall test-set ECE and does not depend on
/// the threshold; `ece_certain` is the ECE of only the samples whose
/// normalized PE is at or below the threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub threshold: f64,
    pub method: String,
    pub uacc: Option<f64>,
    pub usen: Option<f64>,
    pub uspe: Option<f64>,
    pub upre: Option<f64>,
    pub ece: Option<f64>,
    pub ece_certain: Option<f64>,
    pub tu: usize,
    pub tc: usize,
    pub fu: usize,
    pub fc: usize,
    pub uncertain: usize,
    pub total: usize,
}

pub fn sweep_thresholds(
    methods: &[MethodSamples<'_>],
    grid: &[f64],
    ece_bins: usize,
) -> caldrop_core::Result<Vec<CurveRow>> {
    let mut rows = Vec::with_capacity(methods.len() * grid.len());
    for m in methods {
        let split: Vec<(Vec<bool>, Vec<f64>, Vec<f64>)> = m
            .runs
            .iter()
            .map(|run| {
                (
                    run.iter().map(|s| s.correct).collect(),
                    run.iter().map(|s| s.pe_normalized).collect(),
                    run.iter().map(|s| s.confidence).collect(),
                )
            })
            .collect();
        let overall = Stat::of(
            split
                .iter()
                .filter(|(c, ..)| !c.is_empty())
                .map(|(c, _, conf)| ece_report(conf, c, ece_bins).ok().map(|r| r.ece)),
        );
        for &t in grid {
            let mut row = CurveRow {
                threshold: t,
                method: m.method.clone(),
                uacc: None,
                usen: None,
                uspe: None,
                upre: None,
                ece: overall.mean,
                ece_certain: None,
                tu: 0,
                tc: 0,
                fu: 0,
                fc: 0,
                uncertain: 0,
                total: 0,
            };
            let mut per_run = Vec::with_capacity(split.len());
            let mut certain_ece = Vec::with_capacity(split.len());
            for (correct, unc, conf) in &split {
                let cm = uncertainty_confusion(correct, unc, t)?;
                row.tu += cm.tu;
                row.tc += cm.tc;
                row.fu += cm.fu;
                row.fc += cm.fc;
                per_run.push(uncertainty_metrics(&cm));
                let (c, k): (Vec<f64>, Vec<bool>) = conf
                    .iter()
                    .zip(correct)
                    .zip(unc)
                    .filter(|(_, &u)| u <= t)
                    .map(|((&c, &k), _)| (c, k))
                    .unzip();
                certain_ece.push(if c.is_empty() {
                    None
                } else {
                    Some(ece_report(&c, &k, ece_bins)?.ece)
                });
            }
            row.uacc = Stat::of(per_run.iter().map(|u| u.uacc)).mean;
            row.usen = Stat::of(per_run.iter().map(|u| u.usen)).mean;
            row.uspe = Stat::of(per_run.iter().map(|u| u.uspe)).mean;
            row.upre = Stat::of(per_run.iter().map(|u| u.upre)).mean;
            row.ece_certain = Stat::of(certain_ece).mean;
            row.uncertain = row.tu + row.fu;
            row.total = row.tu + row.tc + row.fu + row.fc;
            rows.push(row);
        }
    }
    Ok(rows)
}
