//! Experiment configuration: a single JSON document with every default
//! embedded, so `{}` is a valid config.

use std::path::{Path, PathBuf};

use caldrop_core::datagen::DEFAULT_CENTERS;
use caldrop_core::{blobs, two_moons, Dataset, EnsembleConfig, LossKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

/// Learning rate of the built-in MC-Dropout methods. The core crate's SGD
/// default of 0.05 leaves these networks undertrained after 500 epochs.
pub const DEFAULT_LR: f64 = 1.0;

/// Learning rate of the built-in ensemble. Its members are wider and run
/// without dropout; from about 0.3 up some members lose a class entirely
/// on the blob data.
pub const DEFAULT_ENSEMBLE_LR: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    TwoMoons {
        n: usize,
        noise: f64,
    },
    Blobs {
        n: usize,
        std: f64,
        #[serde(default = "default_centers")]
        centers: Vec<[f64; 2]>,
    },
}

fn default_centers() -> Vec<[f64; 2]> {
    DEFAULT_CENTERS.to_vec()
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::TwoMoons {
            n: 1000,
            noise: 0.2,
        }
    }
}

impl DatasetSpec {
    /// The noise (moons) or standard deviation (blobs) parameter.
    pub fn level(&self) -> f64 {
        match self {
            DatasetSpec::TwoMoons { noise, .. } => *noise,
            DatasetSpec::Blobs { std, .. } => *std,
        }
    }

    pub fn with_level(&self, level: f64) -> Self {
        let mut out = self.clone();
        match &mut out {
            DatasetSpec::TwoMoons { noise, .. } => *noise = level,
            DatasetSpec::Blobs { std, .. } => *std = level,
        }
        out
    }

    pub fn n_classes(&self) -> usize {
        match self {
            DatasetSpec::TwoMoons { .. } => 2,
            DatasetSpec::Blobs { centers, .. } => centers.len(),
        }
    }

    pub fn generate(&self, seed: u64) -> caldrop_core::Result<Dataset> {
        match self {
            DatasetSpec::TwoMoons { n, noise } => two_moons(*n, *noise, seed),
            DatasetSpec::Blobs { n, std, centers } => blobs(*n, centers, *std, seed),
        }
    }

    /// Default sweep levels for this dataset family.
    pub fn default_levels(&self) -> Vec<f64> {
        match self {
            DatasetSpec::TwoMoons { .. } => vec![0.2, 0.225, 0.275],
            DatasetSpec::Blobs { .. } => vec![0.75, 0.8, 0.85],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    McDropout(TrainConfig),
    Ensemble(EnsembleConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: MethodKind,
}

impl MethodSpec {
    /// The built-in method called `name`, if there is one: `ce`, `ce_pe`,
    /// `ce_ece`, or `ensemble`.
    pub fn builtin(name: &str) -> Option<Self> {
        let mc = |kind| {
            MethodKind::McDropout(TrainConfig {
                lr: DEFAULT_LR,
                ..TrainConfig::with_loss(kind)
            })
        };
        let kind = match name {
            "ce" => mc(LossKind::Ce),
            "ce_pe" => mc(LossKind::CePe),
            "ce_ece" => mc(LossKind::CeEce),
            "ensemble" => MethodKind::Ensemble(EnsembleConfig {
                lr: DEFAULT_ENSEMBLE_LR,
                ..EnsembleConfig::default()
            }),
            _ => return None,
        };
        Some(Self {
            name: name.to_string(),
            kind,
        })
    }

    /// Human-readable label for plots.
    pub fn label(&self) -> String {
        match &self.kind {
            MethodKind::McDropout(t) => match t.loss.kind {
                LossKind::Ce => "MC-Dropout".into(),
                LossKind::CePe => "MC-Dropout + PE loss".into(),
                LossKind::CeEce => "MC-Dropout + ECE loss".into(),
            },
            MethodKind::Ensemble(e) => format!("Ensemble ({})", e.n_members),
        }
    }

    /// Copy with the output layer resized to `n_classes`.
    pub fn for_classes(&self, n_classes: usize) -> Self {
        let mut out = self.clone();
        if let MethodKind::McDropout(t) = &mut out.kind {
            if let Some(last) = t.layer_sizes.last_mut() {
                *last = n_classes;
            }
        }
        out
    }
}

fn default_methods() -> Vec<MethodSpec> {
    ["ce", "ce_pe", "ce_ece"]
        .iter()
        .map(|n| MethodSpec::builtin(n).expect("built-in"))
        .collect()
}

fn default_grid() -> Vec<f64> {
    (0..=50).map(|i| f64::from(i) / 50.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub test_fraction: f64,
    pub methods: Vec<MethodSpec>,
    pub n_runs: usize,
    /// Stochastic forward passes per test prediction.
    pub test_t: usize,
    pub threshold_grid: Vec<f64>,
    pub ece_bins: usize,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    /// Dataset levels visited by `sweep`; empty means the family default.
    pub sweep_levels: Vec<f64>,
    /// The experiment fails when more than this fraction of runs fail.
    pub max_failure_fraction: f64,
    pub histogram_bins: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            test_fraction: 0.3,
            methods: default_methods(),
            n_runs: 100,
            test_t: 100,
            threshold_grid: default_grid(),
            ece_bins: 10,
            master_seed: 0,
            output_dir: PathBuf::from("results"),
            sweep_levels: Vec::new(),
            max_failure_fraction: 0.1,
            histogram_bins: 20,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| BenchError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            BenchError::Config(msg) => BenchError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn levels(&self) -> Vec<f64> {
        if self.sweep_levels.is_empty() {
            self.dataset.default_levels()
        } else {
            self.sweep_levels.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(BenchError::Config(msg));
        if self.n_runs < 1 {
            return bad("n_runs must be >= 1".into());
        }
        if self.test_t < 1 {
            return bad("test_t must be >= 1".into());
        }
        if self.ece_bins < 1 {
            return bad("ece_bins must be >= 1".into());
        }
        if self.histogram_bins < 1 {
            return bad("histogram_bins must be >= 1".into());
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!(
                "test_fraction {} not in (0, 1)",
                self.test_fraction
            ));
        }
        if !(0.0..=1.0).contains(&self.max_failure_fraction) {
            return bad("max_failure_fraction must lie in [0, 1]".into());
        }
        if self.threshold_grid.is_empty() {
            return bad("threshold_grid is empty".into());
        }
        if self.threshold_grid.iter().any(|t| !(0.0..=1.0).contains(t))
            || self.threshold_grid.windows(2).any(|w| w[0] > w[1])
        {
            return bad("threshold_grid must be sorted ascending within [0, 1]".into());
        }
        match &self.dataset {
            DatasetSpec::TwoMoons { n, noise } => {
                if *n < 2 || !(*noise >= 0.0 && noise.is_finite()) {
                    return bad("two_moons needs n >= 2 and finite noise >= 0".into());
                }
            }
            DatasetSpec::Blobs { n, std, centers } => {
                if centers.len() < 2 || *n < centers.len() || !(*std > 0.0 && std.is_finite()) {
                    return bad("blobs needs >= 2 centers, n >= centers, and std > 0".into());
                }
            }
        }
        if self.methods.is_empty() {
            return bad("no methods configured".into());
        }
        let mut names: Vec<&str> = self.methods.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return bad("method names must be unique".into());
        }
        for m in &self.methods {
            let checked = match &m.kind {
                MethodKind::McDropout(t) => t.validate(),
                MethodKind::Ensemble(e) => e.validate(),
            };
            checked.map_err(|e| BenchError::Config(format!("method {}: {e}", m.name)))?;
        }
        Ok(())
    }

    /// The configured methods, optionally narrowed to `filter`. Names not in
    /// the config resolve to built-in methods.
    pub fn select_methods(&self, filter: &[String]) -> Result<Vec<MethodSpec>> {
        if filter.is_empty() {
            return Ok(self.methods.clone());
        }
        filter
            .iter()
            .map(|name| {
                self.methods
                    .iter()
                    .find(|m| &m.name == name)
                    .cloned()
                    .or_else(|| MethodSpec::builtin(name))
                    .ok_or_else(|| BenchError::Config(format!("unknown method {name:?}")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.threshold_grid.len(), 51);
        assert_eq!(cfg.threshold_grid[1], 0.02);
        assert_eq!(cfg.threshold_grid[50], 1.0);
        assert_eq!(cfg.n_runs, 100);
        assert_eq!(cfg.test_t, 100);
        let names: Vec<_> = cfg.methods.iter().map(|m| m.name.as_str()).collect();
        assert_eq!(names, ["ce", "ce_pe", "ce_ece"]);
    }

    #[test]
    fn round_trips_through_json() {
        let mut cfg = ExperimentConfig::default();
        cfg.methods.push(MethodSpec::builtin("ensemble").unwrap());
        cfg.dataset = DatasetSpec::Blobs {
            n: 300,
            std: 0.8,
            centers: default_centers(),
        };
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_configs() {
        for doc in [
            r#"{"n_runs": 0}"#,
            r#"{"threshold_grid": [0.5, 0.1]}"#,
            r#"{"threshold_grid": [1.5]}"#,
            r#"{"threshold_grid": []}"#,
            r#"{"bogus": 1}"#,
            r#"{"dataset": {"kind": "two_moons", "n": 1, "noise": 0.1}}"#,
            r#"{"dataset": {"kind": "spirals", "n": 10}}"#,
            r#"{"test_fraction": 1.0}"#,
            r#"{"methods": []}"#,
        ] {
            assert!(
                matches!(ExperimentConfig::from_json(doc), Err(BenchError::Config(_))),
                "{doc}"
            );
        }
    }

    #[test]
    fn method_filter_resolves_builtins() {
        let cfg = ExperimentConfig::default();
        let picked = cfg
            .select_methods(&["ce_ece".into(), "ensemble".into()])
            .unwrap();
        assert_eq!(picked[0].name, "ce_ece");
        assert!(matches!(picked[1].kind, MethodKind::Ensemble(_)));
        assert!(cfg.select_methods(&["nope".into()]).is_err());
    }

    #[test]
    fn levels_follow_dataset_family() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.levels(), [0.2, 0.225, 0.275]);
        cfg.dataset = DatasetSpec::Blobs {
            n: 90,
            std: 0.75,
            centers: default_centers(),
        };
        assert_eq!(cfg.levels(), [0.75, 0.8, 0.85]);
        assert_eq!(cfg.dataset.with_level(0.85).level(), 0.85);
    }
}
