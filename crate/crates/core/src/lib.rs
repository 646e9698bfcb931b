//! Small dropout classifiers trained with calibration-aware losses, and the
//! uncertainty measures used to evaluate them.
//!
//! The numeric code is generic over [`Scalar`] (`f32` or `f64`). The
//! experiments run in double precision; the `*64` aliases below name those
//! instantiations.
//!
//! - [`numerics`]: matrices, softmax, ReLU, finite-difference gradients
//! - [`network`]: fully connected ReLU network with inverted dropout
//! - [`losses`]: cross-entropy, `+ mean predictive entropy`, `+ ECE`
//! - [`metrics`]: predictive entropy, ECE report, uncertainty confusion matrix
//! - [`datagen`]: two moons, Gaussian blobs, train/test split
//! - [`predictors`]: training loop, MC-Dropout inference, deep ensembles

pub mod datagen;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod predictors;
pub mod scalar;

pub use datagen::{blobs, split, two_moons, Dataset, DatasetMeta};
pub use error::{Error, Result};
pub use losses::{LossKind, LossSpec};
pub use metrics::{
    ece_report, group_stats, predictive_entropy, uncertainty_confusion, uncertainty_metrics,
    EceReport, GroupStats, UncertaintyConfusion, UncertaintyMetrics,
};
pub use network::{BackwardScratch, DropoutMask, ForwardMode, ForwardPass, Gradients, Network};
pub use numerics::{Matrix, ProbVector};
pub use predictors::{
    build_and_train_ensemble, derive_seed, ensemble_predict, mc_predict, train, Ensemble,
    EnsembleConfig, PredictiveDistribution, TrainConfig,
};
pub use scalar::Scalar;

pub type Matrix64 = Matrix<f64>;
pub type ProbVector64 = ProbVector<f64>;
pub type Network64 = Network<f64>;
pub type Gradients64 = Gradients<f64>;
pub type EceReport64 = EceReport<f64>;
pub type Ensemble64 = Ensemble<f64>;
pub type PredictiveDistribution64 = PredictiveDistribution<f64>;

pub type Network32 = Network<f32>;
pub type Matrix32 = Matrix<f32>;
