//! Density aware evidential deep learning.
//!
//! An evidential classifier whose Dirichlet concentration is `exp(z)` during
//! training and `exp(s(x)·z)` at prediction time, where `s(x) ∈ [0, 1]` is the
//! clipped, min-max normalized log density of the input's features under a
//! class-conditional Gaussian model fitted after training. Far from the
//! training data `s → 0` and the prediction collapses to the uniform Dirichlet.
//!
//! Modules:
//! - [`dirichlet`]: closed-form Dirichlet quantities, the evidential loss and its gradient
//! - [`network`]: spectral-normalized dense feature extractor, classifier head, training loop
//! - [`density`]: Gaussian discriminant analysis in feature space
//! - [`predict`]: concentration parameterizations and uncertainty scores
//! - [`metrics`]: AUROC, average precision, Brier score, accuracy
//! - [`data`]: synthetic datasets, corruption, splits, IDX and CSV readers
//! - [`experiment`]: run configuration, evaluation protocol, landscape grids, ablations

#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod checkpoint;
pub mod data;
pub mod density;
pub mod dirichlet;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod predict;
pub mod special;

pub use checkpoint::Checkpoint;
pub use data::{CorruptionKind, CorruptionSpec, LabeledDataset};
pub use density::GdaModel;
pub use dirichlet::{ConcentrationVector, LossConfig, OneHotLabel};
pub use error::{Error, Result};
pub use experiment::{EvalReport, FittedModel, RunConfig, Variant};
pub use linalg::Matrix;
pub use metrics::ScoredBinarySet;
pub use network::{Architecture, EvidentialNetwork, Optimizer, TrainConfig, TrainHistory};
pub use predict::{Parameterization, PredictionOutput};
