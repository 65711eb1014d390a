//! One-class anomaly detection over banks of pretrained features.
//!
//! A frozen memory bank supplies each query's K nearest normal neighbors by
//! cosine similarity. A learned square projection head maps the query and its
//! neighbors into an adaptive space, an attention block mixes the neighbors
//! into a normal representation, and the anomaly score is one minus the cosine
//! between the adapted query and that representation. Training minimizes the
//! same dissimilarity on normal data, with an alignment constraint to the
//! pretrained space that keeps the head away from the all-zero solution.

pub mod bank;
pub mod error;
mod format;
pub mod heatmap;
pub mod model;
pub mod objective;
pub mod optim;
pub mod scoring;
pub mod synthetic;
pub mod trainer;

pub use bank::{FeatureSet, FeatureVector, MemoryBank, NeighborSet};
pub use error::{CapError, Result};
pub use model::{forward, init_model, ForwardOutput, HeadVariant, ModelParams};
pub use objective::{gradients, GradientSet, LossBreakdown, ObjectiveConfig};
pub use optim::{AdamConfig, OptimizerState};
pub use scoring::{anomaly_score, auroc, AnomalyScore, Evaluation, ScoreReport};
pub use trainer::{train, TrainingConfig, TrainingTrace};
pub use heatmap::{anomaly_heatmap, HeatmapResult, SpatialFeatureMap, SpatialMapSet};
