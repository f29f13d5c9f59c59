//! Active learning of triplet metrics with decorrelated batch selection.
//!
//! A small MLP embeds objects; squared Euclidean distance between
//! embeddings defines the learned metric. Batches of triplet queries are
//! chosen by scoring an informative candidate set and then picking a
//! mutually diverse subset with weighted farthest-point sampling.
//!
//! The modules, bottom up:
//!
//! * [`linalg`], [`nn`]: dense matrices, the MLP, back-propagation, Adam.
//! * [`metric`]: triplets, the exponential triplet loss, ordering
//!   probabilities and per-triplet gradients.
//! * [`acquisition`]: informativeness and diversity measures, FPS, BADGE.
//! * [`active_loop`]: the select / annotate / retrain loop.
//! * [`data`]: synthetic datasets, triplet pools, CSV I/O.
//! * [`eval`]: triplet generalization accuracy and experiment grids.

pub mod acquisition;
pub mod active_loop;
pub mod checkpoint;
pub mod data;
mod error;
pub mod eval;
pub mod linalg;
pub mod metric;
pub mod nn;

pub use acquisition::{
    AcquisitionConfig, DiversityMeasure, EuclideanMode, InformativenessMeasure, Strategy, StrategySpec,
};
pub use active_loop::{DatasetOracle, LoopSetup, LoopState, Oracle, TrainBudget};
pub use data::{GroundTruthMetric, ObjectSet, TripletPool};
pub use error::{Error, Result};
pub use eval::{ExperimentGrid, TGARecord};
pub use linalg::{DenseMatrix, DenseVector};
pub use metric::{Closer, EmbeddingModel, EmbeddingSnapshot, LabeledTriplet, Mu, Triplet};
pub use nn::{AdamConfig, MlpParams};
