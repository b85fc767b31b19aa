//! Task-aware graph attention network for multitask brain-connectome
//! prediction: graph construction from ROI time series, a from-scratch
//! reverse-mode autodiff engine, the model and its losses, SGD training with
//! leave-one-task-out cross-validation, synthetic data and file formats.

// `!(x > 0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;
pub mod graph;
pub mod io;
pub mod losses;
pub mod math;
pub mod model;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use graph::{BrainGraph, Edge, GraphOptions, LabeledGraph, ScanTimeSeries, TaskId, TaskSet};
pub use losses::LossWeights;
pub use math::{DType, Matrix, Real};
pub use model::{GraphInput, ModelConfig, Prediction, TaGat};
pub use synth::{generate_population, Population, SynthConfig};
pub use train::{Example, FoldSpec, Metrics, Report, TrainConfig};
