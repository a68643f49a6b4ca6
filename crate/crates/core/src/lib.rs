//! Unsupervised segmentation of patch-feature graphs.
//!
//! Patch features are turned into a thresholded cosine-similarity graph, a
//! multi-branch graph attention network produces a soft cluster assignment,
//! and the network is trained per image (or collectively) against a
//! modularity loss with a collapse regularizer. Hard clusters are decoded
//! into a binary foreground mask and scored with IoU and Dice.
//!
//! All numeric code is generic over [`Scalar`]; the aliases below fix the
//! default `f64` instantiation.

pub mod autodiff;
pub mod error;
pub mod gat;
pub mod graph;
pub mod io;
pub mod objective;
pub mod scalar;
pub mod segment;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autodiff::{grad_check, Activation, GradCheckReport, Tape, Var};
pub use error::{Error, Result};
pub use gat::{init_params, GatModel, ModelConfig};
pub use graph::{build_adjacency, l2_normalize_rows, modularity_matrix, neighborhoods, PreparedGraph};
pub use io::{read_feature_matrix, read_tensor, write_tensor, Dtype, GridMeta};
pub use objective::{collapse_regularizer, hard_modularity, relaxed_modularity, Assignment};
pub use scalar::Scalar;
pub use segment::{decode_mask, iou_dice, BinaryMask, MetricResult};
pub use train::{train_collective, train_per_image, TrainConfig, TrainMode, TrainOutcome};

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type FeatureMatrix64 = io::FeatureMatrix<f64>;
pub type PatchGraph64 = graph::PatchGraph<f64>;
pub type ModularityMatrix64 = graph::ModularityMatrix<f64>;
pub type GatModel64 = gat::GatModel<f64>;
pub type GatModel32 = gat::GatModel<f32>;
pub type Assignment64 = objective::Assignment<f64>;
pub type Tape64 = autodiff::Tape<f64>;
pub type PreparedGraph64 = graph::PreparedGraph<f64>;
pub type TrainOutcome64 = train::TrainOutcome<f64>;

pub use tensor::Tensor;
