//! Unsupervised optical flow estimation for LiDAR range-image sequences.
//!
//! Point clouds are projected to range images, a coarse-to-fine network with
//! channel/spatial attention predicts flow between consecutive frames, and
//! training minimizes multi-scale photometric reconstruction error, so no
//! flow labels are needed.

// `!(x > 0.0)` is how config validation rejects NaN along with bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod eval;
pub mod flow;
pub mod formats;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod kitti;
pub mod loss;
pub mod model;
pub mod params;
pub mod projection;
pub mod render;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use flow::FlowField;
pub use formats::{Checkpoint, Phase};
pub use graph::{Activation, Graph, Var};
pub use model::{FlowModel, LevelFlows, ModelConfig};
pub use params::{Moments, OptimizerConfig, ParameterStore};
pub use projection::{Point, ProjectionConfig, RangeImage};
pub use tensor::{Real, Shape, Tensor};
pub use train::{PairDataset, TrainConfig};
