//! Joint landmark detection and tracking for cine sequences where only the
//! first and last frames are annotated.
//!
//! A shared convolutional encoder feeds a heatmap detector and a
//! cross-correlation tracker. Training couples them: the tracker's positions
//! act as pseudo-labels for the detector on unannotated frames, and the
//! encoder is alternately pushed to increase and the heads to reduce that
//! disagreement.
//!
//! Numeric code is generic over [`Scalar`]; the `*32`/`*64` aliases below fix
//! the element type.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod experiments;
pub mod fsutil;
pub mod geometry;
pub mod heatmap;
pub mod inference;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod phantom;
pub mod plot;
pub mod scalar;
pub mod sequence;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{LandmarkPair, Motion2, Point2};
pub use heatmap::Heatmap;
pub use inference::{predict_sequence, Prediction};
pub use network::{ModelParams, NetworkConfig};
pub use phantom::PhantomConfig;
pub use scalar::Scalar;
pub use sequence::CineSequence;
pub use tensor::Tensor;
pub use trainer::{TrainConfig, TrainState};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Heatmap32 = Heatmap<f32>;
pub type Heatmap64 = Heatmap<f64>;
pub type Model32 = ModelParams<f32>;
pub type Model64 = ModelParams<f64>;
pub type TrainState32 = TrainState<f32>;
pub type TrainState64 = TrainState<f64>;
pub type LandmarkPair32 = LandmarkPair<f32>;
pub type LandmarkPair64 = LandmarkPair<f64>;
