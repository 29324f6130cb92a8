//! Hand-centric self-supervised object-state representations and
//! hand-prior interaction forecasting.

pub mod acp;
pub mod array_file;
pub mod assignment;
pub mod config;
pub mod detections;
pub mod error;
pub mod eval;
pub mod frames;
pub mod geometry;
pub mod image_ops;
pub mod losses;
pub mod models;
pub mod motion;
pub mod nn;
pub mod pipeline;
pub mod sampling;
pub mod synthworld;
pub mod tensor;
pub mod tracker;
pub mod training;

pub use detections::{DetKind, Detection, FrameDetections, Side};
pub use error::{Error, Result};
pub use geometry::{iou, BBox};
pub use motion::{hand_motion, positional_encode, HandMotionDescriptor, PositionalEncoding};
pub use tensor::Tensor;
pub use tracker::{build_tracks, Track, TrackEntry, TrackerParams, TrackingMode};
pub use config::RunConfig;
pub use synthworld::{World, WorldConfig};
pub use training::{PretrainConfig, PretrainMode};
