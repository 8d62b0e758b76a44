//! Multi-organ CT segmentation with multi-axis spectral filtering and dual
//! attention: model blocks, composite loss, evaluation metrics, data
//! pipeline, and a deterministic CPU training harness.

pub mod autodiff;
pub mod config;
pub mod containers;
pub mod da_plus;
pub mod data;
pub mod error;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod mewb;
pub mod network;
pub mod params;
pub mod types;

pub use config::{ModelConfig, OrganClass, Variant};
pub use error::{CheckpointError, ConfigError, DataError, ShapeError, TrainError};
pub use types::{FeatureMap, ImageBatch, LabelMask};
