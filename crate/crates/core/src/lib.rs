//! Self-supervised contrastive pre-training for single-channel SAR imagery.

pub mod checkpoint;
pub mod datapipe;
pub mod downstream;
pub mod encoder;
mod error;
pub mod losses;
pub mod memorybank;
pub mod geometry;
pub mod pretrain;
pub mod raster;
pub mod scene_inference;

pub use error::{Error, Result};
