//! Joint nuclei detection and segmentation.
//!
//! A shared convolutional encoder feeds a U-shaped segmentation decoder and
//! anchor-based detection heads; a small refinement network turns each
//! detection into an instance mask. The crate covers the full loop: anchor
//! geometry, the combined loss, the network with hand-written backward
//! passes, data preparation, training, inference and VOC-style evaluation.

pub mod assignment;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod inference;
pub mod losses;
pub mod network;
pub mod run;
pub mod sys;
pub mod training;

pub use error::{Error, Result};
