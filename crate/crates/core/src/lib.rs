//! Small-target detection over fused infrared and visible imagery.
//!
//! The crate covers the whole desk-scale pipeline: feature-point registration
//! of the visible frame onto the infrared frame, adaptive weighted feature
//! fusion, CBAM attention, a single-anchor grid detector trained with a
//! three-term loss, and the usual detection metrics (PR curve, AP, mAP@0.5,
//! F1 against confidence).

pub mod attention;
pub mod boxes;
pub mod detector;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod registration;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, RegistrationStage, Result};
