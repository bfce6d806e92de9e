//! Deterministic local style curriculum learning for robust segmentation,
//! desk-scale: f64 tensors with a reverse-mode tape, a tiny U-Net, a
//! synthetic multi-vendor dataset, the curriculum itself, and evaluation
//! with test-time augmentation.

pub mod checkpoint;
pub mod config;
pub mod curriculum;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod stylegen;
pub mod tape;
pub mod tensor;
pub mod tta;
pub mod unet;

pub use error::{LsclError, Result};
