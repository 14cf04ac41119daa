//! Deformable neural radiance fields with position-conditional anchor
//! composition for local attribute editing.

pub mod anchors;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradsuite;
pub mod guidance;
pub mod image;
pub mod nn;
pub mod optim;
pub mod pac;
pub mod render;
pub mod scene;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
