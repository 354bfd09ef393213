//! Unified physical-digital face attack detection.
//!
//! Teacher prompts (fixed templates) and student prompts (learned context
//! vectors) are encoded by a small text transformer; a fusion block and a
//! cosine anchor loss tie the student features to the teacher anchors; the
//! student context is also projected into the visual token stream of a small
//! vision transformer. A synthetic ID-consistent dataset generator and an
//! ACER/ACC/AUC/EER evaluation harness complete the pipeline.

pub mod autograd;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod nn;
pub mod parallel;
pub mod tensor;
pub mod text;
pub mod trainer;
pub mod ukm;
pub mod vision;

pub use error::{Error, Result};
pub use tensor::Matrix;
