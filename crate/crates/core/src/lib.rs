//! Numerical toolkit for lesion segmentation, classification and detection:
//! segmentation losses with analytic gradients, dense mean-field CRF
//! inference, multi-instance learning heads, adversarial perturbations,
//! network building-block algebra, 3D anchor-based detection utilities,
//! weakly supervised EM over detector proposals, evaluation metrics and a
//! deterministic synthetic data generator.

// Argument guards are written `!(x >= 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversarial;
pub mod blocks;
pub mod crf;
pub mod deepem;
pub mod detection;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod mil;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
