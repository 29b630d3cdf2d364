//! Uncertainty-aware domain adaptation for lesion segmentation, exercised
//! end to end on a synthetic two-modality phantom dataset.
//!
//! The crate couples a stochastic image-translation network (content/style
//! encoders, AdaIN generators, patch discriminators) with a residual-adapter
//! segmentation network, trained jointly under a composite objective. A CLI
//! (`uada`) drives dataset generation, training, translation, evaluation and
//! plotting.

pub mod cli;
pub mod error;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod plot;
pub mod segmentation;
pub mod tensor;
pub mod trainer;
pub mod translation;

pub use error::{Error, Result};
