//! Promptable nuclei segmentation from weak box annotations: box-prompted
//! pseudo-labelling, adapter finetuning and prompt-free inference.

pub mod dataio;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pseudolabel;
pub mod trainer;

pub use error::{Error, Result};
