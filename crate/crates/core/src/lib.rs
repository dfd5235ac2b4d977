//! Domain-generalizable semantic segmentation at desk scale.
//!
//! Training side: episodic meta-learning over source domains with an exact
//! (second-order) meta-gradient through the inner SGD step, plus the plain
//! aggregation baseline. Test side: normalization with statistics of the
//! target images themselves, optionally pooled with style-matched images
//! from a FIFO image bank.

pub mod autodiff;
pub mod bank;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod normstats;
pub mod segnet;
pub mod synth;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{LabelMap, Tensor};
