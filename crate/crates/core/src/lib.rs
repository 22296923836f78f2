//! Small-scale knowledge distillation lab: dense networks with manual
//! gradients, feature-norm and feature-direction regularizers, and an
//! experiment harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classmeans;
pub mod data;
pub mod error;
pub mod exp;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Mat;
