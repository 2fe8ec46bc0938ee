//! Orthogonal low-rank adapters and image-level masking for continual
//! test-time adaptation of dense predictors, plus the small numeric
//! substrate they run on.

pub mod adapter;
pub mod autodiff;
pub mod checkpoint;
pub mod engine;
pub mod error;
pub mod exec;
pub mod masking;
pub mod metrics;
pub mod nn;
pub mod pnm;
pub mod rng;
pub mod segnet;
pub mod synth;
pub mod tensor;
pub mod toy;

pub use error::{Error, Result};
