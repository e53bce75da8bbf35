//! Adaptive split-fusion hybrid CNN-transformer.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`]: dense tensors, a gradient tape and a finite-difference checker,
//! * [`nn`]: parameters, linear/norm layers, attention, MLP and token reshaping,
//! * [`branches`]: the convolutional branch designs (HMCB, PCM, bottleneck),
//! * [`fusion`]: simple, context-agnostic and adaptive fusion of the two paths,
//! * [`model`]: encoders, full variants, the complexity auditor and checkpoints,
//! * [`train`]: CIFAR ingestion, AdamW, cosine schedule, EMA and the loop,
//! * [`analysis`]: per-depth and per-category gate statistics,
//! * [`verify`]: the gradient verification suite.

pub mod analysis;
pub mod atomic;
pub mod branches;
pub mod error;
pub mod fusion;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
