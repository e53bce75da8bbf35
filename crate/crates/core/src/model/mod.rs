//! Encoders, full variants, the complexity audit and checkpoints.

mod asf;
mod audit;
pub mod checkpoint;
mod config;
mod encoder;

pub use asf::{Asf, Model, Output};
pub use audit::{ComplexityReport, LayerRecord, MAC_CONVENTION};
pub use checkpoint::Checkpoint;
pub use config::{BranchKind, ModelConfig, Overrides, TokenStage};
pub use encoder::{ComputationEncoder, Mixer, Part, ReductionEncoder};
