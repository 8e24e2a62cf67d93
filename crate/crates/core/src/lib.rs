//! Two-stage skeleton–image contrastive pretraining and prototype-guided
//! finetuning for video person re-identification, at desk scale.
//!
//! The crate is organised bottom-up: [`tensor`] (values, reverse-mode
//! differentiation, checkpoints), [`nn`] (layers and attention), the two
//! encoders ([`visual`], [`skeleton`]), the training objectives ([`align`],
//! [`pfu`], [`sgtm`], [`losses`]), [`data`] generation and ingestion,
//! retrieval [`eval`], and the [`pipeline`] that runs both stages.

pub mod align;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck_suite;
pub mod losses;
pub mod nn;
pub mod pfu;
pub mod pipeline;
pub mod rng;
pub mod sgtm;
pub mod skeleton;
pub mod tensor;
pub mod visual;

pub use error::{Error, Result};
pub use tensor::{Gradients, Graph, Tensor, Var};
