//! Joint contrastive learning of road-segment and trajectory embeddings.

pub mod augment;
pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod rst;
pub mod synth;
pub mod trainer;
pub mod transition;

pub use error::{Error, Result};
