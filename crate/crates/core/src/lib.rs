//! Per-layer LoRA adapters stored in associative memories and retrieved per
//! sample, trained with a two-stage adaptation/consolidation pipeline across
//! domain-generalization, domain-incremental and class-incremental streams.

pub mod backbone;
pub mod continual;
pub mod error;
pub mod harness;
pub mod memory;
pub mod numerics;
pub mod pipeline;
pub mod retrieval;
pub mod rng;
pub mod tasks;

pub use error::{MiraError, Result};
