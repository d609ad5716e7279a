pub mod adversary;
pub mod bsf;
pub mod error;
pub mod eval_stats;
pub mod ingest;
pub mod pipeline;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
