//! Language-instructed video object segmentation driven by a single `<TRK>`
//! token: a small language model reads a sparse/dense token summary of the
//! video, and the hidden state at `<TRK>` prompts a mask decoder that
//! segments every frame.

pub mod checkpoint;
pub mod datakit;
pub mod error;
pub mod eval;
pub mod inferpost;
pub mod maskdec;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod reasoner;
pub mod sampler;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{ModelConfig, VideoSegModel};
