//! Task-vector arithmetic over neural-network checkpoints.
//!
//! Extract a vector as the difference between a fine-tuned and a pretrained
//! checkpoint, expand LoRA adapters into dense deltas, then scale, compose
//! and apply vectors back onto a base model. A small trainable toy lab and
//! WER/CER/embedding metrics make the behaviour of those operations
//! measurable on a laptop.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod sweep;
pub mod tensor;
pub mod toy;
pub mod vector;

pub use checkpoint::{
    fingerprint, read_checkpoint, read_lora, write_checkpoint, write_lora, Checkpoint, LoraAdapter,
    LoraLayer, VectorManifest,
};
pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
pub use vector::{
    apply, compose, diff_report, extract_vector, lora_delta, scale_vector, Coefficient, TaskVector,
};
