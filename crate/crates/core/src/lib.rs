//! Trainable desk-scale visual-language pipeline built around token
//! compression (256 -> 64 visual tokens) and text-side fusion, with an
//! instrumented multiply-add cost model.
//!
//! Data flow: patches -> stub vision encoder -> MLP projector -> compressor,
//! with a fusion module injecting full-resolution visual context into the
//! text embeddings; the causal decoder consumes
//! `[compressed visual | fused text]`.

pub mod block;
pub mod checkpoint;
pub mod config;
pub mod connectors;
pub mod cost;
pub mod error;
pub mod fusion;
pub mod llm;
pub mod params;
pub mod pipeline;
pub mod sequence;
pub mod tensor;
pub mod tokenizer;
pub mod train;
pub mod verify;
pub mod vision;

pub use config::{CompressorKind, FusionKind, InitMode, PipelineConfig, RunConfig, TrainConfig};
pub use error::{Error, Result};
pub use sequence::TokenSequence;
pub use tensor::{FlopCounter, Tape, Tensor, ValId};
