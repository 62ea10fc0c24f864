//! Model-facing side of the clustering harness: prompt rendering, an
//! OpenAI-compatible chat/embeddings client, the batch evaluation runner and
//! the multi-agent task synthesis pipeline.

pub mod client;
pub mod error;
pub mod eval;
pub mod prompt;
pub mod synth;

pub use client::{ChatAgent, Completion, EndpointConfig, OpenAiClient};
pub use error::LlmError;
pub use eval::{CachedResponse, EvalRecord, InferOptions, OverlongPolicy};
