//! Closed-loop flow classification grounded by an append-only experience library.
//!
//! A classification agent labels each NetFlow record with help from the most
//! similar past mistake stored in the [`library::ExperienceLibrary`]. When it is
//! wrong during library construction, an error-analysis agent turns the mistake
//! into a readable rule that is appended to the library for later flows.
//!
//! Module map:
//!
//! - [`flow`]: CSV ingestion, the 14-feature record, canonical JSON, class-balanced splits.
//! - [`embedding`]: flow embeddings (remote service client and offline hash embedder).
//! - [`library`]: exact cosine flat index, threshold retrieval, durable file format.
//! - [`agents`]: prompts, label parsing, remote chat agent and deterministic mocks.
//! - [`pipeline`]: library build, frozen evaluation, three-way ablation.
//! - [`metrics`]: confusion matrix, macro metrics, learning curves.
//! - [`config`]: run configuration shared by the pipeline and the CLI.
//! - [`synthetic`]: seeded synthetic flow streams for offline runs.

pub mod agents;
pub mod config;
pub mod embedding;
pub mod flow;
pub mod library;
pub mod metrics;
pub mod pipeline;
pub mod remote;
pub mod synthetic;

pub use agents::{AgentVerdict, ParseStatus, Prompt, PromptKind, RuleText};
pub use config::RunConfig;
pub use embedding::{Embedder, FlowEmbedding, HashEmbedder};
pub use flow::{ClassLabel, ClassSet, FlowRecord, LabeledFlow};
pub use library::{ExperienceEntry, ExperienceLibrary, RetrievalResult};
pub use metrics::{ConfusionMatrix, MetricsReport};
