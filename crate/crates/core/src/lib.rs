//! Core library for vizarel: rollout data model, rollout log ingestion,
//! replay-buffer embeddings and the viewport engine.

pub mod embedding;
pub mod ingest;
pub mod rollout;
pub mod viewport;

pub use embedding::{embed_session, Embedding, EmbeddingConfig, EmbeddingError, EmbeddingMethod};
pub use ingest::{load_session, IngestError, IngestReport};
pub use rollout::{Episode, Experience, ExperienceId, FeatureConfig, Session, SessionMeta};
pub use viewport::{ViewportDescriptor, ViewportError, ViewportPayload, ViewportType};
