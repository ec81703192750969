//! Retrieval-augmented help-desk engine.
//!
//! Markdown documentation is scanned into a content-hash [`corpus::Manifest`],
//! chunked ([`chunker`]), embedded ([`embed`]) and published as an immutable
//! index generation ([`vecstore`]). Questions run through the [`rag`] pipeline
//! and conversations are persisted by [`chat`].

pub mod chat;
pub mod chunker;
pub mod corpus;
pub mod desk;
pub mod embed;
pub mod ingest;
pub mod rag;
pub mod vecstore;
