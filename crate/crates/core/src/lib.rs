//! Query-conditioned subgraph retrieval over knowledge graphs.

pub mod anchor;
pub mod api;
pub mod bubble;
pub mod bundle;
pub mod config;
pub mod embedding;
pub mod eval;
pub mod expand;
pub mod graph;
pub mod oracle;
pub mod pipeline;
pub mod rank;
pub mod reasoner;
pub mod synth;
pub mod text;
pub mod value;
pub mod wire;
