//! Scientific discourse tagging: a hierarchical clause tagger (attention
//! pooling over token embeddings, BiLSTM-CRF over clauses), a feature CRF for
//! evidence-fragment boundaries, transfer-learning utilities and evaluation.

mod binio;
pub mod corpus;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod featcrf;
pub mod fragments;
pub mod layers;
pub mod metrics;
pub mod numeric;
pub mod synthetic;
pub mod tagger;
pub mod transfer;

pub use error::{Error, Result};
