//! Corpus generation, ingestion and feature extraction.

pub mod corpus;
pub mod grid;
pub mod render;
pub mod tensorfile;
pub mod text;
