//! Query-by-example pattern spotting for historical document collections.
//!
//! The offline stage ([`pipeline::build_index`]) crops, canvases and tiles every
//! page, extracts a three-level embedding pyramid per tile, optionally keeps only
//! the cells a region classifier predicts as non-text, and persists the result as
//! one exact-search shard per level. The online stage ([`spotting::spot`]) embeds
//! a query at its assigned level, ranks indexed regions by similarity and maps the
//! hits back to query-sized boxes on the original pages.

pub mod config;
pub mod embedder;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod index;
pub mod pipeline;
pub mod preprocess;
pub mod regionfilter;
pub mod service;
pub mod spotting;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::BBox;
