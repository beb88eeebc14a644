//! Product-type categorization over a product taxonomy.
//!
//! The crate covers the whole offline pipeline: corpus ingest and splitting
//! ([`catalog`]), dictionaries and structured-attribute serialization
//! ([`text`]), a small autodiff core ([`tensor`]), the flat Multi-CNN and
//! hierarchical models ([`models`]), and SGDR training plus evaluation
//! ([`train`]).

pub mod catalog;
pub mod config;
pub mod error;
pub mod models;
pub mod pipeline;
pub mod synthetic;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
