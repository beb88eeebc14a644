//! Micro-batching inference over HTTP.
//!
//! Requests are appended to one bounded FIFO queue. A single drain thread
//! wakes on a fixed poll interval (or as soon as a full batch is waiting),
//! takes up to `max_batch` requests, runs one batched forward pass and
//! answers every request with its own top-k.

mod batcher;
mod http;
mod stats;

pub use batcher::{BatchError, BatchPredictor, Batcher, BatcherConfig, EnqueueError, Reply, Ticket};
pub use http::{router, serve, AppState, PredictRequest};
pub use stats::{Stats, StatsSnapshot};
