//! Data curation for continual pre-training: corpus ingestion, topic
//! labeling, perplexity-driven topic mixtures and curricula, QA synthesis,
//! controlled corruption, and deterministic two-stage shard planning.

pub mod clients;
pub mod config;
pub mod corpus;
pub mod corruption;
pub mod curriculum;
pub mod error;
pub mod mixture;
pub mod pipeline;
pub mod planner;
pub mod report;
pub mod synthesis;
pub mod topic;
pub mod util;

pub use error::{Error, ErrorKind, Result};
