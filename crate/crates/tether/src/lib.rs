//! Desk-scale multimodal reference resolution and query rewriting for
//! dialogue agents.
//!
//! The pipeline consumes a user utterance plus conversational, screen, and
//! background context, and produces two complementary views of the request:
//! a context-independent rewrite of the utterance, and mention spans linked
//! to contextual entities. Reference resolution runs as a two-stage
//! detector/resolver with rule short-circuits; rewriting is a small
//! encoder-decoder with a copy mechanism gated by a three-way use-case
//! classifier. Models are tiny, trained from scratch on synthetic data
//! generated by the bundled template engine.

pub mod mention_detector;
pub mod mention_resolver;
pub mod nn;
pub mod text;
pub mod types;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("training example is invalid: {0}")]
    InvalidExample(String),
}
