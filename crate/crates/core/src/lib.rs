//! Popularity-aligned response generation at desk scale.
//!
//! The pipeline: generate a seeded synthetic corpus of posts with like-ranked
//! responses, fit a small decoder-only language model on the top responses,
//! fit a pairwise reward model on like-count preferences, then run PPO with a
//! curriculum (reward enhancement, reward ranking, self-paced sampling) and
//! score the result with overlap and diversity metrics.

pub mod clppo;
pub mod corpus;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod reward;
pub mod seeding;
pub mod sft;

/// Lowercase hex of a byte string, for content digests.
pub(crate) fn hex(bytes: &[u8]) -> String {
    use std::fmt::Write;
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        write!(s, "{b:02x}").expect("formatting into a String cannot fail");
    }
    s
}

/// Error type shared by the training stages.
#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Metric(#[from] metrics::MetricError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
