//! Spoken term detection with a grid-cell regressor.
//!
//! An utterance is a fixed-size feature matrix; a query term is a phoneme
//! sequence mapped to a unit embedding vector. A convolutional network reads
//! the utterance, concatenates its encoding with the query embedding, and
//! predicts for each time cell a candidate embedding plus the event center
//! and duration relative to that cell. Detection compares predicted and query
//! embeddings by cosine similarity against a tuned threshold; evaluation
//! reports average precision, temporal intersection-over-union, and term
//! weighted value.

pub mod corpus;
pub mod detect;
pub mod embedding;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod grid;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod trainer;

pub use error::{Error, Result};
