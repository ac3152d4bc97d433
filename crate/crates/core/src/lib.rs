//! Delta embedding learning.
//!
//! Pretrained word vectors stay frozen; a task learns a sparse additive
//! correction per word under an L21 (group lasso) penalty, so only words
//! whose meaning matters for the task move, and they move as little as
//! possible. The crate also carries the intrinsic evaluations used to check
//! that the corrected vectors keep what the pretrained ones knew.

pub mod cli;
pub mod delta;
pub mod eval;
pub mod manifest;
pub mod model;
pub mod store;
pub mod toy;
pub mod trainer;

pub use delta::{ComposedEmbedding, DeltaTable, Mode};
pub use model::{ClassifierParams, Example, LabeledExample};
pub use store::{EmbeddingMatrix, Vocabulary, WordVectors};
pub use trainer::{train, RegImpl, TrainConfig, TrainOutcome, TrainReport};
