//! Open-vocabulary classification with a graph-attention soft verbalizer.
//!
//! Answers are embedded with a word-vector table, expanded into a K-hop graph
//! of nearest-neighbor words, smoothed by attention over that graph, and
//! scored against a backbone feature by dot product. See the README for the
//! pipeline and file formats.

pub mod checkpoint;
pub mod embedding;
pub mod error;
pub mod graph;
pub mod head;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod provenance;
pub mod seeding;
pub mod synth;
pub mod verbalizer;
pub mod vocab;

pub use embedding::{EmbeddingTable, Phrase};
pub use error::{Error, Result};
pub use graph::AnswerGraph;
pub use head::{OpenVocabModel, TrainConfig};
pub use metrics::EvalReport;
pub use verbalizer::VerbalizerModel;
pub use vocab::{AnswerVocabulary, Category, QaSample};
