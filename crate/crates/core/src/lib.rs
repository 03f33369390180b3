//! Graph-enhanced self-attention for cloze-style reading comprehension.
//!
//! The pipeline turns a [`ClozeInstance`] into a flat word + entity token
//! sequence, builds the entity graph and the relative-position label matrix,
//! runs the transformer stack and scores every candidate entity.

pub mod ablation;
pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod convert;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod reader;
pub mod sequence;
pub mod synth;
pub mod train;
pub mod vocab;

pub use config::RunConfig;
pub use corpus::{normalize_answer, parse_native, write_native, ClozeInstance, Mention, PLACEHOLDER};
pub use error::{ErrorKind, GesaError, Result};
pub use graph::{build_graph, EdgeType, HeterogeneousGraph};
pub use labels::{build_label_matrix, Ablation, AblationSet, Label, LabelMatrix, LabelVocabulary, W2wMode};
pub use model::{ModelConfig, ModelParams};
pub use reader::Prediction;
pub use sequence::{build_sequence, TokenSequence};
pub use train::{TrainConfig, Example};
pub use vocab::{build_vocab, Vocabulary};
